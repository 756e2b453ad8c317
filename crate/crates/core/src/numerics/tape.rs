//! Reverse-mode automatic differentiation over matrices.
//!
//! A [`Tape`] records matrix-valued operations eagerly during the forward
//! pass; [`Tape::backward`] then walks the record in reverse and accumulates
//! gradients. The op set is exactly what the transformer, the LoRA deltas,
//! and the convolutional classifier need — nothing speculative.

use std::rc::Rc;

use crate::error::{PiwError, Result};
use crate::numerics::matrix::{self, Matrix, LOG_FLOOR};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    /// Leaf without gradient (data, masks, frozen weights).
    Constant,
    /// Leaf that collects gradient.
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `a (n x d) + bias (1 x d)` broadcast over rows.
    AddRow(Var, Var),
    /// Elementwise product of same-shape matrices.
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Relu(Var),
    SoftmaxRows(Var),
    /// Row-wise RMS normalization with a learned per-column gain.
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    /// Output row i = input row `rows[i]` (embedding lookup).
    GatherRows { x: Var, rows: Rc<Vec<usize>> },
    /// Arbitrary element gather; `map[i] < 0` reads as zero (padding).
    Gather {
        x: Var,
        rows: usize,
        cols: usize,
        map: Rc<Vec<i64>>,
    },
    /// 2x2 average pooling over a (h*w) x channels layout.
    AvgPool2 { x: Var, in_h: usize, in_w: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize, len: usize },
    /// Same data, different shape.
    Reshape(Var),
    /// Sum of all entries, as a 1x1 matrix.
    SumAll(Var),
    /// Fused row-softmax + mean NLL; caches the probabilities.
    CrossEntropy {
        logits: Var,
        targets: Rc<Vec<usize>>,
        probs: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Eager computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant)
    }

    pub fn param(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Param)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matrix::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != m.cols() {
            return Err(PiwError::shape("Tape::add_row", m.shape(), b.shape()));
        }
        let mut out = m.clone();
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(b.row(0)) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, mb) = (self.value(a), self.value(b));
        if ma.shape() != mb.shape() {
            return Err(PiwError::shape("Tape::mul", ma.shape(), mb.shape()));
        }
        let data = ma.data().iter().zip(mb.data()).map(|(x, y)| x * y).collect();
        let value = Matrix::new(ma.rows(), ma.cols(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let data = m.data().iter().map(|v| v.max(0.0)).collect();
        let value = Matrix::new(m.rows(), m.cols(), data).expect("relu preserves finiteness");
        self.push(value, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = Matrix::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            let row = m.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let dst = out.row_mut(r);
            for (o, &v) in dst.iter_mut().zip(row) {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            }
            for o in dst.iter_mut() {
                *o /= sum;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        const EPS: f64 = 1e-6;
        let (m, g) = (self.value(x), self.value(gain));
        if g.rows() != 1 || g.cols() != m.cols() {
            return Err(PiwError::shape("Tape::rms_norm gain", m.shape(), g.shape()));
        }
        let d = m.cols() as f64;
        let mut inv_rms = Vec::with_capacity(m.rows());
        let mut out = Matrix::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            let row = m.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
            let ri = 1.0 / (ms + EPS).sqrt();
            inv_rms.push(ri);
            for (o, (&v, &gv)) in out.row_mut(r).iter_mut().zip(row.iter().zip(g.row(0))) {
                *o = v * ri * gv;
            }
        }
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }))
    }

    pub fn gather_rows(&mut self, x: Var, rows: Rc<Vec<usize>>) -> Result<Var> {
        let m = self.value(x);
        let mut out = Matrix::zeros(rows.len(), m.cols());
        for (i, &r) in rows.iter().enumerate() {
            if r >= m.rows() {
                return Err(PiwError::Index {
                    context: "Tape::gather_rows".to_string(),
                    index: r,
                    bound: m.rows(),
                });
            }
            out.row_mut(i).copy_from_slice(m.row(r));
        }
        Ok(self.push(out, Op::GatherRows { x, rows }))
    }

    /// Gather arbitrary elements of `x` into an `out_rows x out_cols` matrix.
    /// `map` is row-major over the output; negative entries produce zeros.
    pub fn gather(
        &mut self,
        x: Var,
        out_rows: usize,
        out_cols: usize,
        map: Rc<Vec<i64>>,
    ) -> Result<Var> {
        let m = self.value(x);
        if map.len() != out_rows * out_cols {
            return Err(PiwError::shape(
                "Tape::gather map",
                (out_rows, out_cols),
                (map.len(), 1),
            ));
        }
        let src = m.data();
        let mut data = Vec::with_capacity(map.len());
        for &idx in map.iter() {
            if idx < 0 {
                data.push(0.0);
            } else {
                let i = idx as usize;
                if i >= src.len() {
                    return Err(PiwError::Index {
                        context: "Tape::gather".to_string(),
                        index: i,
                        bound: src.len(),
                    });
                }
                data.push(src[i]);
            }
        }
        let value = Matrix::new(out_rows, out_cols, data)?;
        Ok(self.push(
            value,
            Op::Gather {
                x,
                rows: out_rows,
                cols: out_cols,
                map,
            },
        ))
    }

    /// 2x2 average pooling on a feature map stored as (h*w) rows x channel
    /// columns. Odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var, in_h: usize, in_w: usize) -> Result<Var> {
        let m = self.value(x);
        if m.rows() != in_h * in_w {
            return Err(PiwError::shape(
                "Tape::avg_pool2 layout",
                (in_h * in_w, m.cols()),
                m.shape(),
            ));
        }
        let (oh, ow) = (in_h / 2, in_w / 2);
        if oh == 0 || ow == 0 {
            return Err(PiwError::input("avg_pool2: pooled size underflow"));
        }
        let c = m.cols();
        let mut out = Matrix::zeros(oh * ow, c);
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = oy * ow + ox;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let src = (2 * oy + dy) * in_w + (2 * ox + dx);
                        for ch in 0..c {
                            let v = m.get(src, ch);
                            out.set(dst, ch, out.get(dst, ch) + 0.25 * v);
                        }
                    }
                }
            }
        }
        Ok(self.push(out, Op::AvgPool2 { x, in_h, in_w }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(PiwError::input("concat_cols: no parts"));
        }
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            if m.rows() != rows {
                return Err(PiwError::shape("concat_cols", (rows, total), m.shape()));
            }
            for r in 0..rows {
                out.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(PiwError::input("concat_rows: no parts"));
        }
        let cols = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut out = Matrix::zeros(total, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            if m.cols() != cols {
                return Err(PiwError::shape("concat_rows", (total, cols), m.shape()));
            }
            for r in 0..m.rows() {
                out.row_mut(offset + r).copy_from_slice(m.row(r));
            }
            offset += m.rows();
        }
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let m = self.value(x);
        if start + len > m.cols() {
            return Err(PiwError::Index {
                context: "Tape::slice_cols".to_string(),
                index: start + len,
                bound: m.cols(),
            });
        }
        let mut out = Matrix::zeros(m.rows(), len);
        for r in 0..m.rows() {
            out.row_mut(r).copy_from_slice(&m.row(r)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols { x, start, len }))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let m = self.value(x);
        if rows * cols != m.len() {
            return Err(PiwError::shape("Tape::reshape", (rows, cols), m.shape()));
        }
        let value = Matrix::new(rows, cols, m.data().to_vec())?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let value = Matrix::new(1, 1, vec![s]).expect("finite sum");
        self.push(value, Op::SumAll(x))
    }

    /// Mean cross-entropy over rows; returns a scalar (1x1) node.
    pub fn cross_entropy(&mut self, logits: Var, targets: Rc<Vec<usize>>) -> Result<Var> {
        let (loss, probs) = matrix::softmax_cross_entropy(self.value(logits), &targets)?;
        let value = Matrix::new(1, 1, vec![loss])?;
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
        ))
    }

    /// Mean of a set of scalar nodes.
    pub fn mean_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(PiwError::input("mean_scalars: no parts"));
        }
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        Ok(self.scale(acc, 1.0 / parts.len() as f64))
    }

    /// Sum of a set of scalar nodes.
    pub fn sum_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(PiwError::input("sum_scalars: no parts"));
        }
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    /// Backpropagate from a scalar node and return per-node gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let out = self.value(loss);
        if out.shape() != (1, 1) {
            return Err(PiwError::shape("Tape::backward loss", (1, 1), out.shape()));
        }
        if !out.is_finite() {
            return Err(PiwError::Numeric {
                context: "Tape::backward loss".to_string(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::ones(1, 1));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            // Re-insert: leaves keep their accumulated gradient.
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (ma, mb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let da = matrix::matmul(&g, &mb.transpose())?;
                    let db = matrix::matmul(&ma.transpose(), &g)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::AddRow(a, bias) => {
                    let cols = g.cols();
                    let mut db = Matrix::zeros(1, cols);
                    for r in 0..g.rows() {
                        for (o, v) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, g)?;
                    accumulate(&mut grads, *bias, db)?;
                }
                Op::Mul(a, b) => {
                    let (ma, mb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let da_data = g.data().iter().zip(mb.data()).map(|(x, y)| x * y).collect();
                    let db_data = g.data().iter().zip(ma.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, Matrix::new(g.rows(), g.cols(), da_data)?)?;
                    accumulate(&mut grads, *b, Matrix::new(g.rows(), g.cols(), db_data)?)?;
                }
                Op::Scale(a, factor) => {
                    accumulate(&mut grads, *a, g.scale(*factor))?;
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.transpose())?;
                }
                Op::Relu(a) => {
                    let ma = &self.nodes[a.0].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(ma.data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, Matrix::new(g.rows(), g.cols(), data)?)?;
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (&yv, &gv)) in
                            dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr))
                        {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let mx = &self.nodes[x.0].value;
                    let mg = &self.nodes[gain.0].value;
                    let d = mx.cols() as f64;
                    let mut dx = Matrix::zeros(mx.rows(), mx.cols());
                    let mut dg = Matrix::zeros(1, mx.cols());
                    for r in 0..mx.rows() {
                        let ri = inv_rms[r];
                        let xr = mx.row(r);
                        let gr = g.row(r);
                        // dyg = dy .* gain; dot = sum(dyg .* x)
                        let mut dot = 0.0;
                        for c in 0..mx.cols() {
                            dot += gr[c] * mg.get(0, c) * xr[c];
                        }
                        for c in 0..mx.cols() {
                            let dyg = gr[c] * mg.get(0, c);
                            dx.set(r, c, ri * dyg - (ri * ri * ri / d) * dot * xr[c]);
                            dg.set(0, c, dg.get(0, c) + gr[c] * xr[c] * ri);
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *gain, dg)?;
                }
                Op::GatherRows { x, rows } => {
                    let mx = &self.nodes[x.0].value;
                    let mut dx = Matrix::zeros(mx.rows(), mx.cols());
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, v) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Gather { x, map, .. } => {
                    let mx = &self.nodes[x.0].value;
                    let mut dx = Matrix::zeros(mx.rows(), mx.cols());
                    let dst = dx.data_mut();
                    for (gv, &idx) in g.data().iter().zip(map.iter()) {
                        if idx >= 0 {
                            dst[idx as usize] += gv;
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::AvgPool2 { x, in_h, in_w } => {
                    let mx = &self.nodes[x.0].value;
                    let (oh, ow) = (in_h / 2, in_w / 2);
                    let mut dx = Matrix::zeros(mx.rows(), mx.cols());
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let src = oy * ow + ox;
                            for dy in 0..2 {
                                for dx_ in 0..2 {
                                    let dst = (2 * oy + dy) * in_w + (2 * ox + dx_);
                                    for ch in 0..mx.cols() {
                                        let v = dx.get(dst, ch) + 0.25 * g.get(src, ch);
                                        dx.set(dst, ch, v);
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p.0].value.cols();
                        let mut dp = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        accumulate(&mut grads, p, dp)?;
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.nodes[p.0].value.rows();
                        let mut dp = Matrix::zeros(h, g.cols());
                        for r in 0..h {
                            dp.row_mut(r).copy_from_slice(g.row(offset + r));
                        }
                        accumulate(&mut grads, p, dp)?;
                        offset += h;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let mx = &self.nodes[x.0].value;
                    let mut dx = Matrix::zeros(mx.rows(), mx.cols());
                    for r in 0..g.rows() {
                        for c in 0..*len {
                            dx.set(r, start + c, g.get(r, c));
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Reshape(x) => {
                    let mx = &self.nodes[x.0].value;
                    let dx = Matrix::new(mx.rows(), mx.cols(), g.data().to_vec())?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::SumAll(x) => {
                    let mx = &self.nodes[x.0].value;
                    let gv = g.get(0, 0);
                    let dx = Matrix::new(mx.rows(), mx.cols(), vec![gv; mx.len()])?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let gv = g.get(0, 0);
                    let n = probs.rows() as f64;
                    let mut dl = probs.scale(gv / n);
                    for (r, &t) in targets.iter().enumerate() {
                        dl.set(r, t, dl.get(r, t) - gv / n);
                    }
                    accumulate(&mut grads, *logits, dl)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, delta: Matrix) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_scaled_in_place(&delta, 1.0),
        slot => {
            *slot = Some(delta);
            Ok(())
        }
    }
}

/// Stable per-row log-softmax floor shared with the fused loss node.
pub fn log_floor() -> f64 {
    LOG_FLOOR
}
