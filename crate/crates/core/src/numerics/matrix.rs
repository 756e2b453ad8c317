//! Dense row-major matrices in 64-bit floats.
//!
//! All training and evaluation math runs in f64; file formats downcast to
//! f32 at the serialization boundary.

use crate::error::{PiwError, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Log arguments are floored here before `ln` so a zero probability can never
/// produce `-inf`.
pub const LOG_FLOOR: f64 = 1e-300;

/// Dense matrix, row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Build a matrix from row-major data. Rejects length mismatches and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(PiwError::shape(
                "Matrix::new data length",
                (rows, cols),
                (data.len(), 1),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(PiwError::Numeric {
                context: "Matrix::new".to_string(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![1.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Seeded Gaussian entries with the given standard deviation.
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(PiwError::shape("Matrix::add", self.shape(), other.shape()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// self += factor * other
    pub fn add_scaled_in_place(&mut self, other: &Matrix, factor: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(PiwError::shape(
                "Matrix::add_scaled_in_place",
                self.shape(),
                other.shape(),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Matrix-vector product `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(PiwError::shape(
                "Matrix::matvec",
                self.shape(),
                (x.len(), 1),
            ));
        }
        Ok((0..self.rows)
            .map(|r| {
                self.row(r)
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .collect())
    }
}

/// Standard matrix product. Errors when the inner dimensions disagree, naming
/// both shapes.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(PiwError::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    // i-k-j loop order keeps the inner traversal contiguous for both operands.
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    if !out.is_finite() {
        return Err(PiwError::Numeric {
            context: "matmul result".to_string(),
        });
    }
    Ok(out)
}

/// Row-wise stable softmax plus mean negative log-likelihood.
///
/// Each row of `logits` is one item; `targets[i]` is the correct class for
/// row `i`. Returns `(loss, probs)` where every probability row sums to one
/// and `loss` is the mean of `-ln(probs[row][target])`.
pub fn softmax_cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    if targets.len() != logits.rows {
        return Err(PiwError::shape(
            "softmax_cross_entropy targets",
            logits.shape(),
            (targets.len(), 1),
        ));
    }
    if logits.rows == 0 {
        return Err(PiwError::input("softmax_cross_entropy: no rows"));
    }
    for (i, &t) in targets.iter().enumerate() {
        if t >= logits.cols {
            return Err(PiwError::Index {
                context: format!("softmax_cross_entropy target row {i}"),
                index: t,
                bound: logits.cols,
            });
        }
    }
    let mut probs = Matrix::zeros(logits.rows, logits.cols);
    let mut loss = 0.0;
    for r in 0..logits.rows {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let out = probs.row_mut(r);
        for (o, &v) in out.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
        loss -= out[targets[r]].max(LOG_FLOOR).ln();
    }
    loss /= logits.rows as f64;
    if !loss.is_finite() {
        return Err(PiwError::Numeric {
            context: "softmax_cross_entropy loss".to_string(),
        });
    }
    Ok((loss, probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let m = Matrix::new(3, 3, vec![2.0, -1.0, 0.5, 3.0, 4.0, -2.0, 0.0, 1.0, 7.0]).unwrap();
        let eye = Matrix::from_fn(3, 3, |r, c| if r == c { 1.0 } else { 0.0 });
        assert_eq!(matmul(&eye, &m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_example() {
        // [[1,2],[3,4]] x [[5],[6]] = [[17],[39]]
        let a = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::new(2, 1, vec![5.0, 6.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "{msg}");
    }

    #[test]
    fn softmax_uniform_logits() {
        let v = 7;
        let logits = Matrix::zeros(2, v);
        let (loss, probs) = softmax_cross_entropy(&logits, &[0, 3]).unwrap();
        for r in 0..2 {
            for c in 0..v {
                assert!((probs.get(r, c) - 1.0 / v as f64).abs() < 1e-12);
            }
        }
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let logits = Matrix::new(1, 4, vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let shifted = Matrix::new(1, 4, vec![100.3, 98.8, 102.0, 100.7]).unwrap();
        let (l1, p1) = softmax_cross_entropy(&logits, &[2]).unwrap();
        let (l2, p2) = softmax_cross_entropy(&shifted, &[2]).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for c in 0..4 {
            assert!((p1.get(0, c) - p2.get(0, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_extreme_logits_stay_finite() {
        let logits = Matrix::new(1, 2, vec![1000.0, 0.0]).unwrap();
        let (loss, probs) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.is_finite());
        assert!(loss < 1e-6);
        assert!((probs.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = Matrix::new(3, 5, (0..15).map(|i| (i as f64).sin() * 3.0).collect()).unwrap();
        let (_, probs) = softmax_cross_entropy(&logits, &[0, 1, 4]).unwrap();
        for r in 0..3 {
            assert!((probs.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_target_out_of_range() {
        let logits = Matrix::zeros(1, 3);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(PiwError::Index { .. })
        ));
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn matmul_associativity_on_random_triples() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(7, "matmul-assoc");
        for _ in 0..20 {
            let (m, k, n, p) = (
                rng.gen_range(1..6),
                rng.gen_range(1..6),
                rng.gen_range(1..6),
                rng.gen_range(1..6),
            );
            let a = Matrix::gaussian(m, k, 1.0, &mut rng);
            let b = Matrix::gaussian(k, n, 1.0, &mut rng);
            let c = Matrix::gaussian(n, p, 1.0, &mut rng);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let denom = left.frobenius_norm().max(1e-12);
            let mut diff = 0.0f64;
            for (x, y) in left.data().iter().zip(right.data()) {
                diff += (x - y) * (x - y);
            }
            assert!(diff.sqrt() / denom < 1e-9);
        }
    }
}
