//! Named parameter collections and the gradient-evaluation contract.
//!
//! Training code never touches the tape directly for bookkeeping: it hands a
//! loss builder and a [`ParamSet`] to [`gradients`], which binds trainable
//! entries as differentiable leaves and frozen entries as constants. Paths
//! outside the trainable set can therefore never receive a gradient.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{PiwError, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::tape::{Tape, Var};

/// Map from parameter path to the tape node holding that parameter.
pub type ParamVars = BTreeMap<String, Var>;

/// Builds the scalar loss node for a given parameter binding.
///
/// Implementations must be deterministic for fixed parameter values.
pub trait LossFn {
    fn loss(&self, tape: &mut Tape, vars: &ParamVars) -> Result<Var>;
}

impl<F> LossFn for F
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    fn loss(&self, tape: &mut Tape, vars: &ParamVars) -> Result<Var> {
        self(tape, vars)
    }
}

/// Named matrices plus the subset that receives gradient updates.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Matrix>,
    trainable: BTreeSet<String>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a parameter. Duplicate paths are rejected so a path can never
    /// silently alias two matrices.
    pub fn insert(&mut self, path: impl Into<String>, value: Matrix) -> Result<()> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(PiwError::conflict(format!("duplicate parameter path `{path}`")));
        }
        self.entries.insert(path, value);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Matrix> {
        self.entries.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Matrix> {
        self.entries.get_mut(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn mark_trainable(&mut self, path: &str) -> Result<()> {
        if !self.entries.contains_key(path) {
            return Err(PiwError::lookup(format!("unknown parameter path `{path}`")));
        }
        self.trainable.insert(path.to_string());
        Ok(())
    }

    pub fn mark_all_trainable(&mut self) {
        self.trainable = self.entries.keys().cloned().collect();
    }

    /// Empty the trainable set; every parameter becomes frozen.
    pub fn freeze_all(&mut self) {
        self.trainable.clear();
    }

    pub fn is_trainable(&self, path: &str) -> bool {
        self.trainable.contains(path)
    }

    pub fn trainable_paths(&self) -> impl Iterator<Item = &str> {
        self.trainable.iter().map(String::as_str)
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable.len()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all entries.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Matrix::len).sum()
    }

    /// Bind every entry onto the tape: trainable paths as gradient-collecting
    /// leaves, the rest as constants.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        let mut vars = ParamVars::new();
        for (path, value) in &self.entries {
            let var = if self.trainable.contains(path) {
                tape.param(value.clone())
            } else {
                tape.constant(value.clone())
            };
            vars.insert(path.clone(), var);
        }
        vars
    }
}

/// Evaluate the loss at the current parameter values (forward only).
pub fn eval_loss<L: LossFn>(loss_fn: &L, params: &ParamSet) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let loss = loss_fn.loss(&mut tape, &vars)?;
    let value = tape.value(loss);
    if value.shape() != (1, 1) {
        return Err(PiwError::shape("eval_loss", (1, 1), value.shape()));
    }
    Ok(value.get(0, 0))
}

/// Gradients of a scalar loss with respect to every trainable parameter.
///
/// Frozen paths are bound as constants, so they are structurally absent from
/// the result. A non-finite loss is reported before backprop runs.
pub fn gradients<L: LossFn>(loss_fn: &L, params: &ParamSet) -> Result<BTreeMap<String, Matrix>> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let loss = loss_fn.loss(&mut tape, &vars)?;
    let value = tape.value(loss).get(0, 0);
    if !value.is_finite() {
        return Err(PiwError::Numeric {
            context: "gradients: loss".to_string(),
        });
    }
    let mut grads = tape.backward(loss)?;
    let mut out = BTreeMap::new();
    for path in params.trainable_paths() {
        let var = vars[path];
        if let Some(g) = grads.take(var) {
            if !g.is_finite() {
                return Err(PiwError::Numeric {
                    context: format!("gradients: parameter `{path}`"),
                });
            }
            out.insert(path.to_string(), g);
        } else {
            // Trainable but unused by this loss: gradient is exactly zero.
            let m = &params.get(path).expect("trainable path exists");
            out.insert(path.to_string(), Matrix::zeros(m.rows(), m.cols()));
        }
    }
    Ok(out)
}

/// One plain SGD step: `p -= lr * g` for every gradient entry.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Matrix>,
    lr: f64,
) -> Result<()> {
    for (path, g) in grads {
        if !params.is_trainable(path) {
            return Err(PiwError::lookup(format!(
                "sgd_step: gradient for non-trainable path `{path}`"
            )));
        }
        let p = params
            .get_mut(path)
            .ok_or_else(|| PiwError::lookup(format!("sgd_step: unknown path `{path}`")))?;
        p.add_scaled_in_place(g, -lr)?;
    }
    Ok(())
}

/// Adam optimizer state. Per-parameter step normalization is what lets the
/// zero-initialized LoRA B factors and the attention projections move at
/// practical learning rates.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Matrix>) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (path, g) in grads {
            if !params.is_trainable(path) {
                return Err(PiwError::lookup(format!(
                    "Adam::step: gradient for non-trainable path `{path}`"
                )));
            }
            let p = params
                .get_mut(path)
                .ok_or_else(|| PiwError::lookup(format!("Adam::step: unknown path `{path}`")))?;
            let m = self
                .m
                .entry(path.clone())
                .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self
                .v
                .entry(path.clone())
                .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g.data()[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g.data()[i] * g.data()[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Central-difference gradient estimates for selected scalar entries.
///
/// This is the independent oracle for the backward pass: it only ever calls
/// [`eval_loss`], never [`gradients`]. Each sample is `(path, flat_index)`.
pub fn finite_difference<L: LossFn>(
    loss_fn: &L,
    params: &ParamSet,
    samples: &[(String, usize)],
    eps: f64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    let mut work = params.clone();
    for (path, idx) in samples {
        let original = {
            let m = work
                .get(path)
                .ok_or_else(|| PiwError::lookup(format!("finite_difference: `{path}`")))?;
            if *idx >= m.len() {
                return Err(PiwError::Index {
                    context: format!("finite_difference `{path}`"),
                    index: *idx,
                    bound: m.len(),
                });
            }
            m.data()[*idx]
        };
        work.get_mut(path).unwrap().data_mut()[*idx] = original + eps;
        let plus = eval_loss(loss_fn, &work)?;
        work.get_mut(path).unwrap().data_mut()[*idx] = original - eps;
        let minus = eval_loss(loss_fn, &work)?;
        work.get_mut(path).unwrap().data_mut()[*idx] = original;
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::IteratorRandom;
    use rand::Rng;

    fn quadratic_loss(tape: &mut Tape, vars: &ParamVars) -> Result<Var> {
        // 0.5 * sum over all bound params of ||p||^2
        let mut parts = Vec::new();
        for &v in vars.values() {
            let sq = tape.mul(v, v)?;
            let s = tape.sum_all(sq);
            parts.push(tape.reshape(s, 1, 1)?);
        }
        let total = tape.sum_scalars(&parts)?;
        Ok(tape.scale(total, 0.5))
    }

    #[test]
    fn gradient_of_half_norm_squared_is_identity() {
        let mut params = ParamSet::new();
        let p = Matrix::new(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        params.insert("p", p.clone()).unwrap();
        params.mark_trainable("p").unwrap();
        let grads = gradients(&quadratic_loss, &params).unwrap();
        assert_eq!(grads["p"], p);
    }

    #[test]
    fn frozen_paths_absent_from_gradients() {
        let mut rng = crate::rng::stream_rng(3, "frozen");
        for _ in 0..5 {
            let mut params = ParamSet::new();
            for i in 0..6 {
                params
                    .insert(format!("w{i}"), Matrix::gaussian(2, 2, 1.0, &mut rng))
                    .unwrap();
            }
            let how_many = rng.gen_range(1..=4);
            let chosen: Vec<String> = (0..6)
                .map(|i| format!("w{i}"))
                .choose_multiple(&mut rng, how_many);
            for path in &chosen {
                params.mark_trainable(path).unwrap();
            }
            let grads = gradients(&quadratic_loss, &params).unwrap();
            assert_eq!(grads.len(), chosen.len());
            for path in grads.keys() {
                assert!(chosen.contains(path));
            }
        }
    }

    #[test]
    fn duplicate_path_rejected() {
        let mut params = ParamSet::new();
        params.insert("w", Matrix::zeros(1, 1)).unwrap();
        assert!(params.insert("w", Matrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn finite_difference_matches_tape_on_nonlinear_loss() {
        let mut rng = crate::rng::stream_rng(17, "fd");
        let mut params = ParamSet::new();
        params
            .insert("w", Matrix::gaussian(3, 3, 0.7, &mut rng))
            .unwrap();
        params
            .insert("b", Matrix::gaussian(1, 3, 0.3, &mut rng))
            .unwrap();
        params.mark_all_trainable();

        let x = Matrix::gaussian(4, 3, 1.0, &mut rng);
        let targets = std::rc::Rc::new(vec![0usize, 2, 1, 1]);
        let loss_fn = move |tape: &mut Tape, vars: &ParamVars| -> Result<Var> {
            let xv = tape.constant(x.clone());
            let wt = tape.transpose(vars["w"]);
            let h = tape.matmul(xv, wt)?;
            let h = tape.add_row(h, vars["b"])?;
            let h = tape.relu(h);
            tape.cross_entropy(h, targets.clone())
        };

        let grads = gradients(&loss_fn, &params).unwrap();
        let mut samples = Vec::new();
        for path in ["w", "b"] {
            let len = params.get(path).unwrap().len();
            for idx in 0..len {
                samples.push((path.to_string(), idx));
            }
        }
        let fd = finite_difference(&loss_fn, &params, &samples, 1e-5).unwrap();
        for ((path, idx), fd_val) in samples.iter().zip(fd) {
            let ad_val = grads[path].data()[*idx];
            let rel = (fd_val - ad_val).abs() / fd_val.abs().max(ad_val.abs()).max(1e-6);
            assert!(rel < 1e-4, "{path}[{idx}]: fd={fd_val} ad={ad_val}");
        }
    }

    #[test]
    fn sgd_step_reduces_quadratic_loss() {
        let mut params = ParamSet::new();
        params
            .insert("p", Matrix::new(1, 2, vec![3.0, -4.0]).unwrap())
            .unwrap();
        params.mark_trainable("p").unwrap();
        let before = eval_loss(&quadratic_loss, &params).unwrap();
        for _ in 0..10 {
            let g = gradients(&quadratic_loss, &params).unwrap();
            sgd_step(&mut params, &g, 0.1).unwrap();
        }
        let after = eval_loss(&quadratic_loss, &params).unwrap();
        assert!(after < before * 0.2);
    }
}
