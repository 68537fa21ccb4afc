//! First-order optimizers over named parameter sets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use tidewater_autograd::Tensor;

use crate::model::ModelWeights;

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("no gradient for parameter {0}")]
    MissingGradient(String),
    #[error("gradient for {name} has shape {got:?}, parameter has {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("optimizer state does not cover parameter {0}")]
    MissingState(String),
    #[error("invalid optimizer state: {0}")]
    InvalidState(String),
}

pub type Result<T> = std::result::Result<T, OptimError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adam with bias correction.
    AdaptiveMoment,
    /// Adam whose update drops the radial component for scale-invariant weights.
    AdaptiveMomentProjected,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::AdaptiveMoment => "adaptive_moment",
            OptimizerKind::AdaptiveMomentProjected => "adaptive_moment_projected",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Cosine threshold of the projection test.
    pub delta: f64,
    /// Weight-decay multiplier applied when the projection fires.
    pub wd_ratio: f64,
}

impl Default for OptimizerParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, delta: 0.1, wd_ratio: 0.1 }
    }
}

/// Moment estimates for every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub params: OptimizerParams,
    pub step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: OptimizerParams, weights: &ModelWeights) -> Self {
        let zeros: BTreeMap<String, Tensor> =
            weights.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec()))).collect();
        Self { kind, params, step: 0, first: zeros.clone(), second: zeros }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.first.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.second.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.first.keys()
    }

    /// One update of every parameter in `weights` with learning rate `lr`.
    pub fn apply(&mut self, weights: &mut ModelWeights, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, p) in weights.iter() {
            let g = grads.get(name).ok_or_else(|| OptimError::MissingGradient(name.clone()))?;
            if g.shape() != p.shape() {
                return Err(OptimError::ShapeMismatch {
                    name: name.clone(),
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            if !self.first.contains_key(name) {
                return Err(OptimError::MissingState(name.clone()));
            }
        }
        self.step += 1;
        let OptimizerParams { beta1, beta2, eps, weight_decay, delta, wd_ratio } = self.params;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let step_size = lr / bc1;
        for (name, p) in weights.iter_mut() {
            let g = &grads[name];
            let m = self.first.get_mut(name).expect("checked");
            let v = self.second.get_mut(name).expect("checked");
            let mut perturb = Vec::with_capacity(p.numel());
            for i in 0..p.numel() {
                let gi = g.data()[i];
                let mi = &mut m.data_mut()[i];
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                perturb.push(*mi / (vi.sqrt() / bc2.sqrt() + eps));
            }
            let mut decay = 1.0;
            if self.kind == OptimizerKind::AdaptiveMomentProjected && p.shape().len() > 1 {
                if project(p, g, &mut perturb, delta, eps) {
                    decay = wd_ratio;
                }
            }
            if weight_decay > 0.0 {
                let f = 1.0 - lr * weight_decay * decay;
                p.data_mut().iter_mut().for_each(|x| *x *= f);
            }
            for (x, d) in p.data_mut().iter_mut().zip(&perturb) {
                *x -= step_size * d;
            }
        }
        Ok(())
    }

    /// Moments as named arrays for checkpointing, with `prefix` prepended.
    pub fn to_arrays(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (n, t) in &self.first {
            out.insert(format!("{prefix}m.{n}"), t.clone());
        }
        for (n, t) in &self.second {
            out.insert(format!("{prefix}v.{n}"), t.clone());
        }
        out
    }

    /// Inverse of [`Optimizer::to_arrays`]; the moments must cover exactly the names in `weights`.
    pub fn from_arrays(
        kind: OptimizerKind,
        params: OptimizerParams,
        step: u64,
        arrays: &BTreeMap<String, Tensor>,
        prefix: &str,
        weights: &ModelWeights,
    ) -> Result<Self> {
        let mut opt = Self::new(kind, params, weights);
        opt.step = step;
        for (name, p) in weights.iter() {
            for (key, store) in [("m", &mut opt.first), ("v", &mut opt.second)] {
                let t = arrays
                    .get(&format!("{prefix}{key}.{name}"))
                    .ok_or_else(|| OptimError::MissingState(name.clone()))?;
                if t.shape() != p.shape() {
                    return Err(OptimError::InvalidState(format!("{key}.{name} has shape {:?}", t.shape())));
                }
                store.insert(name.clone(), t.clone());
            }
        }
        let expected = 2 * weights.len();
        let found = arrays.keys().filter(|k| k.starts_with(prefix)).count();
        if found != expected {
            return Err(OptimError::InvalidState(format!("{found} moment arrays for {} parameters", weights.len())));
        }
        Ok(opt)
    }
}

/// Removes the radial component of `perturb` when the gradient is nearly
/// orthogonal to the weight, testing the per-output-channel view first and
/// the whole-tensor view second. Returns whether a projection happened.
fn project(p: &Tensor, g: &Tensor, perturb: &mut [f64], delta: f64, eps: f64) -> bool {
    let rows = p.shape()[0];
    for view_rows in [rows, 1] {
        let cols = p.numel() / view_rows;
        let mut max_cos: f64 = 0.0;
        for r in 0..view_rows {
            let span = r * cols..(r + 1) * cols;
            let (pr, gr) = (&p.data()[span.clone()], &g.data()[span]);
            let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
            let np = pr.iter().map(|a| a * a).sum::<f64>().sqrt().max(eps);
            let ng = gr.iter().map(|a| a * a).sum::<f64>().sqrt().max(eps);
            max_cos = max_cos.max((dot / (np * ng)).abs());
        }
        if max_cos < delta / (cols as f64).sqrt() {
            for r in 0..view_rows {
                let span = r * cols..(r + 1) * cols;
                let pr = &p.data()[span.clone()];
                let norm = pr.iter().map(|a| a * a).sum::<f64>().sqrt() + eps;
                let unit: Vec<f64> = pr.iter().map(|a| a / norm).collect();
                let along: f64 = unit.iter().zip(&perturb[span.clone()]).map(|(u, d)| u * d).sum();
                for (d, u) in perturb[span].iter_mut().zip(&unit) {
                    *d -= u * along;
                }
            }
            return true;
        }
    }
    false
}
