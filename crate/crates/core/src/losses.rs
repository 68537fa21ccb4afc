//! Loss terms and their composition into the training objective.
//!
//! The differentiable terms operate on graph variables holding `[N, C, H, W]`
//! batches; every L1 reduction is a mean. The scalar combinators mirror the
//! composition used by the trainer so reports can be recomputed offline.

use serde::{Deserialize, Serialize};
use tidewater_autograd::{AutogradError, Tensor, Var};

use crate::features::{FeatureError, FeatureExtractor};
use crate::imaging::{gradient_map, Image};
use crate::model::NetOutput;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("epoch {epoch} is outside the warm-up range 0..={total}")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Perceptual term weight.
    pub beta1: f64,
    /// Gradient-map term weight.
    pub beta2: f64,
    /// Contrastive term weight.
    pub gamma: f64,
    pub lambda_max: f64,
    /// Warm-up length `T` in epochs.
    pub warmup_total: usize,
    /// Guard added to the contrastive denominators.
    pub epsilon_cr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { beta1: 0.3, beta2: 0.1, gamma: 1.0, lambda_max: 0.2, warmup_total: 200, epsilon_cr: 1e-7 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("gamma", self.gamma), ("lambda_max", self.lambda_max)]
        {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LossError::InvalidWeights(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        if !(self.epsilon_cr > 0.0 && self.epsilon_cr.is_finite()) {
            return Err(LossError::InvalidWeights(format!("epsilon_cr = {} must be positive", self.epsilon_cr)));
        }
        if self.warmup_total == 0 {
            return Err(LossError::InvalidWeights("warmup_total must be positive".into()));
        }
        Ok(())
    }
}

/// Component values of one training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_sup: f64,
    pub l_per: f64,
    pub l_grad: f64,
    pub l_un: f64,
    pub l_cr: f64,
    pub lambda_t: f64,
    pub total: f64,
}

impl LossReport {
    /// Builds a report whose `total` is recomposed from the components.
    pub fn compose(w: &LossWeights, l_sup: f64, l_per: f64, l_grad: f64, l_un: f64, l_cr: f64, lambda_t: f64) -> Self {
        let sup = l_sup + w.beta1 * l_per + w.beta2 * l_grad;
        let total = overall_loss(sup, unsupervised_total(l_un, l_cr, w.gamma), lambda_t);
        Self { l_sup, l_per, l_grad, l_un, l_cr, lambda_t, total }
    }

    pub fn supervised(&self, w: &LossWeights) -> f64 {
        self.l_sup + w.beta1 * self.l_per + w.beta2 * self.l_grad
    }

    pub fn is_finite(&self) -> bool {
        [self.l_sup, self.l_per, self.l_grad, self.l_un, self.l_cr, self.lambda_t, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn same_shape(a: &Var<'_>, b: &Var<'_>, what: &str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(LossError::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())))
    }
}

pub fn l1_loss<'g>(a: &Var<'g>, b: &Var<'g>) -> Result<Var<'g>> {
    same_shape(a, b, "l1")?;
    Ok(a.mean_abs_diff(b)?)
}

/// Unweighted sum over the extractor taps of the mean absolute feature difference.
pub fn perceptual_loss<'g>(out: &Var<'g>, gt: &Var<'g>, fx: &FeatureExtractor) -> Result<Var<'g>> {
    same_shape(out, gt, "perceptual")?;
    let ones = vec![1.0; fx.tap_names().len()];
    Ok(fx.feature_distance(out, gt, &ones)?)
}

/// Gradient maps of a batch of ground-truth images as an `[N, 1, H, W]` array.
pub fn gradient_target(gt: &[&Image]) -> Result<Tensor> {
    let (h, w) = gt.first().map(|g| g.dims()).ok_or_else(|| LossError::ShapeMismatch("empty batch".into()))?;
    let mut data = Vec::with_capacity(gt.len() * h * w);
    for g in gt {
        if g.dims() != (h, w) {
            return Err(LossError::ShapeMismatch(format!("batch image {:?} vs {:?}", g.dims(), (h, w))));
        }
        data.extend(gradient_map(g).data);
    }
    Ok(Tensor::new(vec![gt.len(), 1, h, w], data)?)
}

/// Mean absolute difference between the predicted gradient map and the target's.
pub fn gradient_loss<'g>(g_out: &Var<'g>, g_target: &Var<'g>) -> Result<Var<'g>> {
    same_shape(g_out, g_target, "gradient")?;
    Ok(g_out.mean_abs_diff(g_target)?)
}

/// Supervised objective and its three components.
pub struct SupervisedTerms<'g> {
    pub total: Var<'g>,
    pub l1: Var<'g>,
    pub perceptual: Var<'g>,
    pub gradient: Var<'g>,
}

/// `l1 + β1·perceptual + β2·gradient` for a network output against ground truth
/// `gt` with gradient target `g_target`.
pub fn supervised_total<'g>(
    out: &NetOutput<'g>,
    gt: &Var<'g>,
    g_target: &Var<'g>,
    w: &LossWeights,
    fx: &FeatureExtractor,
) -> Result<SupervisedTerms<'g>> {
    let l1 = l1_loss(&out.restored, gt)?;
    let perceptual = perceptual_loss(&out.restored, gt, fx)?;
    let gradient = gradient_loss(&out.gradient, g_target)?;
    let total = l1.add(&perceptual.scale(w.beta1))?.add(&gradient.scale(w.beta2))?;
    Ok(SupervisedTerms { total, l1, perceptual, gradient })
}

/// L1 between the student output and its pseudo label.
pub fn consistency_loss<'g>(student_out: &Var<'g>, pseudo_label: &Var<'g>) -> Result<Var<'g>> {
    l1_loss(student_out, pseudo_label)
}

/// `Σ_j ω_j · d_j(out, positive) / (d_j(out, negative) + eps)`, evaluated per
/// sample and averaged over the batch.
pub fn contrastive_loss<'g>(
    student_out: &Var<'g>,
    positive: &Var<'g>,
    negative: &Var<'g>,
    fx: &FeatureExtractor,
    tap_weights: &[f64],
    eps: f64,
) -> Result<Var<'g>> {
    same_shape(student_out, positive, "contrastive positive")?;
    same_shape(student_out, negative, "contrastive negative")?;
    if !(eps > 0.0) {
        return Err(LossError::InvalidWeights(format!("contrastive eps = {eps} must be positive")));
    }
    fx.check_weights(tap_weights)?;
    let n = student_out.shape()[0];
    let fo = fx.extract(student_out)?;
    let fp = fx.extract(positive)?;
    let fn_ = fx.extract(negative)?;
    let mut total: Option<Var<'g>> = None;
    for i in 0..n {
        for j in 0..fo.len() {
            let o = select_samples(&fo[j], &[i])?;
            let num = o.mean_abs_diff(&select_samples(&fp[j], &[i])?)?;
            let den = o.mean_abs_diff(&select_samples(&fn_[j], &[i])?)?.add_scalar(eps);
            let term = num.div(&den)?.scale(tap_weights[j] / n as f64);
            total = Some(match total {
                Some(t) => t.add(&term)?,
                None => term,
            });
        }
    }
    Ok(total.expect("non-empty batch and at least one tap"))
}

/// `l_un + γ·l_cr`.
pub fn unsupervised_total(l_un: f64, l_cr: f64, gamma: f64) -> f64 {
    l_un + gamma * l_cr
}

/// `sup + λ·unsup`.
pub fn overall_loss(sup: f64, unsup: f64, lambda_t: f64) -> f64 {
    sup + lambda_t * unsup
}

/// `λ_max · exp(−5 (1 − t/T)²)` for epoch `t` in `0..=T`.
pub fn lambda_schedule(epoch: usize, w: &LossWeights) -> Result<f64> {
    if epoch > w.warmup_total {
        return Err(LossError::EpochOutOfRange { epoch, total: w.warmup_total });
    }
    let r = 1.0 - epoch as f64 / w.warmup_total as f64;
    Ok(w.lambda_max * (-5.0 * r * r).exp())
}

/// Picks samples `ids` (in order) out of an `[N, C, H, W]` batch.
pub fn select_samples<'g>(x: &Var<'g>, ids: &[usize]) -> Result<Var<'g>> {
    let shape = x.shape();
    let [n, c, h, w] = shape[..] else {
        return Err(LossError::ShapeMismatch(format!("expected a 4-d batch, got {shape:?}")));
    };
    if ids.is_empty() {
        return Err(LossError::ShapeMismatch("empty sample selection".into()));
    }
    if ids.len() == n && ids.iter().enumerate().all(|(i, j)| i == *j) {
        return Ok(*x);
    }
    let rows = x.reshape(vec![1, n, c * h * w])?.gather_rows(ids)?;
    Ok(rows.reshape(vec![ids.len(), c, h, w])?)
}
