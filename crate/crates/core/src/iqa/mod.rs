//! No-reference quality scorers behind one interface and the blend-path
//! monotonicity analysis used to choose the bank's scorer.

mod external;
mod reliability;
mod uciqe;
mod uiqm;

pub use external::{ExternalScorer, DEFAULT_TIMEOUT};
pub use reliability::{
    default_alpha_grid, monotonicity_reliability, monotonicity_reliability_with, ReliabilityReport,
};
pub use uciqe::{uciqe, uciqe_components, UciqeComponents};
pub use uiqm::{uiqm, uiqm_components, UiqmComponents, UIQM_BLOCK};

use std::time::Duration;

use crate::imaging::Image;

#[derive(Debug, thiserror::Error)]
pub enum IqaError {
    #[error("external scorer failed: {0}")]
    ProcessFailure(String),
    #[error("cannot parse a score from {0:?}")]
    UnparseableScore(String),
    #[error("external scorer timed out after {0:?}")]
    Timeout(Duration),
    #[error("command template lacks the {{input}} placeholder")]
    MissingPlaceholder,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid alpha grid: {0}")]
    InvalidAlphaGrid(String),
    #[error("unknown scorer {0:?}")]
    UnknownScorer(String),
    #[error("non-finite score from {0}")]
    NonFinite(String),
    #[error("malformed report: {0}")]
    MalformedReport(String),
    #[error(transparent)]
    Imaging(#[from] crate::imaging::ImagingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, IqaError>;

/// Image quality score, higher is better.
pub trait QualityScorer: Send + Sync {
    fn name(&self) -> &str;

    /// Repeated scoring of the same image is bit-identical.
    fn deterministic(&self) -> bool;

    fn score(&self, x: &Image) -> Result<f64>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Uiqm;

impl QualityScorer for Uiqm {
    fn name(&self) -> &str {
        "uiqm"
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn score(&self, x: &Image) -> Result<f64> {
        Ok(uiqm(x))
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Uciqe;

impl QualityScorer for Uciqe {
    fn name(&self) -> &str {
        "uciqe"
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn score(&self, x: &Image) -> Result<f64> {
        Ok(uciqe(x))
    }
}

/// Scorer backed by a closure.
pub struct FnScorer<F> {
    name: String,
    deterministic: bool,
    f: F,
}

impl<F: Fn(&Image) -> Result<f64> + Send + Sync> FnScorer<F> {
    pub fn new(name: impl Into<String>, deterministic: bool, f: F) -> Self {
        Self { name: name.into(), deterministic, f }
    }
}

impl<F: Fn(&Image) -> Result<f64> + Send + Sync> QualityScorer for FnScorer<F> {
    fn name(&self) -> &str {
        &self.name
    }

    fn deterministic(&self) -> bool {
        self.deterministic
    }

    fn score(&self, x: &Image) -> Result<f64> {
        (self.f)(x)
    }
}

/// Resolves `uiqm`, `uciqe`, or `external:<command template>`.
pub fn scorer_by_name(spec: &str, timeout: Duration) -> Result<Box<dyn QualityScorer>> {
    match spec {
        "uiqm" => Ok(Box::new(Uiqm)),
        "uciqe" => Ok(Box::new(Uciqe)),
        other => match other.strip_prefix("external:") {
            Some(cmd) => Ok(Box::new(ExternalScorer::new("external", cmd, timeout)?)),
            None => Err(IqaError::UnknownScorer(other.to_string())),
        },
    }
}
