//! Frozen convolutional feature extractors with named taps, used by the
//! perceptual and contrastive losses.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tidewater_autograd::{AutogradError, Graph, Tensor, Var};

use crate::checkpoint::{CheckpointError, Container};
use crate::imaging::Image;
use crate::model::{LayoutBuilder, ModelWeights};

/// Per-channel normalization applied inside [`FeatureExtractor::extract`].
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Tap weights of the contrastive profile, shallow to deep.
pub const CONTRASTIVE_TAP_WEIGHTS: [f64; 5] = [1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0];

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("input {height}x{width} is smaller than the {min}x{min} minimum")]
    InputTooSmall { height: usize, width: usize, min: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("tap weight {0} is negative")]
    NegativeWeight(f64),
    #[error("expected {expected} tap weights, got {got}")]
    TapCount { expected: usize, got: usize },
    #[error("pretrained weights do not match the extractor: {0}")]
    IncompatibleWeights(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 16-layer stack up to the third stage; taps relu1_2, relu2_2, relu3_3.
    Perceptual16,
    /// 19-layer stack up to the fifth stage; taps relu1_1 … relu5_1.
    Contrastive19,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Perceptual16 => "perceptual16",
            Profile::Contrastive19 => "contrastive19",
        }
    }
}

/// Where the frozen weights come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Source {
    PretrainedFile { path: std::path::PathBuf },
    SeededRandom { seed: u64 },
}

/// One stage of an extractor topology.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv { name: String, cin: usize, cout: usize },
    Relu,
    MaxPool,
    Tap(String),
}

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    layers: Vec<Layer>,
    tap_names: Vec<String>,
    weights: ModelWeights,
    min_size: usize,
    normalize: bool,
    digest: String,
}

impl FeatureExtractor {
    /// Builds a stock profile with the given base width (64 for the standard networks).
    pub fn new(profile: Profile, width: usize, source: &Source) -> Result<Self> {
        let layers = vgg_layers(profile, width);
        let digest = layout_digest(profile.name(), &layers);
        let weights = match source {
            Source::SeededRandom { seed } => ModelWeights::initialize(&conv_layout(&layers), *seed),
            Source::PretrainedFile { path } => {
                let c = Container::read(path)?;
                c.expect_digest(&digest)?;
                let w = ModelWeights::from_container(&c, &digest)
                    .map_err(|e| FeatureError::IncompatibleWeights(e.to_string()))?;
                let expected = ModelWeights::initialize(&conv_layout(&layers), 0);
                if !w.same_layout(&expected) {
                    return Err(FeatureError::IncompatibleWeights(format!("{} layer set differs", path.display())));
                }
                w
            }
        };
        Self::assemble(layers, weights, true, digest)
    }

    /// Arbitrary topology with explicit weights, for tests and experiments.
    pub fn custom(layers: Vec<Layer>, weights: ModelWeights, normalize: bool) -> Result<Self> {
        let digest = layout_digest("custom", &layers);
        let expected = ModelWeights::initialize(&conv_layout(&layers), 0);
        if !weights.same_layout(&expected) {
            return Err(FeatureError::IncompatibleWeights("weights do not match the layer list".into()));
        }
        Self::assemble(layers, weights, normalize, digest)
    }

    fn assemble(layers: Vec<Layer>, weights: ModelWeights, normalize: bool, digest: String) -> Result<Self> {
        let tap_names: Vec<String> = layers
            .iter()
            .filter_map(|l| if let Layer::Tap(n) = l { Some(n.clone()) } else { None })
            .collect();
        let pools_before_last_tap = layers
            .iter()
            .take(layers.iter().rposition(|l| matches!(l, Layer::Tap(_))).map_or(0, |i| i + 1))
            .filter(|l| matches!(l, Layer::MaxPool))
            .count();
        let min_size = (1usize << pools_before_last_tap).max(2) * 2;
        Ok(Self { layers, tap_names, weights, min_size, normalize, digest })
    }

    pub fn tap_names(&self) -> &[String] {
        &self.tap_names
    }

    pub fn min_size(&self) -> usize {
        self.min_size
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Writes the frozen weights in the container format accepted by [`Source::PretrainedFile`].
    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.weights.to_container(&self.digest).write(path)?)
    }

    /// Tap features of an `[N, 3, H, W]` input, in tap order. Differentiable
    /// with respect to `x`; the extractor weights enter as constants.
    pub fn extract<'g>(&self, x: &Var<'g>) -> Result<Vec<Var<'g>>> {
        let shape = x.shape();
        let (h, w) = match shape.as_slice() {
            &[_, 3, h, w] => (h, w),
            other => return Err(FeatureError::ShapeMismatch(format!("extractor input {other:?}"))),
        };
        if h < self.min_size || w < self.min_size {
            return Err(FeatureError::InputTooSmall { height: h, width: w, min: self.min_size });
        }
        let g: &'g Graph = x.graph();
        let mut cur = if self.normalize {
            let scale: Vec<f64> = IMAGENET_STD.iter().map(|s| 1.0 / s).collect();
            let shift: Vec<f64> = IMAGENET_MEAN.iter().zip(&IMAGENET_STD).map(|(m, s)| -m / s).collect();
            x.channel_affine(&scale, &shift)?
        } else {
            *x
        };
        let mut taps = Vec::with_capacity(self.tap_names.len());
        for layer in &self.layers {
            if taps.len() == self.tap_names.len() {
                break;
            }
            cur = match layer {
                Layer::Conv { name, .. } => {
                    let k = g.constant(self.weights.get(&format!("{name}.weight")).expect("layout").clone());
                    let b = g.constant(self.weights.get(&format!("{name}.bias")).expect("layout").clone());
                    cur.conv2d(&k, Some(&b), 1, 1, 1)?
                }
                Layer::Relu => cur.relu(),
                Layer::MaxPool => cur.max_pool2()?,
                Layer::Tap(_) => {
                    taps.push(cur);
                    cur
                }
            };
        }
        Ok(taps)
    }

    /// Tap features of one image as plain arrays keyed by tap name.
    pub fn extract_image(&self, x: &Image) -> Result<BTreeMap<String, Tensor>> {
        let g = Graph::new();
        let v = g.constant(x.to_tensor());
        let taps = self.extract(&v)?;
        Ok(self.tap_names.iter().cloned().zip(taps.iter().map(|t| (*t.value()).clone())).collect())
    }

    /// Per-tap mean absolute feature differences `d_j(a, b)`.
    pub fn tap_distances<'g>(&self, a: &Var<'g>, b: &Var<'g>) -> Result<Vec<Var<'g>>> {
        if a.shape() != b.shape() {
            return Err(FeatureError::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let fa = self.extract(a)?;
        let fb = self.extract(b)?;
        fa.iter().zip(&fb).map(|(p, q)| Ok(p.mean_abs_diff(q)?)).collect()
    }

    /// `Σ_j w_j · d_j(a, b)`.
    pub fn feature_distance<'g>(&self, a: &Var<'g>, b: &Var<'g>, tap_weights: &[f64]) -> Result<Var<'g>> {
        self.check_weights(tap_weights)?;
        let d = self.tap_distances(a, b)?;
        let mut total: Option<Var<'g>> = None;
        for (dj, wj) in d.iter().zip(tap_weights) {
            let term = dj.scale(*wj);
            total = Some(match total {
                Some(t) => t.add(&term)?,
                None => term,
            });
        }
        Ok(total.unwrap_or_else(|| a.graph().constant(Tensor::scalar(0.0))))
    }

    pub fn check_weights(&self, tap_weights: &[f64]) -> Result<()> {
        if tap_weights.len() != self.tap_names.len() {
            return Err(FeatureError::TapCount { expected: self.tap_names.len(), got: tap_weights.len() });
        }
        if let Some(w) = tap_weights.iter().find(|w| !(**w >= 0.0)) {
            return Err(FeatureError::NegativeWeight(*w));
        }
        Ok(())
    }
}

/// Plain-valued feature distance between two images.
pub fn image_feature_distance(fx: &FeatureExtractor, a: &Image, b: &Image, tap_weights: &[f64]) -> Result<f64> {
    let g = Graph::new();
    let d = fx.feature_distance(&g.constant(a.to_tensor()), &g.constant(b.to_tensor()), tap_weights)?;
    let v = d.value().item();
    Ok(v)
}

fn vgg_layers(profile: Profile, width: usize) -> Vec<Layer> {
    let (stages, taps): (&[usize], &[(usize, usize)]) = match profile {
        Profile::Perceptual16 => (&[2, 2, 3], &[(1, 2), (2, 2), (3, 3)]),
        Profile::Contrastive19 => (&[2, 2, 4, 4, 4], &[(1, 1), (2, 1), (3, 1), (4, 1), (5, 1)]),
    };
    let widths = [width, 2 * width, 4 * width, 8 * width, 8 * width];
    let mut layers = Vec::new();
    let mut cin = 3;
    for (s, &convs) in stages.iter().enumerate() {
        if s > 0 {
            layers.push(Layer::MaxPool);
        }
        for k in 1..=convs {
            let name = format!("conv{}_{k}", s + 1);
            layers.push(Layer::Conv { name, cin, cout: widths[s] });
            layers.push(Layer::Relu);
            cin = widths[s];
            if taps.contains(&(s + 1, k)) {
                layers.push(Layer::Tap(format!("relu{}_{k}", s + 1)));
            }
        }
    }
    // Layers past the deepest tap never run.
    let last = layers.iter().rposition(|l| matches!(l, Layer::Tap(_))).expect("taps");
    layers.truncate(last + 1);
    layers
}

fn conv_layout(layers: &[Layer]) -> Vec<crate::model::ParamSpec> {
    let mut b = LayoutBuilder::default();
    for l in layers {
        if let Layer::Conv { name, cin, cout } = l {
            b.conv(name, *cin, *cout, 3);
        }
    }
    b.specs
}

fn layout_digest(kind: &str, layers: &[Layer]) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    for l in layers {
        h.update(format!("{l:?};").as_bytes());
    }
    hex::encode(h.finalize())
}
