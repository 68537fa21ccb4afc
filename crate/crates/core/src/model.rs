//! Named parameter collections and the network interface the trainer drives.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tidewater_autograd::{AutogradError, Graph, Tensor, Var};

use crate::checkpoint::{CheckpointError, Container};
use crate::imaging::{gradient_map, estimate_illumination, GradientMap, Image};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(String),
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Flat name → array map holding one network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub version: u32,
    params: BTreeMap<String, Tensor>,
}

impl Default for ModelWeights {
    fn default() -> Self {
        Self { version: 1, params: BTreeMap::new() }
    }
}

impl ModelWeights {
    pub fn new(params: BTreeMap<String, Tensor>) -> Self {
        Self { version: 1, params }
    }

    /// Fan-in scaled uniform initialization of every entry of `layout`, in layout order.
    pub fn initialize(layout: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for spec in layout {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                }
                Init::Zeros => vec![0.0; n],
            };
            params.insert(spec.name.clone(), Tensor::new(spec.shape.clone(), data).expect("layout shape"));
        }
        Self::new(params)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> BTreeSet<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }

    /// Same names and shapes as `other`.
    pub fn same_layout(&self, other: &ModelWeights) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape())
    }

    /// Registers every parameter in `graph`, trainable or frozen.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> BoundWeights<'g> {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable { graph.param(t.clone()) } else { graph.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        BoundWeights { vars, used: RefCell::new(BTreeSet::new()) }
    }

    pub fn to_container(&self, digest: &str) -> Container {
        let mut c = Container::new(digest);
        c.metadata.insert("weights_version".into(), self.version.to_string());
        for (k, t) in &self.params {
            c.arrays.insert(k.clone(), t.clone());
        }
        c
    }

    pub fn from_container(c: &Container, digest: &str) -> Result<Self> {
        c.expect_digest(digest)?;
        let version = c.meta("weights_version")?.parse().map_err(|_| {
            ModelError::Checkpoint(CheckpointError::Corrupt("weights_version is not an integer".into()))
        })?;
        Ok(Self { version, params: c.arrays.clone() })
    }

    pub fn save(&self, path: &Path, digest: &str) -> Result<()> {
        Ok(self.to_container(digest).write(path)?)
    }

    pub fn load(path: &Path, digest: &str) -> Result<Self> {
        Self::from_container(&Container::read(path)?, digest)
    }
}

/// Sum of element counts over all named parameters.
pub fn count_parameters(weights: &ModelWeights) -> usize {
    weights.params.values().map(Tensor::numel).sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Uniform { fan_in: usize },
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Accumulates the parameter layout of a network in a fixed order.
#[derive(Default)]
pub struct LayoutBuilder {
    pub specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        let fan_in = cin * k * k;
        self.specs.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![cout, cin, k, k],
            init: Init::Uniform { fan_in },
        });
        self.specs.push(ParamSpec { name: format!("{name}.bias"), shape: vec![cout], init: Init::Uniform { fan_in } });
    }

    pub fn zero_conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.specs.push(ParamSpec { name: format!("{name}.weight"), shape: vec![cout, cin, k, k], init: Init::Zeros });
        self.specs.push(ParamSpec { name: format!("{name}.bias"), shape: vec![cout], init: Init::Zeros });
    }
}

/// Parameters registered in a graph, with a record of which ones a forward pass read.
pub struct BoundWeights<'g> {
    vars: BTreeMap<String, Var<'g>>,
    used: RefCell<BTreeSet<String>>,
}

impl<'g> BoundWeights<'g> {
    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        let v = *self.vars.get(name).ok_or_else(|| ModelError::MissingParameter(name.to_string()))?;
        self.used.borrow_mut().insert(name.to_string());
        Ok(v)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var<'g>)> {
        self.vars.iter()
    }

    pub fn used(&self) -> BTreeSet<String> {
        self.used.borrow().clone()
    }

    /// Convolution with the `{name}.weight` / `{name}.bias` pair.
    pub fn conv(&self, x: &Var<'g>, name: &str, stride: usize, padding: usize, dilation: usize) -> Result<Var<'g>> {
        let w = self.get(&format!("{name}.weight"))?;
        let b = self.get(&format!("{name}.bias"))?;
        Ok(x.conv2d(&w, Some(&b), stride, padding, dilation)?)
    }
}

/// Inputs of one forward pass, all `[N, ·, H, W]`.
#[derive(Clone, Copy)]
pub struct NetInputs<'g> {
    pub image: Var<'g>,
    pub illumination: Var<'g>,
    pub gradient: Var<'g>,
}

impl<'g> NetInputs<'g> {
    /// Constant inputs for a batch of images, with the illumination and gradient priors.
    pub fn from_images(graph: &'g Graph, images: &[&Image]) -> Result<Self> {
        let image = Image::batch_tensor(images).map_err(|e| ModelError::ShapeMismatch(e.to_string()))?;
        let (h, w) = images[0].dims();
        let mut illum = Vec::with_capacity(images.len() * h * w);
        let mut grad = Vec::with_capacity(images.len() * h * w);
        for img in images {
            illum.extend(estimate_illumination(img).data);
            grad.extend(gradient_map(img).data);
        }
        let n = images.len();
        Ok(Self {
            image: graph.constant(image),
            illumination: graph.constant(Tensor::new(vec![n, 1, h, w], illum)?),
            gradient: graph.constant(Tensor::new(vec![n, 1, h, w], grad)?),
        })
    }
}

/// Restored image `[N, 3, H, W]` and gradient map `[N, 1, H, W]`, before clamping.
#[derive(Clone, Copy)]
pub struct NetOutput<'g> {
    pub restored: Var<'g>,
    pub gradient: Var<'g>,
}

/// Single-image forward result as plain arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub height: usize,
    pub width: usize,
    pub restored: Vec<f64>,
    pub gradient: Vec<f64>,
}

impl ModelOutput {
    pub fn restored_image(&self) -> Image {
        Image::from_clamped(self.height, self.width, self.restored.clone()).expect("output dimensions")
    }

    pub fn gradient_map(&self) -> GradientMap {
        GradientMap { height: self.height, width: self.width, data: self.gradient.clone() }
    }
}

/// A restoration network the trainer can optimize.
pub trait Network {
    /// Digest of the configuration; stored in checkpoints and checked on load.
    fn digest(&self) -> String;

    /// Input sides must be multiples of this value.
    fn size_multiple(&self) -> usize;

    fn layout(&self) -> Vec<ParamSpec>;

    fn build(&self, seed: u64) -> ModelWeights {
        ModelWeights::initialize(&self.layout(), seed)
    }

    fn forward<'g>(&self, weights: &BoundWeights<'g>, inputs: &NetInputs<'g>) -> Result<NetOutput<'g>>;

    /// Runs one image through the network without recording gradients.
    fn run(&self, weights: &ModelWeights, x: &Image) -> Result<ModelOutput> {
        let m = self.size_multiple();
        if x.height() % m != 0 || x.width() % m != 0 {
            return Err(ModelError::ShapeMismatch(format!(
                "{}x{} input is not a multiple of {m}",
                x.height(),
                x.width()
            )));
        }
        let g = Graph::new();
        let bound = weights.bind(&g, false);
        let inputs = NetInputs::from_images(&g, &[x])?;
        let out = self.forward(&bound, &inputs)?;
        Ok(ModelOutput {
            height: x.height(),
            width: x.width(),
            restored: (*out.restored.value()).clone().into_data(),
            gradient: (*out.gradient.value()).clone().into_data(),
        })
    }
}

/// Fails if any value of `v` is NaN or infinite.
pub fn ensure_finite(v: &Var<'_>, stage: &str) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(ModelError::NonFiniteActivation(stage.to_string()))
    }
}
