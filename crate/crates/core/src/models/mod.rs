//! Separation networks behind a common trait, a name-keyed registry, and
//! introspection (parameter count, receptive field).

mod checkpoint;
mod receptive;
mod tasnet;
mod unet;

use std::collections::BTreeMap;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tasnet_autodiff::{Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint_header, save_checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use receptive::{empirical_receptive_field, Node, ReceptiveField, RfReport, Topology};
pub use tasnet::REFERENCE_RF as TASNET_REFERENCE_RF;
pub use unet::{DEFAULT_LAYERS as UNET_DEFAULT_LAYERS, REFERENCE_RF as UNET_REFERENCE_RF};
pub use tasnet::{EncoderMode, NormChoice, TasNet, TasNetConfig};
pub use unet::{UNet, UNetConfig};

/// Named parameter tensors in a fixed insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Model(format!("duplicate parameter {name:?}")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    /// Uniform in `+-sqrt(1 / fan_in)`.
    pub fn insert_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        let a = (1.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-a..a) as f32).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert_full(&mut self, name: impl Into<String>, shape: &[usize], value: f32) -> Result<()> {
        self.insert(name, Tensor::full(shape, value))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Model(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Model(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }
}

/// Parameters placed on a graph as leaves.
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn new<F: Scalar>(g: &mut Graph<F>, store: &ParamStore, trainable: bool) -> Self {
        let vars = store
            .iter()
            .map(|(name, t)| (name.to_string(), g.leaf(t.cast::<F>(), trainable)))
            .collect();
        Self { vars }
    }

    /// Pairs existing graph vars with the store's parameter names, in order.
    pub fn from_vars(store: &ParamStore, vars: &[Var]) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::Model(format!("{} vars for {} parameters", vars.len(), store.len())));
        }
        let vars = store.iter().zip(vars).map(|((name, _), &v)| (name.to_string(), v)).collect();
        Ok(Self { vars })
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Model(format!("parameter {name:?} not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Per-call switches for a forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Replace every estimated mask by this constant (masking models only).
    pub mask_override: Option<f32>,
    /// Base seed for dropout masks; only used when the graph is in training mode.
    pub dropout_seed: u64,
}

/// A network mapping a `[1, T]` mixture to `num_outputs()` signals of `[1, T]`.
pub trait SeparationModel: Send + Sync {
    fn kind(&self) -> &'static str;

    /// Architecture settings as written to checkpoints.
    fn config(&self) -> serde_json::Value;

    fn num_outputs(&self) -> usize;

    fn min_input_len(&self) -> usize;

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    fn forward_f32(&self, g: &mut Graph<f32>, p: &Bound, y: Var, opts: &ForwardOptions) -> Result<Vec<Var>>;

    fn forward_f64(&self, g: &mut Graph<f64>, p: &Bound, y: Var, opts: &ForwardOptions) -> Result<Vec<Var>>;

    /// Layer graph used for the analytic receptive field.
    fn topology(&self) -> Topology;

    /// Receptive field quoted for the published configuration, if this
    /// instance uses it.
    fn reference_receptive_field(&self) -> Option<usize> {
        None
    }

    /// Text explaining the analytic receptive field.
    fn rf_derivation(&self) -> String {
        String::new()
    }

    /// Inner-domain representation `[channels, frames]` of `y`, for models
    /// that have one.
    fn encode(&self, _y: &[f32]) -> Result<Tensor<f32>> {
        Err(Error::Model(format!("{} has no learned inner domain", self.kind())))
    }

    fn param_count(&self) -> usize {
        self.params().count()
    }
}

/// Forward pass without gradients, returning one signal per output.
pub fn infer(model: &dyn SeparationModel, y: &[f64], opts: &ForwardOptions) -> Result<Vec<Vec<f64>>> {
    if y.len() < model.min_input_len() {
        return Err(Error::Model(format!(
            "input of {} samples is shorter than the minimum {}",
            y.len(),
            model.min_input_len()
        )));
    }
    let mut g = Graph::<f32>::inference();
    let p = Bound::new(&mut g, model.params(), false);
    let x = g.constant(Tensor::signal(y.iter().map(|&v| v as f32).collect()));
    let outs = model.forward_f32(&mut g, &p, x, opts)?;
    Ok(outs
        .into_iter()
        .map(|o| g.value(o).data().iter().map(|&v| v as f64).collect())
        .collect())
}

pub type ModelFactory = fn(&serde_json::Value, u64) -> Result<Box<dyn SeparationModel>>;

/// Model constructors by kind name.
pub struct ModelRegistry {
    factories: BTreeMap<&'static str, ModelFactory>,
}

impl ModelRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn standard() -> Self {
        let mut r = Self::empty();
        r.register(TasNet::KIND, |cfg, seed| Ok(Box::new(TasNet::new(TasNetConfig::from_json(cfg)?, seed)?)));
        r.register(UNet::KIND, |cfg, seed| Ok(Box::new(UNet::new(UNetConfig::from_json(cfg)?, seed)?)));
        r
    }

    pub fn register(&mut self, kind: &'static str, factory: ModelFactory) {
        self.factories.insert(kind, factory);
    }

    pub fn kinds(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn build(&self, kind: &str, config: &serde_json::Value, seed: u64) -> Result<Box<dyn SeparationModel>> {
        let f = self.factories.get(kind).ok_or_else(|| {
            Error::Config(format!("unknown model kind {kind:?} (known: {})", self.kinds().join(", ")))
        })?;
        f(config, seed)
    }
}

/// Releases `v` on inference graphs; a no-op when gradients are recorded.
pub(crate) fn drop_value<F: Scalar>(g: &mut Graph<F>, v: Var) {
    g.release(v);
}
