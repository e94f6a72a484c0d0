//! Gaze encoders, the patch-transformer image encoder, and the fusion head.

mod classifier;
mod dsge;
mod encoder;
mod fusion;
mod vit;

pub use classifier::{argmax, Features, FusionKind, GazeClassifier, GazeEncoderKind, ModelConfig};
pub use dsge::{DsgeConfig, DsgeParams, MlpGazeParams};
pub use encoder::EncoderLayer;
pub use fusion::{ClassifierParams, CrossAttentionParams, FusionParams};
pub use vit::{patchify, VitConfig, VitParams};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nd::{Graph, ParamId, ParamStore, Tensor, Var};

/// Standard deviation of the normal weight initialization.
pub const INIT_STD: f64 = 0.02;

/// LayerNorm epsilon used throughout.
pub const LN_EPS: f64 = 1e-5;

/// One forward pass over a bound [`ParamStore`].
///
/// Owns the graph being recorded, the per-parameter graph leaves, the
/// train/eval switch, and the RNG that drives dropout masks.
pub struct Forward<'p> {
    pub graph: Graph<'p>,
    vars: Vec<Var>,
    training: bool,
    rng: ChaCha8Rng,
    attention: Option<Vec<Var>>,
}

impl<'p> Forward<'p> {
    /// Evaluation pass: dropout off, no parameter takes a gradient.
    pub fn eval(store: &'p ParamStore) -> Self {
        let mut graph = Graph::new();
        let vars = store.tensors().iter().map(|t| graph.frozen(t)).collect();
        Forward {
            graph,
            vars,
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            attention: None,
        }
    }

    /// Training pass: dropout on, parameters accepted by `trainable` take gradients.
    pub fn train(store: &'p ParamStore, seed: u64, trainable: impl Fn(&str) -> bool) -> Self {
        let mut graph = Graph::new();
        let vars = store
            .iter()
            .map(|(name, t)| {
                if trainable(name) {
                    graph.param(t)
                } else {
                    graph.frozen(t)
                }
            })
            .collect();
        Forward {
            graph,
            vars,
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            attention: None,
        }
    }

    /// Wraps an existing graph whose leaves `vars` stand for the store's
    /// parameters in registration order.
    pub fn from_parts(graph: Graph<'p>, vars: Vec<Var>, training: bool, seed: u64) -> Self {
        Forward {
            graph,
            vars,
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            attention: None,
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        self.graph.dropout(x, rate, self.training, &mut self.rng)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    /// Starts collecting every attention matrix produced from here on.
    pub fn record_attention(&mut self) {
        self.attention = Some(Vec::new());
    }

    pub fn attention_maps(&self) -> &[Var] {
        self.attention.as_deref().unwrap_or(&[])
    }

    pub(crate) fn note_attention(&mut self, a: Var) {
        if let Some(maps) = &mut self.attention {
            maps.push(a);
        }
    }

    /// `x · Wᵀ + b` with `W` stored `out × in`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let (w, b) = (self.p(w), self.p(b));
        let y = self.graph.matmul_t(x, w)?;
        self.graph.add_bias(y, b)
    }
}

/// Parameter initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Weights `N(0, INIT_STD²)`, biases 0. Used by the image encoder and
    /// the classifier head, which must start near zero.
    Normal,
    /// Weights and biases `U(−1/√fan_in, 1/√fan_in)`, the usual default for
    /// freshly added linear layers. Used by the gaze encoders, the
    /// cross-attention block and the fusion layer.
    FanIn,
}

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Weight of shape `[out, in]` (or a vector, treated as `fan_in = 1`
/// under [`Init::FanIn`]).
pub(crate) fn weight<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: String,
    shape: &[usize],
    init: Init,
    rng: &mut R,
) -> Result<ParamId> {
    let t = match init {
        Init::Normal => Tensor::randn(shape, INIT_STD, rng),
        Init::FanIn => uniform(shape, fan_in_bound(shape.get(1).copied().unwrap_or(1)), rng),
    };
    store.add(name, t)
}

/// Bias of length `len` for a layer with `fan_in` inputs.
pub(crate) fn bias<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: String,
    len: usize,
    fan_in: usize,
    init: Init,
    rng: &mut R,
) -> Result<ParamId> {
    let t = match init {
        Init::Normal => Tensor::zeros(&[len]),
        Init::FanIn => uniform(&[len], fan_in_bound(fan_in), rng),
    };
    store.add(name, t)
}

pub(crate) fn zeros(store: &mut ParamStore, name: String, shape: &[usize]) -> Result<ParamId> {
    store.add(name, Tensor::zeros(shape))
}

pub(crate) fn ones(store: &mut ParamStore, name: String, shape: &[usize]) -> Result<ParamId> {
    store.add(name, Tensor::ones(shape))
}
