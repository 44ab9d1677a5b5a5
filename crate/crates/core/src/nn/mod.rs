//! Network layers with explicit forward and backward passes.
//!
//! There is no tape. Each [`Layer`] returns a cache from `forward` and turns
//! an upstream gradient plus that cache into the input gradient, adding its
//! parameter gradients into [`Param::grad`]. Correctness of every backward is
//! established against central finite differences in [`gradcheck`].

pub mod attention;
pub mod block;
pub mod conv;
pub mod ffn;
pub mod gradcheck;
pub mod norm;

pub use attention::Mhca;
pub use block::{Block, BlockKind, ConvBlock, Stage, TransformerLayer};
pub use conv::{Conv2d, DepthwiseConv3x3, DownsampleLearned, Pointwise, UpsampleLearned};
pub use ffn::{Gelu, Loffn};
pub use norm::LayerNormChannel;

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// A trainable array and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn cast<U: Real>(&self) -> Param<U> {
        Param {
            value: self.value.cast(),
            grad: self.grad.cast(),
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{}.{}", prefix, name)
    }
}

/// Anything that owns named parameters.
///
/// Visit order is fixed by construction and is the order parameters appear
/// in checkpoints and in the optimizer.
pub trait Module<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.value.len());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        self.visit("", &mut |name, _| v.push(name.to_string()));
        v
    }
}

pub trait Layer<T: Real>: Module<T> {
    type Cache;

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Self::Cache)>;

    /// Returns the input gradient and accumulates parameter gradients.
    fn backward(&mut self, cache: &Self::Cache, grad_out: &Tensor<T>) -> Result<Tensor<T>>;

    /// Forward pass discarding the cache.
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(x).map(|(y, _)| y)
    }
}

/// `U(-1/√fan_in, 1/√fan_in)`.
pub fn init_fan_in<T: Real>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    rng.uniform_tensor(shape, -bound, bound)
}

/// Adds `N(0, std²)` noise to every parameter. Used to move layers away from
/// identity-style initializations before gradient checks.
pub fn perturb<T: Real, M: Module<T> + ?Sized>(module: &mut M, rng: &mut Rng, std: f64) {
    module.visit_mut("", &mut |_, p| {
        for v in p.value.data_mut() {
            *v += T::of(std * rng.normal());
        }
    });
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}
