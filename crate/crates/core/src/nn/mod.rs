//! Minimal CPU layers with explicit backward passes.
//!
//! Every layer exposes a pure `forward` for inference and a
//! `forward_cached`/`backward` pair for training. Gradients accumulate into
//! the layer's [`Param`]s until [`Module::zero_grad`] is called.

mod conv;
mod layers;
mod norm;

pub use conv::{Conv2d, ConvCache, ConvTranspose2x2, ConvTransposeCache};
pub use layers::{
    concat_channels, global_avg_pool, global_avg_pool_backward, relu, relu_backward,
    split_channels, Linear, LinearCache, MaxPool2, PoolCache,
};
pub use norm::{GroupNorm, NormCache};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

/// A named trainable array together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    name: String,
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f32>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], v: f32) -> Self {
        Self::new(name, ArrayD::from_elem(IxDyn(shape), v))
    }

    /// Fan-in scaled uniform init, `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn fan_in_uniform<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / fan_in as f32).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let n = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| dist.sample(rng)).collect();
        Self::new(
            name,
            ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches length"),
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that owns named parameters.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

/// Name of the weight-initialization scheme, recorded in checkpoints.
pub const INIT_SCHEME: &str = "fan-in-uniform(sqrt(6/fan_in)), zero bias, unit norm gain";
