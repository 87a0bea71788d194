use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Encoder, EncoderCache, EncoderSpec};
use crate::nn::{Linear, LinearCache, Module, Param};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionSpec {
    /// Defaults to the encoder feature width when absent.
    pub hidden_dim: Option<usize>,
    pub output_dim: usize,
}

impl Default for ProjectionSpec {
    fn default() -> Self {
        Self {
            hidden_dim: None,
            output_dim: 128,
        }
    }
}

/// Two-layer MLP, `Linear -> ReLU -> Linear`.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    fc1: Linear,
    fc2: Linear,
}

pub struct HeadCache {
    fc1: LinearCache,
    hidden: Array2<f32>,
    fc2: LinearCache,
}

impl ProjectionHead {
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, spec: &ProjectionSpec, rng: &mut R) -> Result<Self> {
        let hidden = spec.hidden_dim.unwrap_or(feature_dim);
        if hidden == 0 || spec.output_dim == 0 {
            return Err(Error::Config("projection widths must be positive".into()));
        }
        Ok(Self {
            fc1: Linear::new("projection.fc1", feature_dim, hidden, rng),
            fc2: Linear::new("projection.fc2", hidden, spec.output_dim, rng),
        })
    }

    pub fn output_dim(&self) -> usize {
        self.fc2.out_dim()
    }

    /// Raw (unnormalized) projections.
    pub fn forward(&self, features: &Array2<f32>) -> Array2<f32> {
        self.fc2.forward(&self.fc1.forward(features).mapv_into(|v| v.max(0.0)))
    }

    /// Projections scaled to unit length.
    pub fn project(&self, features: &Array2<f32>) -> Array2<f32> {
        l2_normalize(self.forward(features))
    }

    pub fn forward_cached(&self, features: &Array2<f32>) -> (Array2<f32>, HeadCache) {
        let (h, fc1) = self.fc1.forward_cached(features);
        let hidden = h.mapv_into(|v| v.max(0.0));
        let (z, fc2) = self.fc2.forward_cached(&hidden);
        (z, HeadCache { fc1, hidden, fc2 })
    }

    pub fn backward(&mut self, cache: HeadCache, dz: &Array2<f32>) -> Array2<f32> {
        let mut dh = self.fc2.backward(cache.fc2, dz);
        dh.zip_mut_with(&cache.hidden, |d, &h| {
            if h <= 0.0 {
                *d = 0.0;
            }
        });
        self.fc1.backward(cache.fc1, &dh)
    }
}

impl Module for ProjectionHead {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.fc1.params_mut();
        p.extend(self.fc2.params_mut());
        p
    }
}

pub fn l2_normalize(mut z: Array2<f32>) -> Array2<f32> {
    for mut row in z.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt().max(1e-12);
        row /= n;
    }
    z
}

/// Encoder followed by the projection head, as used during pretraining.
#[derive(Debug, Clone)]
pub struct ContrastiveNet {
    pub encoder: Encoder,
    pub head: ProjectionHead,
}

pub struct ContrastiveNetCache {
    encoder: EncoderCache,
    head: HeadCache,
}

impl ContrastiveNet {
    pub fn new<R: Rng + ?Sized>(spec: EncoderSpec, projection: &ProjectionSpec, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::new(spec, rng)?;
        let head = ProjectionHead::new(encoder.spec().feature_dim(), projection, rng)?;
        Ok(Self { encoder, head })
    }

    /// Unit-norm projections for a batch of images.
    pub fn embed(&self, x: &Array4<f32>) -> Result<Array2<f32>> {
        Ok(self.head.project(&self.encoder.forward(x)?.features))
    }

    /// Raw projections plus the cache needed for [`ContrastiveNet::backward`].
    pub fn forward_cached(&self, x: &Array4<f32>) -> Result<(Array2<f32>, ContrastiveNetCache)> {
        let (out, encoder) = self.encoder.forward_cached(x)?;
        let (z, head) = self.head.forward_cached(&out.features);
        Ok((z, ContrastiveNetCache { encoder, head }))
    }

    pub fn backward(&mut self, cache: ContrastiveNetCache, dz: &Array2<f32>) {
        let d_features = self.head.backward(cache.head, dz);
        self.encoder.backward(cache.encoder, Some(&d_features), Vec::new());
    }
}

impl Module for ContrastiveNet {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.encoder.params();
        p.extend(self.head.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        p.extend(self.head.params_mut());
        p
    }
}
