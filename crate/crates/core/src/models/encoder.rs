use ndarray::{Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BlockCache, ConvBlock};
use crate::nn::{global_avg_pool, global_avg_pool_backward, MaxPool2, Module, Param, PoolCache};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderVariant {
    UnetEncoder,
    TinyCnn,
}

impl EncoderVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            EncoderVariant::UnetEncoder => "unet-encoder",
            EncoderVariant::TinyCnn => "tiny-cnn",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub variant: EncoderVariant,
    pub input_size: usize,
    pub stage_channels: Vec<usize>,
}

impl EncoderSpec {
    pub fn tiny(input_size: usize) -> Self {
        Self {
            variant: EncoderVariant::TinyCnn,
            input_size,
            stage_channels: vec![8, 16, 32, 64],
        }
    }

    pub fn unet(input_size: usize) -> Self {
        Self {
            variant: EncoderVariant::UnetEncoder,
            input_size,
            stage_channels: vec![64, 128, 256, 512],
        }
    }

    /// Width of the globally pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        *self.stage_channels.last().expect("validated spec has stages")
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.stage_channels.len();
        if stages < 2 {
            return Err(Error::Config("encoder needs at least two stages".into()));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::Config("stage channels must be positive".into()));
        }
        let factor = 1usize << (stages - 1);
        if self.input_size == 0 || !self.input_size.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "input size {} is not divisible by {factor}",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// Contracting path: stage 0 runs at full resolution, each later stage
/// halves the resolution with 2x2 max pooling first.
#[derive(Debug, Clone)]
pub struct Encoder {
    spec: EncoderSpec,
    stages: Vec<ConvBlock>,
}

pub struct EncoderOutput {
    /// Globally average-pooled last stage, `(B, feature_dim)`.
    pub features: Array2<f32>,
    /// Output of every stage, finest first.
    pub skips: Vec<Array4<f32>>,
}

pub struct EncoderCache {
    stages: Vec<BlockCache>,
    pools: Vec<PoolCache>,
    last_hw: (usize, usize),
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(spec: EncoderSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut in_ch = 1;
        let stages = spec
            .stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let block = ConvBlock::new(&format!("encoder.stage{i}"), in_ch, c, rng);
                in_ch = c;
                block
            })
            .collect();
        Ok(Self { spec, stages })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        let s = self.spec.input_size;
        if c != 1 || h != s || w != s {
            return Err(Error::Shape(format!(
                "encoder expects (B, 1, {s}, {s}), got {:?}",
                x.dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array4<f32>) -> Result<EncoderOutput> {
        self.check_input(x)?;
        let mut skips: Vec<Array4<f32>> = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let input = match skips.last() {
                Some(prev) => MaxPool2.forward(prev),
                None => x.clone(),
            };
            debug_assert!(i == skips.len());
            skips.push(stage.forward(&input));
        }
        let features = global_avg_pool(skips.last().expect("at least two stages"));
        Ok(EncoderOutput { features, skips })
    }

    pub fn forward_cached(&self, x: &Array4<f32>) -> Result<(EncoderOutput, EncoderCache)> {
        self.check_input(x)?;
        let mut skips: Vec<Array4<f32>> = Vec::with_capacity(self.stages.len());
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        let mut pools = Vec::with_capacity(self.stages.len() - 1);
        for stage in &self.stages {
            let input = match skips.last() {
                Some(prev) => {
                    let (p, cache) = MaxPool2.forward_cached(prev);
                    pools.push(cache);
                    p
                }
                None => x.clone(),
            };
            let (y, cache) = stage.forward_cached(&input);
            stage_caches.push(cache);
            skips.push(y);
        }
        let last = skips.last().expect("at least two stages");
        let last_hw = (last.dim().2, last.dim().3);
        let features = global_avg_pool(last);
        Ok((
            EncoderOutput { features, skips },
            EncoderCache {
                stages: stage_caches,
                pools,
                last_hw,
            },
        ))
    }

    /// Accumulates parameter gradients from the pooled features and/or the
    /// stage outputs. Input gradients are not needed and not returned.
    pub fn backward(
        &mut self,
        cache: EncoderCache,
        d_features: Option<&Array2<f32>>,
        mut d_skips: Vec<Option<Array4<f32>>>,
    ) {
        d_skips.resize_with(self.stages.len(), || None);
        let mut carry: Option<Array4<f32>> =
            d_features.map(|d| global_avg_pool_backward(d, cache.last_hw.0, cache.last_hw.1));
        let mut stage_caches = cache.stages;
        let mut pools = cache.pools;
        for i in (0..self.stages.len()).rev() {
            let stage_cache = stage_caches.pop().expect("one cache per stage");
            let d_out = match (carry.take(), d_skips[i].take()) {
                (Some(a), Some(b)) => a + b,
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => continue,
            };
            let d_in = self.stages[i].backward(stage_cache, d_out);
            if i > 0 {
                let pool = pools.pop().expect("one pool per later stage");
                carry = Some(MaxPool2.backward(pool, &d_in));
            }
        }
    }
}

impl Module for Encoder {
    fn params(&self) -> Vec<&Param> {
        self.stages.iter().flat_map(|s| s.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.stages.iter_mut().flat_map(|s| s.params_mut()).collect()
    }
}
