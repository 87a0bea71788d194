use ndarray::Array4;
use rand::Rng;

use crate::nn::{relu, relu_backward, Conv2d, ConvCache, GroupNorm, Module, NormCache, Param};

/// `conv3x3 -> GroupNorm -> ReLU`, twice.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
}

pub struct BlockCache {
    conv1: ConvCache,
    norm1: NormCache,
    act1: Array4<f32>,
    conv2: ConvCache,
    norm2: NormCache,
    act2: Array4<f32>,
}

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(name: &str, in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        let groups = GroupNorm::default_groups(out_ch);
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), in_ch, out_ch, 3, rng),
            norm1: GroupNorm::new(&format!("{name}.norm1"), out_ch, groups),
            conv2: Conv2d::new(&format!("{name}.conv2"), out_ch, out_ch, 3, rng),
            norm2: GroupNorm::new(&format!("{name}.norm2"), out_ch, groups),
        }
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        let h = relu(self.norm1.forward(&self.conv1.forward(x)));
        relu(self.norm2.forward(&self.conv2.forward(&h)))
    }

    pub fn forward_cached(&self, x: &Array4<f32>) -> (Array4<f32>, BlockCache) {
        let (h, conv1) = self.conv1.forward_cached(x);
        let (h, norm1) = self.norm1.forward_cached(&h);
        let act1 = relu(h);
        let (h, conv2) = self.conv2.forward_cached(&act1);
        let (h, norm2) = self.norm2.forward_cached(&h);
        let act2 = relu(h);
        (
            act2.clone(),
            BlockCache {
                conv1,
                norm1,
                act1,
                conv2,
                norm2,
                act2,
            },
        )
    }

    pub fn backward(&mut self, cache: BlockCache, dy: Array4<f32>) -> Array4<f32> {
        let d = relu_backward(&cache.act2, dy);
        let d = self.norm2.backward(cache.norm2, &d);
        let d = self.conv2.backward(cache.conv2, &d);
        let d = relu_backward(&cache.act1, d);
        let d = self.norm1.backward(cache.norm1, &d);
        self.conv1.backward(cache.conv1, &d)
    }
}

impl Module for ConvBlock {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.conv1.params();
        p.extend(self.norm1.params());
        p.extend(self.conv2.params());
        p.extend(self.norm2.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv1.params_mut();
        p.extend(self.norm1.params_mut());
        p.extend(self.conv2.params_mut());
        p.extend(self.norm2.params_mut());
        p
    }
}
