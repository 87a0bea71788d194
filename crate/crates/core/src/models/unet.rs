use std::collections::BTreeSet;

use ndarray::Array4;
use rand::Rng;

use super::{BlockCache, Checkpoint, ConvBlock, Encoder, EncoderCache, EncoderSpec};
use crate::nn::{concat_channels, split_channels, Conv2d, ConvCache, ConvTranspose2x2, ConvTransposeCache, Module, Param};
use crate::{Error, Result};

/// U-Net: the [`Encoder`] contracting path, a transposed-conv expanding path
/// with skip concatenation, and a 1x1 classifier.
#[derive(Debug, Clone)]
pub struct UNet {
    pub encoder: Encoder,
    ups: Vec<ConvTranspose2x2>,
    blocks: Vec<ConvBlock>,
    classifier: Conv2d,
    num_classes: usize,
}

pub struct UNetCache {
    encoder: EncoderCache,
    levels: Vec<(ConvTransposeCache, BlockCache, usize)>,
    classifier: ConvCache,
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(spec: EncoderSpec, num_classes: usize, rng: &mut R) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let encoder = Encoder::new(spec, rng)?;
        let ch = encoder.spec().stage_channels.clone();
        let mut ups = Vec::new();
        let mut blocks = Vec::new();
        // decoder level i restores the resolution of encoder stage i
        for i in (0..ch.len() - 1).rev() {
            ups.push(ConvTranspose2x2::new(&format!("decoder.up{i}"), ch[i + 1], ch[i], rng));
            blocks.push(ConvBlock::new(&format!("decoder.block{i}"), 2 * ch[i], ch[i], rng));
        }
        let classifier = Conv2d::new("decoder.classifier", ch[0], num_classes, 1, rng);
        Ok(Self {
            encoder,
            ups,
            blocks,
            classifier,
            num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Class scores `(B, num_classes, S, S)`.
    pub fn forward(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        let out = self.encoder.forward(x)?;
        let n = out.skips.len();
        let mut h = out.skips[n - 1].clone();
        for (level, (up, block)) in self.ups.iter().zip(&self.blocks).enumerate() {
            let skip = &out.skips[n - 2 - level];
            h = block.forward(&concat_channels(&up.forward(&h), skip));
        }
        Ok(self.classifier.forward(&h))
    }

    pub fn forward_cached(&self, x: &Array4<f32>) -> Result<(Array4<f32>, UNetCache)> {
        let (out, encoder) = self.encoder.forward_cached(x)?;
        let n = out.skips.len();
        let mut h = out.skips[n - 1].clone();
        let mut levels = Vec::with_capacity(self.ups.len());
        for (level, (up, block)) in self.ups.iter().zip(&self.blocks).enumerate() {
            let skip = &out.skips[n - 2 - level];
            let (u, up_cache) = up.forward_cached(&h);
            let up_ch = u.dim().1;
            let (y, block_cache) = block.forward_cached(&concat_channels(&u, skip));
            levels.push((up_cache, block_cache, up_ch));
            h = y;
        }
        let (logits, classifier) = self.classifier.forward_cached(&h);
        Ok((
            logits,
            UNetCache {
                encoder,
                levels,
                classifier,
            },
        ))
    }

    pub fn backward(&mut self, cache: UNetCache, d_logits: &Array4<f32>) {
        let n = self.encoder.spec().stage_channels.len();
        let mut d_skips: Vec<Option<Array4<f32>>> = vec![None; n];
        let mut d = self.classifier.backward(cache.classifier, d_logits);
        let mut levels = cache.levels;
        for level in (0..self.ups.len()).rev() {
            let (up_cache, block_cache, up_ch) = levels.pop().expect("one cache per level");
            let d_cat = self.blocks[level].backward(block_cache, d);
            let (d_up, d_skip) = split_channels(&d_cat, up_ch);
            d_skips[n - 2 - level] = Some(d_skip);
            d = self.ups[level].backward(up_cache, &d_up);
        }
        d_skips[n - 1] = Some(d);
        self.encoder.backward(cache.encoder, None, d_skips);
    }
}

impl Module for UNet {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.encoder.params();
        for (u, b) in self.ups.iter().zip(&self.blocks) {
            p.extend(u.params());
            p.extend(b.params());
        }
        p.extend(self.classifier.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        for (u, b) in self.ups.iter_mut().zip(self.blocks.iter_mut()) {
            p.extend(u.params_mut());
            p.extend(b.params_mut());
        }
        p.extend(self.classifier.params_mut());
        p
    }
}

/// Which checkpoint arrays were loaded into the network.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TransferReport {
    pub copied: Vec<String>,
    /// Checkpoint arrays with no same-named, same-shaped network array.
    pub skipped: Vec<String>,
}

/// Copies encoder weights from a pretraining checkpoint into `net` by name
/// and shape. Projection-head, key-encoder and optimizer arrays are left
/// behind and the decoder keeps its fresh initialization.
pub fn transfer_encoder(ckpt: &Checkpoint, net: &mut UNet) -> Result<TransferReport> {
    let want = net.encoder.spec().variant;
    if ckpt.meta.encoder.variant != want {
        return Err(Error::Checkpoint(format!(
            "checkpoint encoder is {} but the network uses {}",
            ckpt.meta.encoder.variant.as_str(),
            want.as_str()
        )));
    }
    let mut report = TransferReport::default();
    let mut taken = BTreeSet::new();
    for p in net.encoder.params_mut() {
        if let Some(src) = ckpt.arrays.get(p.name()) {
            if src.shape() == p.value.shape() {
                p.value.assign(src);
                taken.insert(p.name().to_string());
            }
        }
    }
    for name in ckpt.arrays.keys() {
        if taken.contains(name) {
            report.copied.push(name.clone());
        } else {
            report.skipped.push(name.clone());
        }
    }
    if report.copied.is_empty() {
        return Err(Error::Checkpoint(
            "no encoder arrays match the network; wrong checkpoint or architecture".into(),
        ));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::EncoderVariant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn softmax_channel_sums(logits: &Array4<f32>) -> Vec<f32> {
        let (b, c, h, w) = logits.dim();
        let mut sums = vec![];
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let m = (0..c).map(|k| logits[[bi, k, y, x]]).fold(f32::MIN, f32::max);
                    let z: f32 = (0..c).map(|k| (logits[[bi, k, y, x]] - m).exp()).sum();
                    sums.push((0..c).map(|k| (logits[[bi, k, y, x]] - m).exp() / z).sum());
                }
            }
        }
        sums
    }

    #[test]
    fn output_shape_and_finiteness() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = UNet::new(EncoderSpec::tiny(64), 3, &mut rng).unwrap();
        let x = Array4::from_shape_fn((1, 1, 64, 64), |_| rng.random_range(-2.0f32..2.0));
        let y = net.forward(&x).unwrap();
        assert_eq!(y.dim(), (1, 3, 64, 64));
        assert!(y.iter().all(|v| v.is_finite()));
        assert!(softmax_channel_sums(&y).iter().all(|s| (s - 1.0).abs() < 1e-5));
    }

    #[test]
    fn cached_forward_matches_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = UNet::new(EncoderSpec::tiny(16), 3, &mut rng).unwrap();
        let x = Array4::from_shape_fn((2, 1, 16, 16), |_| rng.random_range(-1.0f32..1.0));
        assert_eq!(net.forward(&x).unwrap(), net.forward_cached(&x).unwrap().0);
    }

    // <dY, Y(params)> finite differences through skips and the decoder.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = EncoderSpec {
            variant: EncoderVariant::TinyCnn,
            input_size: 8,
            stage_channels: vec![2, 4],
        };
        let mut net = UNet::new(spec, 3, &mut rng).unwrap();
        let x = Array4::from_shape_fn((1, 1, 8, 8), |_| rng.random_range(-1.0f32..1.0));
        let dy = Array4::from_shape_fn((1, 3, 8, 8), |_| rng.random_range(-1.0f32..1.0));
        let (_, cache) = net.forward_cached(&x).unwrap();
        net.backward(cache, &dy);
        let objective = |n: &UNet| -> f64 {
            n.forward(&x).unwrap().iter().zip(dy.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let names: Vec<String> = net.params().iter().map(|p| p.name().to_string()).collect();
        for name in [
            "encoder.stage0.conv1.weight",
            "encoder.stage1.conv2.bias",
            "decoder.up0.weight",
            "decoder.block0.norm1.beta",
            "decoder.classifier.weight",
        ] {
            let idx = names.iter().position(|n| n == name).unwrap_or_else(|| panic!("{name}"));
            let analytic = *net.params()[idx].grad.iter().next().unwrap() as f64;
            let h = 1e-2f32;
            let mut plus = net.clone();
            *plus.params_mut()[idx].value.iter_mut().next().unwrap() += h;
            let mut minus = net.clone();
            *minus.params_mut()[idx].value.iter_mut().next().unwrap() -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h as f64);
            assert!((fd - analytic).abs() < 2e-2 * (1.0 + fd.abs()), "{name}: fd {fd} vs {analytic}");
        }
    }

    use rand::Rng;
}
