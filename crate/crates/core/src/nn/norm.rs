use ndarray::Array4;

use super::{Module, Param};

/// Group normalization over `(C / groups) * H * W` elements per sample.
///
/// Statistics are per sample, so training and inference behave identically
/// and outputs do not depend on batch composition.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Param,
    beta: Param,
    groups: usize,
    channels: usize,
    eps: f32,
}

pub struct NormCache {
    xhat: Array4<f32>,
    inv_std: Vec<f32>,
}

impl GroupNorm {
    pub fn new(name: &str, channels: usize, groups: usize) -> Self {
        assert!(groups > 0 && channels.is_multiple_of(groups), "groups must divide channels");
        Self {
            gamma: Param::filled(format!("{name}.gamma"), &[channels], 1.0),
            beta: Param::zeros(format!("{name}.beta"), &[channels]),
            groups,
            channels,
            eps: 1e-5,
        }
    }

    /// Largest of 8, 4, 2, 1 dividing `channels`.
    pub fn default_groups(channels: usize) -> usize {
        [8, 4, 2, 1]
            .into_iter()
            .find(|g| channels.is_multiple_of(*g))
            .unwrap_or(1)
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array4<f32>) -> (Array4<f32>, NormCache) {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "norm channels");
        let cg = c / self.groups;
        let hw = h * w;
        let n = cg * hw;
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let gamma = self.gamma.value.as_slice().expect("contiguous");
        let beta = self.beta.value.as_slice().expect("contiguous");
        let mut xhat = vec![0f32; xs.len()];
        let mut y = vec![0f32; xs.len()];
        let mut inv_std = Vec::with_capacity(b * self.groups);
        for bi in 0..b {
            for g in 0..self.groups {
                let start = (bi * c + g * cg) * hw;
                let seg = &xs[start..start + n];
                let mean = seg.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
                let var = seg
                    .iter()
                    .map(|&v| {
                        let d = v as f64 - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / n as f64;
                let istd = (1.0 / (var + self.eps as f64).sqrt()) as f32;
                let mean = mean as f32;
                inv_std.push(istd);
                for (i, &v) in seg.iter().enumerate() {
                    let ch = g * cg + i / hw;
                    let xh = (v - mean) * istd;
                    xhat[start + i] = xh;
                    y[start + i] = gamma[ch] * xh + beta[ch];
                }
            }
        }
        let shape = (b, c, h, w);
        (
            Array4::from_shape_vec(shape, y).expect("shape"),
            NormCache {
                xhat: Array4::from_shape_vec(shape, xhat).expect("shape"),
                inv_std,
            },
        )
    }

    pub fn backward(&mut self, cache: NormCache, dy: &Array4<f32>) -> Array4<f32> {
        let (b, c, h, w) = dy.dim();
        let cg = c / self.groups;
        let hw = h * w;
        let n = cg * hw;
        let dys = dy.as_standard_layout();
        let dys = dys.as_slice().expect("standard layout");
        let xh = cache.xhat.as_slice().expect("standard layout");
        let gamma = self.gamma.value.as_slice().expect("contiguous");
        let mut dgamma = vec![0f64; c];
        let mut dbeta = vec![0f64; c];
        let mut dx = vec![0f32; dys.len()];
        let mut dxhat = vec![0f32; n];
        for bi in 0..b {
            for g in 0..self.groups {
                let start = (bi * c + g * cg) * hw;
                let mut m1 = 0f64;
                let mut m2 = 0f64;
                for i in 0..n {
                    let ch = g * cg + i / hw;
                    let d = dys[start + i];
                    let x = xh[start + i];
                    dgamma[ch] += (d * x) as f64;
                    dbeta[ch] += d as f64;
                    let dh = d * gamma[ch];
                    dxhat[i] = dh;
                    m1 += dh as f64;
                    m2 += (dh * x) as f64;
                }
                let m1 = (m1 / n as f64) as f32;
                let m2 = (m2 / n as f64) as f32;
                let istd = cache.inv_std[bi * self.groups + g];
                for i in 0..n {
                    dx[start + i] = istd * (dxhat[i] - m1 - xh[start + i] * m2);
                }
            }
        }
        for (gv, d) in self.gamma.grad.iter_mut().zip(dgamma) {
            *gv += d as f32;
        }
        for (bv, d) in self.beta.grad.iter_mut().zip(dbeta) {
            *bv += d as f32;
        }
        Array4::from_shape_vec((b, c, h, w), dx).expect("shape")
    }
}

impl Module for GroupNorm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}
