use ndarray::{s, Array2, Array4, Axis};
use rand::Rng;

use super::{Module, Param};

pub fn relu(x: Array4<f32>) -> Array4<f32> {
    x.mapv_into(|v| v.max(0.0))
}

/// Gradient of ReLU given its output.
pub fn relu_backward(y: &Array4<f32>, dy: Array4<f32>) -> Array4<f32> {
    let mut dx = dy;
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// 2x2 max pooling with stride 2.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaxPool2;

pub struct PoolCache {
    argmax: Vec<u8>,
    in_shape: (usize, usize, usize, usize),
}

impl MaxPool2 {
    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array4<f32>) -> (Array4<f32>, PoolCache) {
        let (b, c, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even spatial size");
        let (oh, ow) = (h / 2, w / 2);
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let mut out = vec![0f32; b * c * oh * ow];
        let mut argmax = vec![0u8; out.len()];
        for plane in 0..b * c {
            let src = &xs[plane * h * w..(plane + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let o = plane * oh * ow + i * ow + j;
                    let mut best = f32::NEG_INFINITY;
                    let mut arg = 0u8;
                    for (t, (di, dj)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                        let v = src[(2 * i + di) * w + 2 * j + dj];
                        if v > best {
                            best = v;
                            arg = t as u8;
                        }
                    }
                    out[o] = best;
                    argmax[o] = arg;
                }
            }
        }
        (
            Array4::from_shape_vec((b, c, oh, ow), out).expect("shape"),
            PoolCache {
                argmax,
                in_shape: (b, c, h, w),
            },
        )
    }

    pub fn backward(&self, cache: PoolCache, dy: &Array4<f32>) -> Array4<f32> {
        let (b, c, h, w) = cache.in_shape;
        let (oh, ow) = (h / 2, w / 2);
        let dys = dy.as_standard_layout();
        let dys = dys.as_slice().expect("standard layout");
        let mut dx = vec![0f32; b * c * h * w];
        for plane in 0..b * c {
            for i in 0..oh {
                for j in 0..ow {
                    let o = plane * oh * ow + i * ow + j;
                    let t = cache.argmax[o] as usize;
                    let (di, dj) = (t / 2, t % 2);
                    dx[plane * h * w + (2 * i + di) * w + 2 * j + dj] += dys[o];
                }
            }
        }
        Array4::from_shape_vec((b, c, h, w), dx).expect("shape")
    }
}

/// Mean over the spatial axes: `(B, C, H, W)` to `(B, C)`.
pub fn global_avg_pool(x: &Array4<f32>) -> Array2<f32> {
    let (b, c, h, w) = x.dim();
    let flat = x
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((b, c, h * w))
        .expect("contiguous");
    flat.mean_axis(Axis(2)).expect("non-empty spatial axis")
}

pub fn global_avg_pool_backward(dy: &Array2<f32>, h: usize, w: usize) -> Array4<f32> {
    let (b, c) = dy.dim();
    let scale = 1.0 / (h * w) as f32;
    Array4::from_shape_fn((b, c, h, w), |(bi, ci, _, _)| dy[[bi, ci]] * scale)
}

pub fn concat_channels(a: &Array4<f32>, b: &Array4<f32>) -> Array4<f32> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("matching spatial dims")
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels(d: &Array4<f32>, first: usize) -> (Array4<f32>, Array4<f32>) {
    (
        d.slice(s![.., ..first, .., ..]).to_owned(),
        d.slice(s![.., first.., .., ..]).to_owned(),
    )
}

/// Fully connected layer, `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Param,
    bias: Param,
    in_dim: usize,
    out_dim: usize,
}

pub struct LinearCache {
    x: Array2<f32>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::fan_in_uniform(format!("{name}.weight"), &[out_dim, in_dim], in_dim, rng),
            bias: Param::zeros(format!("{name}.bias"), &[out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn weight_matrix(&self) -> ndarray::ArrayView2<'_, f32> {
        self.weight
            .value
            .view()
            .into_dimensionality()
            .expect("2-d weight")
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        assert_eq!(x.ncols(), self.in_dim, "linear input width");
        let bias = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().expect("1-d");
        x.dot(&self.weight_matrix().t()) + bias
    }

    pub fn forward_cached(&self, x: &Array2<f32>) -> (Array2<f32>, LinearCache) {
        (self.forward(x), LinearCache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: LinearCache, dy: &Array2<f32>) -> Array2<f32> {
        let dw = dy.t().dot(&cache.x);
        let mut wg = self.weight.grad.view_mut().into_dimensionality::<ndarray::Ix2>().expect("2-d");
        wg += &dw;
        let mut bg = self.bias.grad.view_mut().into_dimensionality::<ndarray::Ix1>().expect("1-d");
        bg += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight_matrix())
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Array4::from_shape_vec((1, 1, 2, 4), vec![1., 5., 2., 0., 3., 4., 9., 1.]).unwrap();
        let (y, cache) = MaxPool2.forward_cached(&x);
        assert_eq!(y.as_slice().unwrap(), &[5., 9.]);
        let dx = MaxPool2.backward(cache, &Array4::from_elem((1, 1, 1, 2), 1.0));
        assert_eq!(dx.as_slice().unwrap(), &[0., 1., 0., 0., 0., 0., 1., 0.]);
    }

    #[test]
    fn gap_backward_spreads_evenly() {
        let x = Array4::from_shape_fn((2, 3, 2, 2), |(b, c, i, j)| (b + c + i + j) as f32);
        let y = global_avg_pool(&x);
        assert_eq!(y[[1, 2]], 4.0);
        let dx = global_avg_pool_backward(&Array2::ones((2, 3)), 2, 2);
        assert!(dx.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn split_undoes_concat() {
        let a = Array4::from_elem((1, 2, 2, 2), 1.0f32);
        let b = Array4::from_elem((1, 3, 2, 2), 2.0f32);
        let (da, db) = split_channels(&concat_channels(&a, &b), 2);
        assert_eq!(da, a);
        assert_eq!(db, b);
    }
}
