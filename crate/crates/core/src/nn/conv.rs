use ndarray::{s, Array2, Array4, ArrayView2, Axis, Ix2};
use rand::Rng;

use super::{Module, Param};

/// Same-padded stride-1 convolution with an odd square kernel.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Param,
    bias: Param,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
}

pub struct ConvCache {
    cols: Array2<f32>,
    in_shape: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = in_ch * kernel * kernel;
        Self {
            weight: Param::fan_in_uniform(
                format!("{name}.weight"),
                &[out_ch, in_ch, kernel, kernel],
                fan_in,
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), &[out_ch]),
            in_ch,
            out_ch,
            kernel,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f32> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_ch, self.in_ch * self.kernel * self.kernel))
            .expect("contiguous weight")
            .into_dimensionality::<Ix2>()
            .expect("2-d")
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array4<f32>) -> (Array4<f32>, ConvCache) {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let cols = im2col(x, self.kernel);
        let out = self.weight_matrix().dot(&cols);
        let bias = self.bias.value.as_slice().expect("contiguous bias");
        let y = columns_to_nchw(&out, b, h, w, |o, v| v + bias[o]);
        (
            y,
            ConvCache {
                cols,
                in_shape: (b, c, h, w),
            },
        )
    }

    pub fn backward(&mut self, cache: ConvCache, dy: &Array4<f32>) -> Array4<f32> {
        let (b, _, h, w) = cache.in_shape;
        let dy2 = nchw_to_columns(dy);
        let dw = dy2.dot(&cache.cols.t());
        let mut wgrad = self
            .weight
            .grad
            .view_mut()
            .into_shape_with_order(dw.dim())
            .expect("contiguous grad");
        wgrad += &dw;
        let mut bgrad = self.bias.grad.view_mut();
        bgrad += &dy2.sum_axis(Axis(1)).into_dyn();
        let dcols = self.weight_matrix().t().dot(&dy2);
        col2im(&dcols, cache.in_shape, self.kernel, (b, h, w))
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Transposed convolution with kernel 2 and stride 2 (exact 2x upsampling).
#[derive(Debug, Clone)]
pub struct ConvTranspose2x2 {
    weight: Param,
    bias: Param,
    in_ch: usize,
    out_ch: usize,
}

pub struct ConvTransposeCache {
    x: Array2<f32>,
    in_shape: (usize, usize, usize, usize),
}

impl ConvTranspose2x2 {
    pub fn new<R: Rng + ?Sized>(name: &str, in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::fan_in_uniform(
                format!("{name}.weight"),
                &[in_ch, out_ch, 2, 2],
                in_ch,
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), &[out_ch]),
            in_ch,
            out_ch,
        }
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f32> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.in_ch, self.out_ch * 4))
            .expect("contiguous weight")
            .into_dimensionality::<Ix2>()
            .expect("2-d")
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array4<f32>) -> (Array4<f32>, ConvTransposeCache) {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "transposed conv input channels");
        let xm = nchw_to_columns(x);
        let ym = self.weight_matrix().t().dot(&xm);
        let bias = self.bias.value.as_slice().expect("contiguous bias");
        let mut y = Array4::<f32>::zeros((b, self.out_ch, 2 * h, 2 * w));
        let ys = y.as_slice_mut().expect("fresh array");
        let (oh, ow) = (2 * h, 2 * w);
        for o in 0..self.out_ch {
            for di in 0..2 {
                for dj in 0..2 {
                    let row = ym.row(o * 4 + di * 2 + dj);
                    let row = row.as_slice().expect("standard layout");
                    for bi in 0..b {
                        let base = (bi * self.out_ch + o) * oh * ow;
                        for i in 0..h {
                            let src = &row[bi * h * w + i * w..bi * h * w + (i + 1) * w];
                            let dst_row = base + (2 * i + di) * ow;
                            for (j, v) in src.iter().enumerate() {
                                ys[dst_row + 2 * j + dj] = v + bias[o];
                            }
                        }
                    }
                }
            }
        }
        (
            y,
            ConvTransposeCache {
                x: xm,
                in_shape: (b, c, h, w),
            },
        )
    }

    pub fn backward(&mut self, cache: ConvTransposeCache, dy: &Array4<f32>) -> Array4<f32> {
        let (b, _, h, w) = cache.in_shape;
        let (oh, ow) = (2 * h, 2 * w);
        let dys = dy.as_standard_layout();
        let dys = dys.as_slice().expect("standard layout");
        let mut dym = Array2::<f32>::zeros((self.out_ch * 4, b * h * w));
        let mut bgrad = vec![0f32; self.out_ch];
        for o in 0..self.out_ch {
            for di in 0..2 {
                for dj in 0..2 {
                    let mut row = dym.row_mut(o * 4 + di * 2 + dj);
                    let row = row.as_slice_mut().expect("standard layout");
                    for bi in 0..b {
                        let base = (bi * self.out_ch + o) * oh * ow;
                        for i in 0..h {
                            let src_row = base + (2 * i + di) * ow;
                            for j in 0..w {
                                let v = dys[src_row + 2 * j + dj];
                                row[bi * h * w + i * w + j] = v;
                                bgrad[o] += v;
                            }
                        }
                    }
                }
            }
        }
        let dw = cache.x.dot(&dym.t());
        let mut wgrad = self
            .weight
            .grad
            .view_mut()
            .into_shape_with_order(dw.dim())
            .expect("contiguous grad");
        wgrad += &dw;
        for (g, v) in self.bias.grad.iter_mut().zip(bgrad) {
            *g += v;
        }
        let dx = self.weight_matrix().dot(&dym);
        columns_to_nchw(&dx, b, h, w, |_, v| v)
    }
}

impl Module for ConvTranspose2x2 {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Unfolds `k x k` same-padded patches into a `(C*k*k, B*H*W)` matrix.
fn im2col(x: &Array4<f32>, k: usize) -> Array2<f32> {
    let (b, c, h, w) = x.dim();
    let pad = k / 2;
    let hw = h * w;
    let ncol = b * hw;
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let mut cols = vec![0f32; c * k * k * ncol];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst_row = &mut cols[row * ncol..(row + 1) * ncol];
                let x0 = pad.saturating_sub(kx);
                let x1 = (w + pad).saturating_sub(kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for bi in 0..b {
                    let src = &xs[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    let dst = &mut dst_row[bi * hw..(bi + 1) * hw];
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < pad || sy - pad >= h {
                            continue;
                        }
                        let sy = sy - pad;
                        dst[y * w + x0..y * w + x1]
                            .copy_from_slice(&src[sy * w + x0 + kx - pad..sy * w + x1 + kx - pad]);
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, ncol), cols).expect("im2col shape")
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
fn col2im(
    cols: &Array2<f32>,
    in_shape: (usize, usize, usize, usize),
    k: usize,
    (b, h, w): (usize, usize, usize),
) -> Array4<f32> {
    let c = in_shape.1;
    let pad = k / 2;
    let hw = h * w;
    let ncol = b * hw;
    let cs = cols.as_standard_layout();
    let cs = cs.as_slice().expect("standard layout");
    let mut dx = vec![0f32; b * c * hw];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src_row = &cs[row * ncol..(row + 1) * ncol];
                let x0 = pad.saturating_sub(kx);
                let x1 = (w + pad).saturating_sub(kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for bi in 0..b {
                    let src = &src_row[bi * hw..(bi + 1) * hw];
                    let dst = &mut dx[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < pad || sy - pad >= h {
                            continue;
                        }
                        let sy = sy - pad;
                        let d = &mut dst[sy * w + x0 + kx - pad..sy * w + x1 + kx - pad];
                        for (dv, sv) in d.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                            *dv += sv;
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec((b, c, h, w), dx).expect("col2im shape")
}

/// `(B, C, H, W)` to `(C, B*H*W)`.
fn nchw_to_columns(x: &Array4<f32>) -> Array2<f32> {
    let (b, c, h, w) = x.dim();
    let hw = h * w;
    let mut out = Array2::<f32>::zeros((c, b * hw));
    for bi in 0..b {
        out.slice_mut(s![.., bi * hw..(bi + 1) * hw]).assign(
            &x.index_axis(Axis(0), bi)
                .into_shape_with_order((c, hw))
                .expect("contiguous sample"),
        );
    }
    out
}

/// `(C, B*H*W)` to `(B, C, H, W)`, mapping each value through `f(channel, v)`.
fn columns_to_nchw(
    m: &Array2<f32>,
    b: usize,
    h: usize,
    w: usize,
    f: impl Fn(usize, f32) -> f32,
) -> Array4<f32> {
    let c = m.nrows();
    let hw = h * w;
    let ms = m.as_standard_layout();
    let ms = ms.as_slice().expect("standard layout");
    let mut out = vec![0f32; b * c * hw];
    for ci in 0..c {
        let row = &ms[ci * b * hw..(ci + 1) * b * hw];
        for bi in 0..b {
            let dst = &mut out[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            for (d, v) in dst.iter_mut().zip(&row[bi * hw..(bi + 1) * hw]) {
                *d = f(ci, *v);
            }
        }
    }
    Array4::from_shape_vec((b, c, h, w), out).expect("nchw shape")
}
