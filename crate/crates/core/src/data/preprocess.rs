use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    #[default]
    ZScore,
    MinMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub target_size: usize,
    pub pad_value: f32,
    pub normalization: Normalization,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_size: 256,
            pad_value: 0.0,
            normalization: Normalization::ZScore,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::Config("target_size must be positive".into()));
        }
        Ok(())
    }
}

/// Leading and trailing padding along rows and columns that makes `(h, w)`
/// square. An odd deficit puts the extra pixel on the trailing edge.
pub fn square_padding(h: usize, w: usize) -> ((usize, usize), (usize, usize)) {
    let split = |deficit: usize| (deficit / 2, deficit - deficit / 2);
    if h >= w {
        ((0, 0), split(h - w))
    } else {
        (split(w - h), (0, 0))
    }
}

/// Pads the shorter axis with `pad` so the result is square.
pub fn pad_to_square<T: Clone>(img: &Array2<T>, pad: T) -> Array2<T> {
    let (h, w) = img.dim();
    let side = h.max(w);
    let ((top, _), (left, _)) = square_padding(h, w);
    let mut out = Array2::from_elem((side, side), pad);
    out.slice_mut(s![top..top + h, left..left + w]).assign(img);
    out
}

fn source_coord(dst: usize, scale: f64, len: usize) -> f64 {
    ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64)
}

/// Bilinear resize with half-pixel centers. Same-size input is returned unchanged.
pub fn resize_bilinear(img: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let cols: Vec<(usize, usize, f32)> = (0..out_w)
        .map(|x| {
            let fx = source_coord(x, sx, w);
            let x0 = fx.floor() as usize;
            (x0, (x0 + 1).min(w - 1), (fx - x0 as f64) as f32)
        })
        .collect();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let fy = source_coord(y, sy, h);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = (fy - y0 as f64) as f32;
        let (x0, x1, tx) = cols[x];
        let top = img[[y0, x0]] * (1.0 - tx) + img[[y0, x1]] * tx;
        let bottom = img[[y1, x0]] * (1.0 - tx) + img[[y1, x1]] * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

/// Nearest-neighbour resize; never produces values absent from the input.
pub fn resize_nearest<T: Copy>(img: &Array2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = img.dim();
    let pick = |dst: usize, src_len: usize, dst_len: usize| {
        (((dst as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize).min(src_len - 1)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| img[[pick(y, h, out_h), pick(x, w, out_w)]])
}

/// Per-image intensity normalization. Constant images map to zeros.
pub fn normalize(img: &Array2<f32>, method: Normalization) -> Array2<f32> {
    match method {
        Normalization::ZScore => {
            let n = img.len() as f64;
            let mean = img.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = img.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            let inv = if std > 1e-8 { 1.0 / std } else { 0.0 };
            img.mapv(|v| ((v as f64 - mean) * inv) as f32)
        }
        Normalization::MinMax => {
            let lo = img.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = img.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let range = hi - lo;
            if range > 0.0 {
                img.mapv(|v| (v - lo) / range)
            } else {
                Array2::zeros(img.dim())
            }
        }
    }
}

/// Pad to square, bilinear resize to `target_size`, then normalize.
pub fn preprocess(img: &Array2<f32>, cfg: &PreprocessConfig) -> Result<Array2<f32>> {
    cfg.validate()?;
    if img.is_empty() {
        return Err(Error::InvalidInput("empty image".into()));
    }
    let padded = pad_to_square(img, cfg.pad_value);
    let resized = resize_bilinear(&padded, cfg.target_size, cfg.target_size);
    Ok(normalize(&resized, cfg.normalization))
}

/// Pad with background and nearest-neighbour resize; labels are untouched.
pub fn preprocess_mask(mask: &Array2<u8>, target_size: usize) -> Result<Array2<u8>> {
    if mask.is_empty() {
        return Err(Error::InvalidInput("empty mask".into()));
    }
    let padded = pad_to_square(mask, 0u8);
    Ok(resize_nearest(&padded, target_size, target_size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn square_input_is_not_padded() {
        let img = Array2::from_elem((100, 100), 1.0f32);
        assert_eq!(pad_to_square(&img, 0.0), img);
        let out = preprocess(&img, &PreprocessConfig::default()).unwrap();
        assert_eq!(out.dim(), (256, 256));
    }

    #[test]
    fn even_deficit_splits_evenly() {
        let img = Array2::from_elem((100, 60), 1.0f32);
        assert_eq!(square_padding(100, 60), ((0, 0), (20, 20)));
        let p = pad_to_square(&img, 0.0);
        assert_eq!(p.dim(), (100, 100));
        let col_sums: Vec<f32> = p.columns().into_iter().map(|c| c.sum()).collect();
        assert!(col_sums[..20].iter().all(|&s| s == 0.0));
        assert!(col_sums[20..80].iter().all(|&s| s == 100.0));
        assert!(col_sums[80..].iter().all(|&s| s == 0.0));
    }

    #[test]
    fn odd_deficit_pads_trailing_edge_more() {
        assert_eq!(square_padding(100, 59), ((0, 0), (20, 21)));
        assert_eq!(square_padding(59, 100), ((20, 21), (0, 0)));
        let p = pad_to_square(&Array2::from_elem((100, 59), 1u8), 0);
        assert_eq!(p.column(19).sum(), 0);
        assert_eq!(p.column(20).sum(), 100);
        assert_eq!(p.column(78).sum(), 100);
        assert_eq!(p.column(79).sum(), 0);
    }

    #[test]
    fn padding_twice_adds_nothing() {
        let img = Array2::from_shape_fn((7, 4), |(i, j)| (i * 4 + j) as f32);
        let once = pad_to_square(&img, 0.0);
        assert_eq!(pad_to_square(&once, 0.0), once);
    }

    #[test]
    fn empty_image_is_rejected() {
        let img = Array2::<f32>::zeros((0, 5));
        assert!(preprocess(&img, &PreprocessConfig::default()).is_err());
    }

    #[test]
    fn normalizations() {
        let img = Array2::from_shape_vec((1, 4), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let z = normalize(&img, Normalization::ZScore);
        assert!(z.sum().abs() < 1e-6);
        assert!(((z.mapv(|v| v * v).sum() / 4.0) - 1.0).abs() < 1e-6);
        let m = normalize(&img, Normalization::MinMax);
        assert_eq!(m.as_slice().unwrap(), &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert!(normalize(&Array2::from_elem((2, 2), 5.0), Normalization::ZScore)
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn bilinear_preserves_constants() {
        let img = Array2::from_elem((5, 9), 0.25f32);
        let out = resize_bilinear(&img, 16, 16);
        assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    proptest! {
        #[test]
        fn mask_resize_keeps_label_set(
            h in 1usize..40, w in 1usize..40, target in 1usize..70, seed in any::<u64>()
        ) {
            let mask = Array2::from_shape_fn((h, w), |(i, j)| {
                ((seed >> ((i * 7 + j * 3) % 60)) % 3) as u8
            });
            let out = preprocess_mask(&mask, target).unwrap();
            prop_assert_eq!(out.dim(), (target, target));
            prop_assert!(out.iter().all(|v| *v <= 2));
            let original: std::collections::BTreeSet<u8> = mask.iter().copied().chain([0]).collect();
            prop_assert!(out.iter().all(|v| original.contains(v)));
        }
    }
}
