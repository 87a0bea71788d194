//! Random geometric and appearance transforms.
//!
//! A single affine warp (rotation and scale about the image centre followed
//! by a translation) is sampled per call. Pixels that map from outside the
//! frame are filled with zero. Images are resampled bilinearly, label masks
//! by nearest neighbour so no new labels can appear.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Sampled coordinates within this distance of a pixel centre snap onto it,
/// so exact rotations and integer shifts permute pixels exactly.
const SNAP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Uniform rotation range in degrees.
    pub rotation_degrees: (f32, f32),
    /// Uniform shift range per axis, as a fraction of the image side.
    pub translation_fraction: (f32, f32),
    pub scale: (f32, f32),
    pub horizontal_flip_prob: f32,
    /// Contrast and brightness are perturbed by up to this amount.
    pub intensity_jitter: f32,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::pretraining()
    }
}

impl AugmentConfig {
    pub fn pretraining() -> Self {
        Self {
            rotation_degrees: (-10.0, 10.0),
            translation_fraction: (-0.10, 0.10),
            scale: (0.9, 1.1),
            horizontal_flip_prob: 0.5,
            intensity_jitter: 0.1,
            seed: 0,
        }
    }

    pub fn finetuning() -> Self {
        Self {
            horizontal_flip_prob: 0.0,
            intensity_jitter: 0.0,
            ..Self::pretraining()
        }
    }

    /// Every range collapsed onto the identity transform.
    pub fn identity() -> Self {
        Self {
            rotation_degrees: (0.0, 0.0),
            translation_fraction: (0.0, 0.0),
            scale: (1.0, 1.0),
            horizontal_flip_prob: 0.0,
            intensity_jitter: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("rotation_degrees", self.rotation_degrees),
            ("translation_fraction", self.translation_fraction),
            ("scale", self.scale),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) is invalid")));
            }
        }
        if self.scale.0 <= 0.0 {
            return Err(Error::Config("scale must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.horizontal_flip_prob) {
            return Err(Error::Config("horizontal_flip_prob must lie in [0, 1]".into()));
        }
        if !(self.intensity_jitter >= 0.0 && self.intensity_jitter.is_finite()) {
            return Err(Error::Config("intensity_jitter must be non-negative".into()));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f32, f32)) -> f64 {
    if lo == hi {
        lo as f64
    } else {
        rng.random_range(lo as f64..=hi as f64)
    }
}

/// One concrete draw of the transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpParams {
    pub angle_deg: f64,
    pub scale: f64,
    /// Shift in pixels along columns (x) and rows (y).
    pub shift: (f64, f64),
    pub flip: bool,
    pub contrast: f32,
    pub brightness: f32,
}

impl WarpParams {
    pub fn identity() -> Self {
        Self {
            angle_deg: 0.0,
            scale: 1.0,
            shift: (0.0, 0.0),
            flip: false,
            contrast: 1.0,
            brightness: 0.0,
        }
    }

    /// Samples every component in a fixed order from `rng`.
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, side: usize, rng: &mut R) -> Self {
        let angle_deg = uniform(rng, cfg.rotation_degrees);
        let scale = uniform(rng, cfg.scale);
        let shift = (
            uniform(rng, cfg.translation_fraction) * side as f64,
            uniform(rng, cfg.translation_fraction) * side as f64,
        );
        let flip = cfg.horizontal_flip_prob > 0.0 && rng.random::<f32>() < cfg.horizontal_flip_prob;
        let j = cfg.intensity_jitter;
        let (contrast, brightness) = if j > 0.0 {
            (1.0 + rng.random_range(-j..=j), rng.random_range(-j..=j))
        } else {
            (1.0, 0.0)
        };
        Self {
            angle_deg,
            scale,
            shift,
            flip,
            contrast,
            brightness,
        }
    }

    /// Source coordinate `(x, y)` that output pixel `(x, y)` reads from.
    fn source(&self, x: usize, y: usize, side: usize) -> (f64, f64) {
        let c = (side as f64 - 1.0) / 2.0;
        let x = if self.flip { side - 1 - x } else { x } as f64;
        let (dx, dy) = (x - c - self.shift.0, y as f64 - c - self.shift.1);
        let (s, cs) = self.angle_deg.to_radians().sin_cos();
        let snap = |v: f64| if (v - v.round()).abs() < SNAP { v.round() } else { v };
        (
            snap((cs * dx + s * dy) / self.scale + c),
            snap((-s * dx + cs * dy) / self.scale + c),
        )
    }
}

fn check_square(side: (usize, usize)) -> Result<usize> {
    if side.0 != side.1 || side.0 == 0 {
        return Err(Error::Shape(format!("expected a non-empty square image, got {side:?}")));
    }
    Ok(side.0)
}

/// Bilinear warp with zero fill, then the intensity transform.
pub fn warp_image(img: &Array2<f32>, p: &WarpParams) -> Result<Array2<f32>> {
    let side = check_square(img.dim())?;
    let n = side as isize;
    let at = |y: isize, x: isize| {
        if x < 0 || y < 0 || x >= n || y >= n {
            0.0
        } else {
            img[[y as usize, x as usize]]
        }
    };
    Ok(Array2::from_shape_fn((side, side), |(y, x)| {
        let (sx, sy) = p.source(x, y, side);
        let (x0, y0) = (sx.floor(), sy.floor());
        let (tx, ty) = ((sx - x0) as f32, (sy - y0) as f32);
        let (x0, y0) = (x0 as isize, y0 as isize);
        let v = if tx == 0.0 && ty == 0.0 {
            at(y0, x0)
        } else {
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            top * (1.0 - ty) + bottom * ty
        };
        p.contrast * v + p.brightness
    }))
}

/// Nearest-neighbour warp with background fill. No intensity transform.
pub fn warp_mask(mask: &Array2<u8>, p: &WarpParams) -> Result<Array2<u8>> {
    let side = check_square(mask.dim())?;
    let n = side as f64;
    Ok(Array2::from_shape_fn((side, side), |(y, x)| {
        let (sx, sy) = p.source(x, y, side);
        let (rx, ry) = (sx.round(), sy.round());
        if rx < 0.0 || ry < 0.0 || rx >= n || ry >= n {
            0
        } else {
            mask[[ry as usize, rx as usize]]
        }
    }))
}

/// One stochastic view of an unlabeled image.
pub fn augment_view<R: Rng + ?Sized>(img: &Array2<f32>, cfg: &AugmentConfig, rng: &mut R) -> Result<Array2<f32>> {
    let side = check_square(img.dim())?;
    warp_image(img, &WarpParams::sample(cfg, side, rng))
}

/// Applies one geometric draw to an image and its mask. Horizontal flips are
/// never applied because they would swap the left and right labels.
pub fn augment_pair<R: Rng + ?Sized>(
    img: &Array2<f32>,
    mask: &Array2<u8>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Array2<f32>, Array2<u8>)> {
    if img.dim() != mask.dim() {
        return Err(Error::Shape(format!(
            "image {:?} and mask {:?} differ",
            img.dim(),
            mask.dim()
        )));
    }
    let side = check_square(img.dim())?;
    let cfg = AugmentConfig {
        horizontal_flip_prob: 0.0,
        ..*cfg
    };
    let p = WarpParams::sample(&cfg, side, rng);
    Ok((warp_image(img, &p)?, warp_mask(mask, &p)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pattern(side: usize) -> Array2<f32> {
        Array2::from_shape_fn((side, side), |(y, x)| (y * side + x) as f32 * 0.01 + (x % 3) as f32)
    }

    fn fixed(angle: f32, shift: f32) -> AugmentConfig {
        AugmentConfig {
            rotation_degrees: (angle, angle),
            translation_fraction: (shift, shift),
            ..AugmentConfig::identity()
        }
    }

    #[test]
    fn identity_config_returns_input() {
        let img = pattern(16);
        let mask = img.mapv(|v| (v as u32 % 3) as u8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment_view(&img, &AugmentConfig::identity(), &mut rng).unwrap(), img);
        let (i, m) = augment_pair(&img, &mask, &AugmentConfig::identity(), &mut rng).unwrap();
        assert_eq!(i, img);
        assert_eq!(m, mask);
    }

    #[test]
    fn distinct_states_give_distinct_views() {
        let img = pattern(16);
        let cfg = AugmentConfig::pretraining();
        let a = augment_view(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = augment_view(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(a, b);
        let c = augment_view(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn quarter_turn_permutes_pixels() {
        let side = 9;
        let img = pattern(side);
        let out = augment_view(&img, &fixed(90.0, 0.0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for y in 0..side {
            for x in 0..side {
                assert_eq!(out[[y, x]], img[[side - 1 - x, y]], "({y}, {x})");
            }
        }
        let mask = img.mapv(|v| (v as u32 % 3) as u8);
        let (_, m) = augment_pair(&img, &mask, &fixed(90.0, 0.0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for y in 0..side {
            for x in 0..side {
                assert_eq!(m[[y, x]], mask[[side - 1 - x, y]]);
            }
        }
    }

    #[test]
    fn flip_mirrors_columns() {
        let img = pattern(6);
        let cfg = AugmentConfig {
            horizontal_flip_prob: 1.0,
            ..AugmentConfig::identity()
        };
        let out = augment_view(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out[[2, 0]], img[[2, 5]]);
        // flips are suppressed for labeled pairs
        let mask = Array2::from_shape_fn((6, 6), |(_, x)| (x < 3) as u8);
        let (_, m) = augment_pair(&img, &mask, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m, mask);
    }

    fn centroid(mask: &Array2<u8>) -> (f64, f64) {
        let pts: Vec<(usize, usize)> = mask.indexed_iter().filter(|(_, &v)| v > 0).map(|(p, _)| p).collect();
        let n = pts.len() as f64;
        (
            pts.iter().map(|p| p.1 as f64).sum::<f64>() / n,
            pts.iter().map(|p| p.0 as f64).sum::<f64>() / n,
        )
    }

    #[test]
    fn translation_shifts_centroid() {
        let side = 64;
        let mask = Array2::from_shape_fn((side, side), |(y, x)| {
            (((x as f64 - 25.0).powi(2) + (y as f64 - 30.0).powi(2)) < 100.0) as u8 * 2
        });
        let img = mask.mapv(|v| v as f32);
        let cfg = fixed(0.0, 5.0 / side as f32);
        let (_, out) = augment_pair(&img, &mask, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (cx0, cy0) = centroid(&mask);
        let (cx1, cy1) = centroid(&out);
        assert!((cx1 - cx0 - 5.0).abs() < 1e-12 && (cy1 - cy0 - 5.0).abs() < 1e-12);
        let along_x = warp_mask(&mask, &WarpParams { shift: (5.0, 0.0), ..WarpParams::identity() }).unwrap();
        let (cx2, cy2) = centroid(&along_x);
        assert!((cx2 - cx0 - 5.0).abs() < 1e-12 && (cy2 - cy0).abs() < 1e-12);
        assert_eq!(
            out.iter().filter(|&&v| v == 2).count(),
            mask.iter().filter(|&&v| v == 2).count()
        );
    }

    #[test]
    fn pair_shape_mismatch() {
        let err = augment_pair(
            &Array2::zeros((4, 4)),
            &Array2::zeros((4, 5)),
            &AugmentConfig::finetuning(),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(err.is_err());
        assert!(augment_view(&Array2::zeros((4, 5)), &AugmentConfig::identity(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    proptest! {
        #[test]
        fn mask_labels_never_blend(seed in any::<u64>()) {
            let side = 24;
            let mask = Array2::from_shape_fn((side, side), |(y, x)| ((x / 6 + y / 5) % 3) as u8 * 2);
            let img = mask.mapv(|v| v as f32);
            let (_, out) = augment_pair(&img, &mask, &AugmentConfig::pretraining(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert!(out.iter().all(|&v| v == 0 || v == 2 || v == 4));
        }

        #[test]
        fn integer_shifts_only_clip(dx in -6i32..=6, dy in -6i32..=6) {
            let side = 32;
            let mask = Array2::from_shape_fn((side, side), |(y, x)| {
                if (10..20).contains(&x) && (8..14).contains(&y) { 1 } else if (12..18).contains(&x) && (16..26).contains(&y) { 2 } else { 0 }
            });
            let p = WarpParams { shift: (dx as f64, dy as f64), ..WarpParams::identity() };
            let out = warp_mask(&mask, &p).unwrap();
            for label in [1u8, 2] {
                prop_assert_eq!(
                    out.iter().filter(|&&v| v == label).count(),
                    mask.iter().filter(|&&v| v == label).count()
                );
            }
        }
    }
}
