//! Desk-scale stand-in for a longitudinal chest X-ray collection.
//!
//! Each patient gets a template: two non-overlapping elliptical "lungs"
//! inside a body outline, patient-specific intensities and a low-frequency
//! texture. Every image of the patient re-renders that template under a
//! small random affine jitter with fresh pixel noise, so images of one
//! patient are close to each other and far from other patients.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_gray_u8, write_manifest, write_mask, ImageRecord, Manifest};
use super::{BACKGROUND, LEFT_LUNG, RIGHT_LUNG};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_patients: usize,
    pub images_per_patient: usize,
    pub image_size: usize,
    pub patient_shape_seed: u64,
    pub within_patient_jitter: f32,
    pub across_patient_variation: f32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_patients: 8,
            images_per_patient: 4,
            image_size: 64,
            patient_shape_seed: 0,
            within_patient_jitter: 0.05,
            across_patient_variation: 0.30,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_patients == 0 || self.images_per_patient == 0 {
            return Err(Error::Config("need at least one patient and one image".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        if !(self.within_patient_jitter >= 0.0
            && self.within_patient_jitter < self.across_patient_variation)
        {
            return Err(Error::Config(format!(
                "within_patient_jitter ({}) must be non-negative and below across_patient_variation ({})",
                self.within_patient_jitter, self.across_patient_variation
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f32,
    cy: f32,
    ax: f32,
    ay: f32,
    angle: f32,
}

impl Ellipse {
    fn contains(&self, x: f32, y: f32) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.ax).powi(2) + (v / self.ay).powi(2) <= 1.0
    }

    fn half_width(&self) -> f32 {
        let (s, c) = self.angle.sin_cos();
        ((self.ax * c).powi(2) + (self.ay * s).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, Copy)]
struct Wave {
    kx: f32,
    ky: f32,
    phase: f32,
    amplitude: f32,
}

#[derive(Debug, Clone)]
struct Template {
    body: Ellipse,
    lungs: [Ellipse; 2],
    outside_level: f32,
    body_level: f32,
    lung_level: f32,
    texture: Vec<Wave>,
}

fn symmetric<R: Rng>(rng: &mut R) -> f32 {
    rng.random_range(-1.0..=1.0)
}

impl Template {
    fn sample<R: Rng>(rng: &mut R, variation: f32) -> Self {
        let v = variation;
        let lung = |base_cx: f32, rng: &mut R| Ellipse {
            cx: base_cx + 0.06 * v * symmetric(rng),
            cy: 0.50 + 0.10 * v * symmetric(rng),
            ax: 0.12 * (1.0 + 0.5 * v * symmetric(rng)),
            ay: 0.28 * (1.0 + 0.5 * v * symmetric(rng)),
            angle: 0.4 * v * symmetric(rng),
        };
        let mut left = lung(0.30, rng);
        let mut right = lung(0.70, rng);
        // keep a gap around the midline
        left.cx = left.cx.min(0.48 - left.half_width());
        right.cx = right.cx.max(0.52 + right.half_width());
        let body = Ellipse {
            cx: 0.5,
            cy: 0.55,
            ax: 0.46 * (1.0 + 0.1 * v * symmetric(rng)),
            ay: 0.48,
            angle: 0.0,
        };
        let texture = (0..3)
            .map(|_| {
                let freq = rng.random_range(1.5..4.0) * 2.0 * PI;
                let theta = rng.random_range(0.0..PI);
                Wave {
                    kx: freq * theta.cos(),
                    ky: freq * theta.sin(),
                    phase: rng.random_range(0.0..2.0 * PI),
                    amplitude: 0.05 + 0.05 * v * symmetric(rng),
                }
            })
            .collect();
        Self {
            body,
            lungs: [left, right],
            outside_level: 0.05,
            body_level: 0.60 + 0.3 * v * symmetric(rng),
            lung_level: 0.22 + 0.3 * v * symmetric(rng),
            texture,
        }
    }

    /// Intensity and label at template coordinates in the unit square.
    fn eval(&self, x: f32, y: f32) -> (f32, u8) {
        let label = if self.lungs[0].contains(x, y) {
            LEFT_LUNG
        } else if self.lungs[1].contains(x, y) {
            RIGHT_LUNG
        } else {
            BACKGROUND
        };
        let base = if label != BACKGROUND {
            self.lung_level
        } else if self.body.contains(x, y) {
            self.body_level
        } else {
            return (self.outside_level, BACKGROUND);
        };
        let texture: f32 = self
            .texture
            .iter()
            .map(|w| w.amplitude * (w.kx * x + w.ky * y + w.phase).sin())
            .sum();
        (base + texture, label)
    }
}

/// One rendered image with its ground-truth mask.
#[derive(Debug, Clone)]
pub struct SyntheticImage {
    pub patient_id: String,
    pub image_id: String,
    pub timestamp_index: u32,
    pub image: Array2<f32>,
    pub mask: Array2<u8>,
}

fn render<R: Rng>(t: &Template, size: usize, jitter: f32, rng: &mut R) -> (Array2<f32>, Array2<u8>) {
    let angle = jitter * symmetric(rng);
    let scale = 1.0 + jitter * symmetric(rng);
    let (tx, ty) = (jitter * symmetric(rng), jitter * symmetric(rng));
    let gain = 1.0 + 0.5 * jitter * symmetric(rng);
    let noise = Normal::new(0.0f32, 0.5 * jitter.max(1e-3)).expect("positive std");
    let (s, c) = angle.sin_cos();
    let mut img = Array2::zeros((size, size));
    let mut mask = Array2::zeros((size, size));
    for yi in 0..size {
        for xi in 0..size {
            let px = (xi as f32 + 0.5) / size as f32 - 0.5 - tx;
            let py = (yi as f32 + 0.5) / size as f32 - 0.5 - ty;
            // inverse of rotate-then-scale about the image centre
            let qx = (c * px + s * py) / scale + 0.5;
            let qy = (-s * px + c * py) / scale + 0.5;
            let (v, label) = t.eval(qx, qy);
            img[[yi, xi]] = (gain * v + noise.sample(rng)).clamp(0.0, 1.0);
            mask[[yi, xi]] = label;
        }
    }
    (img, mask)
}

/// Renders the whole synthetic collection in memory.
pub fn synthesize(cfg: &SyntheticConfig) -> Result<Vec<SyntheticImage>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.num_patients * cfg.images_per_patient);
    for p in 0..cfg.num_patients {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.patient_shape_seed);
        rng.set_stream(p as u64);
        let template = Template::sample(&mut rng, cfg.across_patient_variation);
        let patient_id = format!("P{p:03}");
        for k in 0..cfg.images_per_patient {
            let (image, mask) = render(&template, cfg.image_size, cfg.within_patient_jitter, &mut rng);
            out.push(SyntheticImage {
                image_id: format!("{patient_id}_t{k}"),
                patient_id: patient_id.clone(),
                timestamp_index: k as u32,
                image,
                mask,
            });
        }
    }
    Ok(out)
}

/// Writes images, masks and `manifest.tsv` under `out_dir`.
pub fn generate_synthetic(cfg: &SyntheticConfig, out_dir: &Path) -> Result<Manifest> {
    let images = synthesize(cfg)?;
    let (img_dir, mask_dir) = (out_dir.join("images"), out_dir.join("masks"));
    for d in [&img_dir, &mask_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut records = Vec::with_capacity(images.len());
    for s in images {
        let image_path = img_dir.join(format!("{}.png", s.image_id));
        let mask_path = mask_dir.join(format!("{}.png", s.image_id));
        write_gray_u8(&s.image, &image_path)?;
        write_mask(&s.mask, &mask_path)?;
        records.push(ImageRecord {
            image_id: s.image_id,
            patient_id: s.patient_id,
            image_path,
            mask_path: Some(mask_path),
            timestamp_index: Some(s.timestamp_index),
        });
    }
    let manifest = Manifest::new(records)?;
    write_manifest(&manifest, &out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_manifest;

    fn mse(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
        a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn writes_expected_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(&SyntheticConfig::default(), dir.path()).unwrap();
        assert_eq!(m.len(), 32);
        assert_eq!(m.num_patients(), 8);
        assert_eq!(fs::read_dir(dir.path().join("images")).unwrap().count(), 32);
        assert_eq!(fs::read_dir(dir.path().join("masks")).unwrap().count(), 32);
        let loaded = load_manifest(&dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(loaded.len(), 32);
        assert_eq!(loaded.num_patients(), 8);
    }

    #[test]
    fn masks_use_three_labels_and_both_lungs() {
        for s in synthesize(&SyntheticConfig::default()).unwrap() {
            assert!(s.mask.iter().all(|&v| v <= 2));
            let left = s.mask.iter().filter(|&&v| v == LEFT_LUNG).count();
            let right = s.mask.iter().filter(|&&v| v == RIGHT_LUNG).count();
            assert!(left > 100 && right > 100, "{left} {right}");
            // left lung sits in the left half of the image
            let mean_col = |label: u8| {
                let cols: Vec<usize> = s.mask.indexed_iter().filter(|(_, &v)| v == label).map(|((_, c), _)| c).collect();
                cols.iter().sum::<usize>() as f64 / cols.len() as f64
            };
            assert!(mean_col(LEFT_LUNG) < 32.0 && mean_col(RIGHT_LUNG) > 32.0);
        }
    }

    #[test]
    fn patients_are_more_similar_to_themselves() {
        let set = synthesize(&SyntheticConfig::default()).unwrap();
        let (mut within, mut nw, mut across, mut na) = (0.0, 0, 0.0, 0);
        for i in 0..set.len() {
            for j in i + 1..set.len() {
                let d = mse(&set[i].image, &set[j].image);
                if set[i].patient_id == set[j].patient_id {
                    within += d;
                    nw += 1;
                } else {
                    across += d;
                    na += 1;
                }
            }
        }
        let (within, across) = (within / nw as f64, across / na as f64);
        assert!(within < across, "within {within} across {across}");
    }

    #[test]
    fn same_seed_same_pixels() {
        let a = synthesize(&SyntheticConfig::default()).unwrap();
        let b = synthesize(&SyntheticConfig::default()).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.image == y.image && x.mask == y.mask));
        let c = synthesize(&SyntheticConfig {
            patient_shape_seed: 1,
            ..Default::default()
        })
        .unwrap();
        assert!(a[0].image != c[0].image);
    }

    #[test]
    fn rejects_jitter_above_variation() {
        let cfg = SyntheticConfig {
            within_patient_jitter: 0.4,
            ..Default::default()
        };
        assert!(synthesize(&cfg).is_err());
    }
}
