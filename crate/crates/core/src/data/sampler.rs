use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ImageRecord, Manifest};
use crate::{Error, Result};

/// `P` patients with `K` images each, `N = P * K` images per batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub patients_per_batch: usize,
    pub images_per_patient: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            patients_per_batch: 4,
            images_per_patient: 2,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn batch_images(&self) -> usize {
        self.patients_per_batch * self.images_per_patient
    }

    /// Augmented views per batch (`2N`).
    pub fn batch_views(&self) -> usize {
        2 * self.batch_images()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patients_per_batch < 2 {
            return Err(Error::Config("patients_per_batch must be at least 2".into()));
        }
        if self.images_per_patient < 1 {
            return Err(Error::Config("images_per_patient must be at least 1".into()));
        }
        Ok(())
    }
}

/// Record indices for one batch, grouped by patient.
///
/// `P` distinct patients are drawn uniformly. Patients with at least `K`
/// images contribute `K` distinct images; smaller patients are sampled with
/// replacement.
pub fn sample_batch_indices<R: Rng + ?Sized>(
    manifest: &Manifest,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    let patients: Vec<&str> = manifest.patients().collect();
    if patients.len() < cfg.patients_per_batch {
        return Err(Error::InvalidInput(format!(
            "need {} patients per batch but the manifest has {}",
            cfg.patients_per_batch,
            patients.len()
        )));
    }
    let k = cfg.images_per_patient;
    let mut out = Vec::with_capacity(cfg.batch_images());
    for p in index::sample(rng, patients.len(), cfg.patients_per_batch) {
        let recs = manifest.records_of(patients[p]);
        if recs.len() >= k {
            out.extend(index::sample(rng, recs.len(), k).into_iter().map(|i| recs[i]));
        } else {
            out.extend((0..k).map(|_| recs[rng.random_range(0..recs.len())]));
        }
    }
    Ok(out)
}

pub fn sample_batch<'m, R: Rng + ?Sized>(
    manifest: &'m Manifest,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<&'m ImageRecord>> {
    Ok(sample_batch_indices(manifest, cfg, rng)?
        .into_iter()
        .map(|i| &manifest.records()[i])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn manifest(sizes: &[usize]) -> Manifest {
        let mut recs = vec![];
        for (p, &n) in sizes.iter().enumerate() {
            for k in 0..n {
                recs.push(ImageRecord {
                    image_id: format!("p{p}_{k}"),
                    patient_id: format!("p{p}"),
                    image_path: "x".into(),
                    mask_path: None,
                    timestamp_index: Some(k as u32),
                });
            }
        }
        Manifest::new(recs).unwrap()
    }

    fn counts(m: &Manifest, batch: &[&ImageRecord]) -> BTreeMap<String, usize> {
        let _ = m;
        let mut c = BTreeMap::new();
        for r in batch {
            *c.entry(r.patient_id.clone()).or_insert(0) += 1;
        }
        c
    }

    #[test]
    fn two_by_two() {
        let m = manifest(&[4; 8]);
        let cfg = SamplerConfig {
            patients_per_batch: 2,
            images_per_patient: 2,
            seed: 0,
        };
        let b = sample_batch(&m, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(b.len(), 4);
        let c = counts(&m, &b);
        assert_eq!(c.len(), 2);
        assert!(c.values().all(|&n| n == 2));
        assert_ne!(b[0].image_id, b[1].image_id);
    }

    #[test]
    fn single_image_per_patient_batches_are_distinct_patients() {
        let m = manifest(&[4; 8]);
        let cfg = SamplerConfig {
            patients_per_batch: 8,
            images_per_patient: 1,
            seed: 0,
        };
        let b = sample_batch(&m, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(counts(&m, &b).len(), 8);
    }

    #[test]
    fn same_state_same_batch() {
        let m = manifest(&[3, 1, 5, 2]);
        let cfg = SamplerConfig::default();
        let a = sample_batch_indices(&m, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_batch_indices(&m, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_patients() {
        let m = manifest(&[2, 2]);
        let cfg = SamplerConfig {
            patients_per_batch: 3,
            ..Default::default()
        };
        assert!(sample_batch(&m, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    proptest! {
        #[test]
        fn exactly_k_per_patient(
            sizes in prop::collection::vec(1usize..6, 2..10),
            p in 2usize..6,
            k in 1usize..5,
            seed in any::<u64>(),
        ) {
            prop_assume!(p <= sizes.len());
            let m = manifest(&sizes);
            let cfg = SamplerConfig { patients_per_batch: p, images_per_patient: k, seed };
            let b = sample_batch(&m, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(b.len(), p * k);
            let c = counts(&m, &b);
            prop_assert_eq!(c.len(), p);
            prop_assert!(c.values().all(|&n| n == k));
        }
    }
}
