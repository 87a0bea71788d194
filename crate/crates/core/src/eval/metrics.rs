use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::data::{LEFT_LUNG, NUM_CLASSES, RIGHT_LUNG};
use crate::{Error, Result};

/// `2 |P & T| / (|P| + |T|)` for the pixels labeled `class`. Two empty
/// sets score 1, exactly one empty set scores 0.
pub fn dice(pred: &Array2<u8>, truth: &Array2<u8>, class: u8) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs truth {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let (mut p, mut t, mut both) = (0usize, 0usize, 0usize);
    Zip::from(pred).and(truth).for_each(|&a, &b| {
        let (a, b) = (a == class, b == class);
        p += a as usize;
        t += b as usize;
        both += (a && b) as usize;
    });
    Ok(if p + t == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + t) as f64
    })
}

/// Dice for every class, background included.
pub fn per_class_dice(pred: &Array2<u8>, truth: &Array2<u8>) -> Result<Vec<f64>> {
    (0..NUM_CLASSES as u8).map(|c| dice(pred, truth, c)).collect()
}

/// Validation Dice of one fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub variant: String,
    #[serde(rename = "M")]
    pub m: usize,
    pub fold: usize,
    pub seed: u64,
    pub dice_left: f64,
    pub dice_right: f64,
    pub mean_foreground: f64,
}

impl DiceReport {
    /// Builds a report from per-class scores (index = class label).
    pub fn new(variant: &str, m: usize, fold: usize, seed: u64, per_class: &[f64]) -> Self {
        let left = per_class[LEFT_LUNG as usize];
        let right = per_class[RIGHT_LUNG as usize];
        Self {
            variant: variant.to_string(),
            m,
            fold,
            seed,
            dice_left: left,
            dice_right: right,
            mean_foreground: (left + right) / 2.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn strip(n: usize, lo: usize, hi: usize) -> Array2<u8> {
        Array2::from_shape_fn((1, n), |(_, j)| (j >= lo && j < hi) as u8)
    }

    #[test]
    fn hand_examples() {
        let a = strip(200, 0, 100);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice(&strip(200, 0, 50), &strip(200, 100, 200), 1).unwrap(), 0.0);
        let d = dice(&strip(200, 0, 50), &strip(200, 0, 100), 1).unwrap();
        assert!((d - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(dice(&a, &a, 2).unwrap(), 1.0);
        assert_eq!(dice(&strip(10, 0, 0), &strip(10, 0, 3), 1).unwrap(), 0.0);
        assert!(dice(&a, &strip(10, 0, 3), 1).is_err());
    }

    #[test]
    fn report_means_foreground_only() {
        let r = DiceReport::new("random", 4, 0, 1, &[0.1, 0.8, 0.6]);
        assert!((r.mean_foreground - 0.7).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn symmetric_and_permutation_invariant(
            a in proptest::collection::vec(0u8..3, 36),
            b in proptest::collection::vec(0u8..3, 36),
            seed in 0u64..1000,
        ) {
            let pa = Array2::from_shape_vec((6, 6), a.clone()).unwrap();
            let pb = Array2::from_shape_vec((6, 6), b.clone()).unwrap();
            let mut perm: Vec<usize> = (0..36).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let qa = Array2::from_shape_fn((6, 6), |(i, j)| a[perm[i * 6 + j]]);
            let qb = Array2::from_shape_fn((6, 6), |(i, j)| b[perm[i * 6 + j]]);
            for c in 0..3 {
                let d = dice(&pa, &pb, c).unwrap();
                prop_assert!((0.0..=1.0).contains(&d));
                prop_assert_eq!(d, dice(&pb, &pa, c).unwrap());
                prop_assert_eq!(d, dice(&qa, &qb, c).unwrap());
                prop_assert_eq!(dice(&pa, &pa, c).unwrap(), 1.0);
            }
        }
    }
}
