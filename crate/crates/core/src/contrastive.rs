//! Multi-positive temperature-scaled contrastive loss.
//!
//! Each anchor `i` is contrasted with a set of valid candidates. Candidates
//! flagged in the [`PositiveMask`] are positives, every other valid
//! candidate is a negative:
//!
//! ```text
//! L_i = -(1/|P_i|) * sum_{j in P_i} log( exp(s_ij / t) / sum_{k in V_i} exp(s_ik / t) )
//! ```
//!
//! where `s` is cosine similarity, `P_i` the positives and `V_i` the valid
//! candidates of anchor `i`. The total is `sum_i L_i`, optionally divided by
//! the anchor count. Positives are derived from patient identity, so all
//! views of all images of one patient attract each other. Restricting the
//! positives to the sibling view recovers the usual single-positive NT-Xent.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Row norms below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Which candidates count as positives for an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositiveRule {
    /// Every other view of every image of the same patient.
    SamePatient,
    /// Only the other augmentation of the same image.
    SiblingOnly,
}

/// Anchor x candidate positive and validity flags.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveMask {
    mask: Array2<bool>,
    valid: Array2<bool>,
}

impl PositiveMask {
    /// Checks `mask` is a subset of `valid` and that every anchor has a positive.
    pub fn new(mask: Array2<bool>, valid: Array2<bool>) -> Result<Self> {
        if mask.dim() != valid.dim() {
            return Err(Error::Shape(format!(
                "positive mask {:?} vs valid mask {:?}",
                mask.dim(),
                valid.dim()
            )));
        }
        for ((i, j), &m) in mask.indexed_iter() {
            if m && !valid[[i, j]] {
                return Err(Error::InvalidInput(format!(
                    "positive ({i}, {j}) is not a valid candidate"
                )));
            }
        }
        for (i, row) in mask.axis_iter(Axis(0)).enumerate() {
            if !row.iter().any(|&m| m) {
                return Err(Error::NoPositives { anchor: i });
            }
        }
        Ok(Self { mask, valid })
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn valid(&self) -> &Array2<bool> {
        &self.valid
    }

    pub fn num_anchors(&self) -> usize {
        self.mask.nrows()
    }

    pub fn num_candidates(&self) -> usize {
        self.mask.ncols()
    }

    /// `|P_i|` for every anchor.
    pub fn positives_per_anchor(&self) -> Vec<usize> {
        self.mask
            .axis_iter(Axis(0))
            .map(|r| r.iter().filter(|&&m| m).count())
            .collect()
    }

    pub fn valid_per_anchor(&self) -> Vec<usize> {
        self.valid
            .axis_iter(Axis(0))
            .map(|r| r.iter().filter(|&&m| m).count())
            .collect()
    }

    /// Reorders anchors (rows) by `perm`, where row `i` of the result is row
    /// `perm[i]` of `self`.
    pub fn permute_anchors(&self, perm: &[usize]) -> Self {
        Self {
            mask: self.mask.select(Axis(0), perm),
            valid: self.valid.select(Axis(0), perm),
        }
    }
}

/// Builds positives from group identifiers.
///
/// Without a `sibling_map`, candidates are the anchors themselves: entry
/// `(i, i)` is excluded from both masks and `(i, j)` is positive iff the ids
/// match. With a `sibling_map`, candidates are a separate set, every
/// candidate is valid, and `sibling_map[i]` is always a positive of anchor
/// `i` in addition to candidates whose id matches.
pub fn build_positive_mask<L: PartialEq>(
    anchor_ids: &[L],
    candidate_ids: &[L],
    sibling_map: Option<&[usize]>,
) -> Result<PositiveMask> {
    if anchor_ids.is_empty() || candidate_ids.is_empty() {
        return Err(Error::InvalidInput("empty anchor or candidate list".into()));
    }
    let (n, m) = (anchor_ids.len(), candidate_ids.len());
    match sibling_map {
        None => {
            if n != m {
                return Err(Error::Shape(format!(
                    "in-batch contrast needs equal anchor and candidate counts ({n} vs {m})"
                )));
            }
            let valid = Array2::from_shape_fn((n, m), |(i, j)| i != j);
            let mask =
                Array2::from_shape_fn((n, m), |(i, j)| i != j && anchor_ids[i] == candidate_ids[j]);
            PositiveMask::new(mask, valid)
        }
        Some(siblings) => {
            if siblings.len() != n {
                return Err(Error::Shape(format!(
                    "sibling map has {} entries for {n} anchors",
                    siblings.len()
                )));
            }
            if let Some(&bad) = siblings.iter().find(|&&s| s >= m) {
                return Err(Error::InvalidInput(format!(
                    "sibling index {bad} out of range for {m} candidates"
                )));
            }
            let valid = Array2::from_elem((n, m), true);
            let mask = Array2::from_shape_fn((n, m), |(i, j)| {
                siblings[i] == j || anchor_ids[i] == candidate_ids[j]
            });
            PositiveMask::new(mask, valid)
        }
    }
}

/// Returns a copy of `x` with unit-length rows.
pub fn l2_normalize_rows(x: ArrayView2<'_, f64>, matrix: &'static str) -> Result<Array2<f64>> {
    let mut out = x.to_owned();
    for (row_idx, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm > NORM_EPS) {
            return Err(Error::ZeroNorm {
                matrix,
                row: row_idx,
            });
        }
        row /= norm;
    }
    Ok(out)
}

/// Pairwise cosine similarities, `(m, d) x (n, d) -> (m, n)`.
pub fn cosine_similarity_matrix(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if a.ncols() == 0 || a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "feature widths {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let an = l2_normalize_rows(a, "A")?;
    let bn = l2_normalize_rows(b, "B")?;
    Ok(an.dot(&bn.t()).mapv(|v| v.clamp(-1.0, 1.0)))
}

/// The candidate side of a contrast.
#[derive(Debug, Clone, Copy)]
pub enum Candidates<'a> {
    /// Anchors are contrasted against each other (in-batch).
    Anchors,
    /// Anchors are contrasted against a separate matrix (keys, queue).
    Separate(ArrayView2<'a, f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Reduced loss (sum or mean of `per_anchor`).
    pub total: f64,
    pub per_anchor: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LossGradient {
    pub loss: LossOutput,
    /// Gradient w.r.t. the raw (pre-normalization) anchor rows. For
    /// [`Candidates::Anchors`] it includes the candidate-side contribution.
    pub anchors: Array2<f64>,
    /// Gradient w.r.t. separate candidate rows, when there are any.
    pub candidates: Option<Array2<f64>>,
}

struct Forward {
    anchors: Array2<f64>,
    candidates: Option<Array2<f64>>,
    logits: Array2<f64>,
    lse: Vec<f64>,
    loss: LossOutput,
}

fn forward(
    anchors: ArrayView2<'_, f64>,
    candidates: Candidates<'_>,
    mask: &PositiveMask,
    cfg: &LossConfig,
) -> Result<Forward> {
    cfg.validate()?;
    let a = l2_normalize_rows(anchors, "anchors")?;
    let c = match candidates {
        Candidates::Anchors => None,
        Candidates::Separate(c) => {
            if c.ncols() != a.ncols() {
                return Err(Error::Shape(format!(
                    "anchor width {} vs candidate width {}",
                    a.ncols(),
                    c.ncols()
                )));
            }
            Some(l2_normalize_rows(c, "candidates")?)
        }
    };
    let cand = c.as_ref().unwrap_or(&a);
    if mask.num_anchors() != a.nrows() || mask.num_candidates() != cand.nrows() {
        return Err(Error::Shape(format!(
            "mask is {}x{} for {} anchors and {} candidates",
            mask.num_anchors(),
            mask.num_candidates(),
            a.nrows(),
            cand.nrows()
        )));
    }
    let inv_t = 1.0 / cfg.temperature;
    let logits = a.dot(&cand.t()) * inv_t;

    let n = a.nrows();
    let mut per_anchor = Vec::with_capacity(n);
    let mut lse = Vec::with_capacity(n);
    for i in 0..n {
        let row = logits.row(i);
        let valid = mask.valid.row(i);
        let pos = mask.mask.row(i);
        let mut max = f64::NEG_INFINITY;
        for (j, (&s, &v)) in row.iter().zip(valid.iter()).enumerate() {
            if !s.is_finite() {
                return Err(Error::NonFinite { row: i, col: j });
            }
            if v && s > max {
                max = s;
            }
        }
        let sum_exp: f64 = row
            .iter()
            .zip(valid.iter())
            .filter(|(_, &v)| v)
            .map(|(&s, _)| (s - max).exp())
            .sum();
        let log_denom = max + sum_exp.ln();
        let (pos_sum, pos_count) = row
            .iter()
            .zip(pos.iter())
            .filter(|(_, &p)| p)
            .fold((0.0, 0usize), |(acc, k), (&s, _)| (acc + s, k + 1));
        if pos_count == 0 {
            return Err(Error::NoPositives { anchor: i });
        }
        per_anchor.push(log_denom - pos_sum / pos_count as f64);
        lse.push(log_denom);
    }
    let sum: f64 = per_anchor.iter().sum();
    let total = match cfg.reduction {
        Reduction::Sum => sum,
        Reduction::Mean => sum / n as f64,
    };
    Ok(Forward {
        anchors: a,
        candidates: c,
        logits,
        lse,
        loss: LossOutput { total, per_anchor },
    })
}

/// Evaluates the loss. Rows are L2-normalized internally.
pub fn contrastive_loss(
    anchors: ArrayView2<'_, f64>,
    candidates: Candidates<'_>,
    mask: &PositiveMask,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    forward(anchors, candidates, mask, cfg).map(|f| f.loss)
}

/// Loss together with its closed-form gradient w.r.t. the raw input rows.
pub fn contrastive_loss_gradient(
    anchors: ArrayView2<'_, f64>,
    candidates: Candidates<'_>,
    mask: &PositiveMask,
    cfg: &LossConfig,
) -> Result<LossGradient> {
    let fwd = forward(anchors, candidates, mask, cfg)?;
    let n = fwd.anchors.nrows();
    let scale = match cfg.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / n as f64,
    };
    let counts = mask.positives_per_anchor();

    // dL/dlogits: softmax over valid candidates minus the uniform positive weight.
    let mut dlogits = Array2::<f64>::zeros(fwd.logits.dim());
    for ((i, j), d) in dlogits.indexed_iter_mut() {
        if mask.valid[[i, j]] {
            let p = (fwd.logits[[i, j]] - fwd.lse[i]).exp();
            let target = if mask.mask[[i, j]] {
                1.0 / counts[i] as f64
            } else {
                0.0
            };
            *d = scale * (p - target);
        }
    }
    let inv_t = 1.0 / cfg.temperature;
    let cand = fwd.candidates.as_ref().unwrap_or(&fwd.anchors);
    let mut g_anchor = dlogits.dot(cand) * inv_t;
    let g_cand = dlogits.t().dot(&fwd.anchors) * inv_t;

    let (anchors_grad, candidates_grad) = match candidates {
        Candidates::Anchors => {
            g_anchor += &g_cand;
            (normalize_backward(&fwd.anchors, &g_anchor, anchors), None)
        }
        Candidates::Separate(raw) => (
            normalize_backward(&fwd.anchors, &g_anchor, anchors),
            Some(normalize_backward(cand, &g_cand, raw)),
        ),
    };
    Ok(LossGradient {
        loss: fwd.loss,
        anchors: anchors_grad,
        candidates: candidates_grad,
    })
}

/// Pulls a gradient on `u = x / |x|` back to `x`: `(g - u (u.g)) / |x|`.
fn normalize_backward(unit: &Array2<f64>, grad: &Array2<f64>, raw: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = grad.clone();
    for ((mut o, u), x) in out
        .axis_iter_mut(Axis(0))
        .zip(unit.axis_iter(Axis(0)))
        .zip(raw.axis_iter(Axis(0)))
    {
        let norm = x.dot(&x).sqrt();
        let proj = u.dot(&o);
        o.zip_mut_with(&u, |g, &uu| *g = (*g - uu * proj) / norm);
    }
    out
}

/// The `2N` projected views of one batch, interleaved so that views `2i`
/// and `2i + 1` are the two augmentations of image `i`.
#[derive(Debug, Clone)]
pub struct RepresentationBatch {
    z: Array2<f64>,
    patient_ids: Vec<String>,
    view_pair_index: Vec<usize>,
}

impl RepresentationBatch {
    /// Normalizes rows and checks that sibling views share a patient.
    pub fn new(z: Array2<f64>, patient_ids: Vec<String>, view_pair_index: Vec<usize>) -> Result<Self> {
        let n = z.nrows();
        if patient_ids.len() != n || view_pair_index.len() != n {
            return Err(Error::Shape(format!(
                "{n} vectors, {} patient ids, {} pair indices",
                patient_ids.len(),
                view_pair_index.len()
            )));
        }
        for (i, &s) in view_pair_index.iter().enumerate() {
            if s >= n || s == i || view_pair_index[s] != i {
                return Err(Error::InvalidInput(format!(
                    "view {i} has invalid sibling {s}"
                )));
            }
            if patient_ids[s] != patient_ids[i] {
                return Err(Error::InvalidInput(format!(
                    "views {i} and {s} are siblings but belong to different patients"
                )));
            }
        }
        let z = l2_normalize_rows(z.view(), "representations")?;
        Ok(Self {
            z,
            patient_ids,
            view_pair_index,
        })
    }

    /// Pairs views `(2i, 2i + 1)`; `patient_ids` is per view.
    pub fn interleaved(z: Array2<f64>, patient_ids: Vec<String>) -> Result<Self> {
        if !z.nrows().is_multiple_of(2) {
            return Err(Error::Shape(format!("{} views is not even", z.nrows())));
        }
        let pairs = (0..z.nrows()).map(|i| i ^ 1).collect();
        Self::new(z, patient_ids, pairs)
    }

    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.z.view()
    }

    pub fn patient_ids(&self) -> &[String] {
        &self.patient_ids
    }

    pub fn sibling(&self, view: usize) -> usize {
        self.view_pair_index[view]
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    /// In-batch positives under `rule`.
    pub fn positive_mask(&self, rule: PositiveRule) -> Result<PositiveMask> {
        match rule {
            PositiveRule::SamePatient => {
                build_positive_mask(&self.patient_ids, &self.patient_ids, None)
            }
            PositiveRule::SiblingOnly => {
                let pair_ids: Vec<usize> = (0..self.len())
                    .map(|i| i.min(self.view_pair_index[i]))
                    .collect();
                build_positive_mask(&pair_ids, &pair_ids, None)
            }
        }
    }

    pub fn loss(&self, rule: PositiveRule, cfg: &LossConfig) -> Result<LossOutput> {
        contrastive_loss(self.z.view(), Candidates::Anchors, &self.positive_mask(rule)?, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    /// Straight-line transcription of the per-anchor formula: loops, no
    /// stabilization, explicit normalization.
    fn scalar_oracle(
        anchors: &Array2<f64>,
        candidates: Option<&Array2<f64>>,
        mask: &PositiveMask,
        tau: f64,
    ) -> Vec<f64> {
        let cand = candidates.unwrap_or(anchors);
        let cos = |u: ndarray::ArrayView1<f64>, v: ndarray::ArrayView1<f64>| {
            let mut dot = 0.0;
            let mut nu = 0.0;
            let mut nv = 0.0;
            for k in 0..u.len() {
                dot += u[k] * v[k];
                nu += u[k] * u[k];
                nv += v[k] * v[k];
            }
            dot / (nu.sqrt() * nv.sqrt())
        };
        let mut out = vec![];
        for i in 0..anchors.nrows() {
            let mut denom = 0.0;
            for k in 0..cand.nrows() {
                if mask.valid()[[i, k]] {
                    denom += (cos(anchors.row(i), cand.row(k)) / tau).exp();
                }
            }
            let mut acc = 0.0;
            let mut count = 0.0;
            for j in 0..cand.nrows() {
                if mask.mask()[[i, j]] {
                    acc += ((cos(anchors.row(i), cand.row(j)) / tau).exp() / denom).ln();
                    count += 1.0;
                }
            }
            out.push(-acc / count);
        }
        out
    }

    fn ids(s: &str) -> Vec<String> {
        s.chars().map(|c| c.to_string()).collect()
    }

    #[test]
    fn cosine_examples() {
        let a = array![[1.0, 0.0], [0.0, 1.0]];
        let r = 0.5f64.sqrt();
        let b = array![[r, r]];
        let s = cosine_similarity_matrix(a.view(), b.view()).unwrap();
        assert_abs_diff_eq!(s[[0, 0]], r, epsilon = 1e-12);
        assert_abs_diff_eq!(s[[1, 0]], r, epsilon = 1e-12);
        let s = cosine_similarity_matrix(a.view(), a.view()).unwrap();
        assert_eq!(s[[0, 0]], 1.0);
        assert_eq!(s[[0, 1]], 0.0);
    }

    #[test]
    fn cosine_rejects_zero_rows() {
        let a = array![[1.0, 0.0], [0.0, 0.0]];
        let err = cosine_similarity_matrix(a.view(), a.view()).unwrap_err();
        assert!(matches!(err, Error::ZeroNorm { matrix: "A", row: 1 }), "{err}");
    }

    #[test]
    fn sibling_only_mask_for_single_images() {
        let m = build_positive_mask(&ids("AABB"), &ids("AABB"), None).unwrap();
        assert_eq!(m.positives_per_anchor(), vec![1; 4]);
        assert!(m.mask()[[0, 1]] && m.mask()[[2, 3]]);
        assert!((0..4).all(|i| !m.valid()[[i, i]]));
    }

    #[test]
    fn two_images_per_patient_give_three_positives() {
        let m = build_positive_mask(&ids("AAAABBBB"), &ids("AAAABBBB"), None).unwrap();
        assert_eq!(m.positives_per_anchor(), vec![3; 8]);
        assert_eq!(m.valid_per_anchor(), vec![7; 8]);
    }

    #[test]
    fn queue_candidates_with_sibling_appended() {
        let m = build_positive_mask(&ids("A"), &ids("ABAA"), Some(&[3])).unwrap();
        let row: Vec<bool> = m.mask().row(0).to_vec();
        assert_eq!(row, vec![true, false, true, true]);
    }

    #[test]
    fn anchors_without_positives_are_rejected() {
        let err = build_positive_mask(&ids("AB"), &ids("AB"), None).unwrap_err();
        assert!(matches!(err, Error::NoPositives { anchor: 0 }));
    }

    #[test]
    fn identical_pair_has_zero_loss_and_gradient() {
        let z = array![[0.3, -0.4, 1.2], [0.3, -0.4, 1.2]];
        let m = build_positive_mask(&ids("AA"), &ids("AA"), None).unwrap();
        let g = contrastive_loss_gradient(z.view(), Candidates::Anchors, &m, &LossConfig::default())
            .unwrap();
        assert_eq!(g.loss.total, 0.0);
        assert_eq!(g.loss.per_anchor, vec![0.0, 0.0]);
        assert!(g.anchors.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn axis_aligned_example() {
        let z = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        let m = build_positive_mask(&ids("AABB"), &ids("AABB"), None).unwrap();
        let cfg = LossConfig {
            temperature: 1.0,
            reduction: Reduction::Mean,
        };
        let out = contrastive_loss(z.view(), Candidates::Anchors, &m, &cfg).unwrap();
        let expected = (1.0 + 2.0 / std::f64::consts::E).ln();
        assert_abs_diff_eq!(out.total, expected, epsilon = 1e-12);
        for l in out.per_anchor {
            assert_abs_diff_eq!(l, expected, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(expected, 0.5514, epsilon = 1e-4);
    }

    #[test]
    fn default_temperature() {
        assert_eq!(LossConfig::default().temperature, 0.1);
        assert!(LossConfig {
            temperature: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn mean_gradient_is_sum_gradient_over_anchor_count() {
        let z = array![[1.0, 0.2], [0.9, 0.1], [-0.3, 1.0], [0.1, 0.8]];
        let m = build_positive_mask(&ids("AABB"), &ids("AABB"), None).unwrap();
        let sum = LossConfig {
            temperature: 0.5,
            reduction: Reduction::Sum,
        };
        let mean = LossConfig {
            reduction: Reduction::Mean,
            ..sum
        };
        let gs = contrastive_loss_gradient(z.view(), Candidates::Anchors, &m, &sum).unwrap();
        let gm = contrastive_loss_gradient(z.view(), Candidates::Anchors, &m, &mean).unwrap();
        for (a, b) in gs.anchors.iter().zip(gm.anchors.iter()) {
            assert_abs_diff_eq!(a / 4.0, *b, epsilon = 1e-15);
        }
    }

    #[test]
    fn temperature_sharpens_loss_at_the_optimum() {
        // positives at similarity 1, negatives at -1
        let z = array![[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]];
        let m = build_positive_mask(&ids("AABB"), &ids("AABB"), None).unwrap();
        let mut prev = f64::INFINITY;
        for tau in [2.0, 1.0, 0.5, 0.2, 0.1, 0.05] {
            let cfg = LossConfig {
                temperature: tau,
                ..Default::default()
            };
            let l = contrastive_loss(z.view(), Candidates::Anchors, &m, &cfg).unwrap().total;
            assert!(l < prev, "tau {tau}: {l} !< {prev}");
            prev = l;
        }
    }

    #[test]
    fn small_temperature_stays_finite() {
        // antipodal positives: logits reach -1/0.01
        let z = array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        let m = build_positive_mask(&ids("AABB"), &ids("AABB"), None).unwrap();
        let cfg = LossConfig {
            temperature: 0.01,
            ..Default::default()
        };
        let g = contrastive_loss_gradient(z.view(), Candidates::Anchors, &m, &cfg).unwrap();
        assert!(g.loss.total.is_finite() && g.loss.total > 50.0);
        assert!(g.anchors.iter().all(|v| v.is_finite()));
    }

    fn batch_strategy() -> impl Strategy<Value = (Array2<f64>, Vec<usize>, f64)> {
        (1usize..=4, 2usize..=4, prop::sample::select(vec![0.1, 0.5, 1.0])).prop_flat_map(
            |(pairs, d, tau)| {
                let n = 2 * pairs;
                (
                    prop::collection::vec(-1.0f64..1.0, n * d)
                        .prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap()),
                    prop::collection::vec(0usize..3, pairs),
                    Just(tau),
                )
            },
        )
        .prop_filter("non-degenerate rows", |(z, _, _)| {
            z.axis_iter(Axis(0)).all(|r| r.dot(&r) > 1e-3)
        })
    }

    fn view_ids(groups: &[usize]) -> Vec<usize> {
        groups.iter().flat_map(|&g| [g, g]).collect()
    }

    proptest! {
        #[test]
        fn vectorized_loss_matches_scalar_oracle((z, groups, tau) in batch_strategy()) {
            let ids = view_ids(&groups);
            let m = build_positive_mask(&ids, &ids, None).unwrap();
            let cfg = LossConfig { temperature: tau, reduction: Reduction::Sum };
            let out = contrastive_loss(z.view(), Candidates::Anchors, &m, &cfg).unwrap();
            let oracle = scalar_oracle(&z, None, &m, tau);
            for (a, b) in out.per_anchor.iter().zip(&oracle) {
                prop_assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
            }
            prop_assert!((out.total - oracle.iter().sum::<f64>()).abs() < 1e-6);
        }

        #[test]
        fn permuting_anchors_permutes_losses((z, groups, tau) in batch_strategy(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let ids = view_ids(&groups);
            let n = ids.len();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let keys = z.clone();
            let m = build_positive_mask(&ids, &ids, None).unwrap();
            let cfg = LossConfig { temperature: tau, reduction: Reduction::Sum };
            let base = contrastive_loss(z.view(), Candidates::Separate(keys.view()), &m, &cfg).unwrap();
            let zp = z.select(Axis(0), &perm);
            let mp = m.permute_anchors(&perm);
            let moved = contrastive_loss(zp.view(), Candidates::Separate(keys.view()), &mp, &cfg).unwrap();
            for (i, &p) in perm.iter().enumerate() {
                prop_assert!((moved.per_anchor[i] - base.per_anchor[p]).abs() < 1e-12);
            }
            prop_assert!((moved.total - base.total).abs() < 1e-9);
        }

        #[test]
        fn separate_candidates_match_oracle((z, groups, tau) in batch_strategy()) {
            let ids = view_ids(&groups);
            let keys = z.mapv(|v| v * 0.5 + 0.1);
            prop_assume!(keys.axis_iter(Axis(0)).all(|r| r.dot(&r) > 1e-3));
            let siblings: Vec<usize> = (0..ids.len()).map(|i| i ^ 1).collect();
            let m = build_positive_mask(&ids, &ids, Some(&siblings)).unwrap();
            let cfg = LossConfig { temperature: tau, reduction: Reduction::Sum };
            let out = contrastive_loss(z.view(), Candidates::Separate(keys.view()), &m, &cfg).unwrap();
            let oracle = scalar_oracle(&z, Some(&keys), &m, tau);
            for (a, b) in out.per_anchor.iter().zip(&oracle) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let z = array![[1.0, 0.3, -0.2], [0.7, 0.5, 0.1], [-0.4, 1.0, 0.6], [0.2, 0.9, -0.8]];
        let keys = array![[0.5, 0.5, 0.5], [0.1, -0.2, 0.9], [-1.0, 0.1, 0.2]];
        let cfg = LossConfig {
            temperature: 0.5,
            reduction: Reduction::Mean,
        };
        let in_batch = build_positive_mask(&ids("AABB"), &ids("AABB"), None).unwrap();
        let split = build_positive_mask(&ids("AABB"), &ids("ABA"), Some(&[0, 2, 1, 1])).unwrap();
        let h = 1e-5;

        let g = contrastive_loss_gradient(z.view(), Candidates::Anchors, &in_batch, &cfg).unwrap();
        for idx in ndarray::indices(z.dim()) {
            let mut zp = z.clone();
            zp[idx] += h;
            let mut zm = z.clone();
            zm[idx] -= h;
            let f = |x: &Array2<f64>| {
                contrastive_loss(x.view(), Candidates::Anchors, &in_batch, &cfg).unwrap().total
            };
            let fd = (f(&zp) - f(&zm)) / (2.0 * h);
            assert_abs_diff_eq!(fd, g.anchors[idx], epsilon = 1e-7);
        }

        let g = contrastive_loss_gradient(z.view(), Candidates::Separate(keys.view()), &split, &cfg)
            .unwrap();
        let gk = g.candidates.unwrap();
        for idx in ndarray::indices(keys.dim()) {
            let mut kp = keys.clone();
            kp[idx] += h;
            let mut km = keys.clone();
            km[idx] -= h;
            let f = |k: &Array2<f64>| {
                contrastive_loss(z.view(), Candidates::Separate(k.view()), &split, &cfg)
                    .unwrap()
                    .total
            };
            let fd = (f(&kp) - f(&km)) / (2.0 * h);
            assert_abs_diff_eq!(fd, gk[idx], epsilon = 1e-7);
        }
    }

    #[test]
    fn batch_rejects_cross_patient_siblings() {
        let z = Array2::ones((2, 2));
        let err = RepresentationBatch::interleaved(z, ids("AB")).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn sibling_rule_ignores_patient_matches() {
        let z = array![[1.0, 0.0], [0.9, 0.1], [0.8, 0.3], [0.7, 0.2]];
        let b = RepresentationBatch::interleaved(z, ids("AAAA")).unwrap();
        assert_eq!(b.positive_mask(PositiveRule::SiblingOnly).unwrap().positives_per_anchor(), vec![1; 4]);
        assert_eq!(b.positive_mask(PositiveRule::SamePatient).unwrap().positives_per_anchor(), vec![3; 4]);
        let norms: Vec<f64> = b.vectors().axis_iter(Axis(0)).map(|r| r.dot(&r).sqrt()).collect();
        assert!(norms.iter().all(|n| (n - 1.0).abs() < 1e-12));
    }
}
