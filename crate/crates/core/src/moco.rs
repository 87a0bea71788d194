//! Momentum key encoder and the patient-labeled key dictionary.

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::contrastive::{PositiveMask, PositiveRule};
use crate::nn::Module;
use crate::{Error, Result};

/// Tolerance on stored key norms.
pub const UNIT_NORM_TOL: f32 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoCoConfig {
    pub momentum: f32,
    pub queue_capacity: usize,
}

impl Default for MoCoConfig {
    fn default() -> Self {
        Self {
            momentum: 0.999,
            queue_capacity: 256,
        }
    }
}

impl MoCoConfig {
    pub const FULL_SCALE_CAPACITY: usize = 4096;

    pub fn validate(&self, keys_per_step: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1], got {}",
                self.momentum
            )));
        }
        if self.queue_capacity < keys_per_step {
            return Err(Error::Config(format!(
                "queue capacity {} is below the {keys_per_step} keys enqueued per step",
                self.queue_capacity
            )));
        }
        Ok(())
    }
}

/// `key = m * key + (1 - m) * query` for every parameter, matched by name.
pub fn momentum_update<K, Q>(key: &mut K, query: &Q, m: f32) -> Result<()>
where
    K: Module + ?Sized,
    Q: Module + ?Sized,
{
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("momentum {m} outside [0, 1]")));
    }
    let query = query.params();
    let mut key = key.params_mut();
    if key.len() != query.len() {
        return Err(Error::Shape(format!(
            "key has {} arrays, query has {}",
            key.len(),
            query.len()
        )));
    }
    for (k, q) in key.iter().zip(&query) {
        if k.name() != q.name() || k.value.shape() != q.value.shape() {
            return Err(Error::Shape(format!(
                "key array {} {:?} does not match query array {} {:?}",
                k.name(),
                k.value.shape(),
                q.name(),
                q.value.shape()
            )));
        }
    }
    for (k, q) in key.iter_mut().zip(&query) {
        k.value.zip_mut_with(&q.value, |kv, &qv| *kv = m * *kv + (1.0 - m) * qv);
    }
    Ok(())
}

/// Fixed-capacity FIFO of unit vectors, each tagged with a patient label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledQueue {
    vectors: Array2<f32>,
    labels: Vec<String>,
    len: usize,
    /// Slot the next key is written to.
    cursor: usize,
}

impl LabeledQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config("queue capacity and width must be positive".into()));
        }
        Ok(Self {
            vectors: Array2::zeros((capacity, dim)),
            labels: vec![String::new(); capacity],
            len: 0,
            cursor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len == self.capacity()
    }

    /// Appends `keys` in row order, evicting the oldest entries when full.
    pub fn enqueue(&mut self, keys: ArrayView2<'_, f32>, labels: &[String]) -> Result<()> {
        let k = keys.nrows();
        if k != labels.len() {
            return Err(Error::Shape(format!("{k} keys with {} labels", labels.len())));
        }
        if k > self.capacity() {
            return Err(Error::InvalidInput(format!(
                "cannot enqueue {k} keys into a queue of capacity {}",
                self.capacity()
            )));
        }
        if keys.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "key width {} vs queue width {}",
                keys.ncols(),
                self.dim()
            )));
        }
        for (i, row) in keys.axis_iter(Axis(0)).enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidInput(format!(
                    "key {i} has norm {norm}, expected unit length"
                )));
            }
        }
        for (row, label) in keys.axis_iter(Axis(0)).zip(labels) {
            self.vectors.row_mut(self.cursor).assign(&row);
            self.labels[self.cursor].clone_from(label);
            self.cursor = (self.cursor + 1) % self.capacity();
            self.len = (self.len + 1).min(self.capacity());
        }
        Ok(())
    }

    /// Slot indices from oldest to newest.
    fn order(&self) -> impl Iterator<Item = usize> + '_ {
        let cap = self.capacity();
        let start = (self.cursor + cap - self.len) % cap;
        (0..self.len).map(move |i| (start + i) % cap)
    }

    /// Stored vectors, oldest first.
    pub fn snapshot(&self) -> Array2<f32> {
        let order: Vec<usize> = self.order().collect();
        self.vectors.select(Axis(0), &order)
    }

    /// Stored labels, oldest first.
    pub fn labels(&self) -> Vec<String> {
        self.order().map(|i| self.labels[i].clone()).collect()
    }

    /// Rebuilds a queue from an oldest-first snapshot.
    pub fn from_snapshot(capacity: usize, vectors: ArrayView2<'_, f32>, labels: &[String]) -> Result<Self> {
        let mut q = Self::new(capacity, vectors.ncols())?;
        q.enqueue(vectors, labels)?;
        Ok(q)
    }
}

/// Candidates for momentum contrast.
#[derive(Debug, Clone)]
pub struct QueueCandidates {
    /// Rows `0..n` are the sibling keys (row `i` belongs to anchor `i`),
    /// followed by the queue snapshot, oldest first.
    pub vectors: Array2<f32>,
    pub labels: Vec<String>,
    pub mask: PositiveMask,
}

/// Each anchor sees its own sibling key followed by the whole queue.
///
/// The sibling is always positive. Queue entries are positive when their
/// label equals the anchor's under [`PositiveRule::SamePatient`], and never
/// under [`PositiveRule::SiblingOnly`]. Sibling keys of other anchors are
/// not valid candidates.
pub fn queue_candidates(
    queue: &LabeledQueue,
    anchor_labels: &[String],
    sibling_keys: ArrayView2<'_, f32>,
    rule: PositiveRule,
) -> Result<QueueCandidates> {
    let n = anchor_labels.len();
    if sibling_keys.nrows() != n {
        return Err(Error::Shape(format!(
            "{} sibling keys for {n} anchors",
            sibling_keys.nrows()
        )));
    }
    if sibling_keys.ncols() != queue.dim() {
        return Err(Error::Shape(format!(
            "key width {} vs queue width {}",
            sibling_keys.ncols(),
            queue.dim()
        )));
    }
    let q = queue.len();
    let mut vectors = Array2::<f32>::zeros((n + q, queue.dim()));
    vectors.slice_mut(s![..n, ..]).assign(&sibling_keys);
    vectors.slice_mut(s![n.., ..]).assign(&queue.snapshot());
    let queue_labels = queue.labels();
    let valid = Array2::from_shape_fn((n, n + q), |(i, j)| j >= n || j == i);
    let mask = Array2::from_shape_fn((n, n + q), |(i, j)| {
        if j < n {
            j == i
        } else {
            rule == PositiveRule::SamePatient && queue_labels[j - n] == anchor_labels[i]
        }
    });
    let labels = anchor_labels.iter().cloned().chain(queue_labels).collect();
    Ok(QueueCandidates {
        vectors,
        labels,
        mask: PositiveMask::new(mask, valid)?,
    })
}
