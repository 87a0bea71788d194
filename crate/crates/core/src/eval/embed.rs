use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::models::{import_params, Checkpoint, Encoder};
use crate::train::encode_dataset;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: Array2<f32>,
    pub patient_ids: Vec<String>,
    pub image_ids: Vec<String>,
}

impl EmbeddingSet {
    pub fn new(vectors: Array2<f32>, patient_ids: Vec<String>, image_ids: Vec<String>) -> Result<Self> {
        if vectors.nrows() != patient_ids.len() || vectors.nrows() != image_ids.len() {
            return Err(Error::Shape(format!(
                "{} vectors, {} patient ids, {} image ids",
                vectors.nrows(),
                patient_ids.len(),
                image_ids.len()
            )));
        }
        Ok(Self {
            vectors,
            patient_ids,
            image_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pooled encoder features (not projections) of every record, without
/// augmentation.
pub fn export_embeddings(data: &Dataset, ckpt: &Checkpoint) -> Result<EmbeddingSet> {
    let spec = ckpt.meta.encoder.clone();
    if spec.input_size != data.size {
        return Err(Error::Config(format!(
            "checkpoint encoder expects {} px images, dataset has {}",
            spec.input_size, data.size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut encoder = Encoder::new(spec, &mut rng)?;
    import_params(&mut encoder, &ckpt.arrays, "")?;
    let vectors = encode_dataset(&encoder, data, 16)?;
    let recs = data.manifest.records();
    EmbeddingSet::new(
        vectors,
        recs.iter().map(|r| r.patient_id.clone()).collect(),
        recs.iter().map(|r| r.image_id.clone()).collect(),
    )
}

fn cosine_matrix(v: &Array2<f32>) -> Array2<f64> {
    let v = v.mapv(f64::from);
    let norms: Vec<f64> = v.axis_iter(Axis(0)).map(|r| r.dot(&r).sqrt().max(1e-12)).collect();
    let mut s = v.dot(&v.t());
    for ((i, j), x) in s.indexed_iter_mut() {
        *x /= norms[i] * norms[j];
    }
    s
}

fn purity_with(sim: &Array2<f64>, labels: &[&str], k: usize) -> f64 {
    let n = labels.len();
    let mut hits = 0;
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        // Stable sort keeps lower indices first among ties.
        order.sort_by(|&a, &b| sim[[i, b]].total_cmp(&sim[[i, a]]));
        let same = order[..k].iter().filter(|&&j| labels[j] == labels[i]).count();
        if 2 * same > k {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if n <= 1 {
        return Err(Error::InvalidInput("purity needs at least two embeddings".into()));
    }
    if k == 0 || k >= n {
        return Err(Error::InvalidInput(format!("k must lie in 1..{n}, got {k}")));
    }
    Ok(())
}

/// Fraction of points whose `k` cosine-nearest neighbours (self excluded)
/// are mostly, i.e. more than half, from the same patient.
pub fn patient_cluster_purity(emb: &EmbeddingSet, k: usize) -> Result<f64> {
    check_k(emb.len(), k)?;
    let labels: Vec<&str> = emb.patient_ids.iter().map(String::as_str).collect();
    Ok(purity_with(&cosine_matrix(&emb.vectors), &labels, k))
}

/// Mean purity over `permutations` random relabelings of the patient ids,
/// i.e. the chance level for this patient-size distribution.
pub fn shuffled_purity(emb: &EmbeddingSet, k: usize, permutations: usize, seed: u64) -> Result<f64> {
    check_k(emb.len(), k)?;
    if permutations == 0 {
        return Err(Error::InvalidInput("need at least one permutation".into()));
    }
    let sim = cosine_matrix(&emb.vectors);
    let mut labels: Vec<&str> = emb.patient_ids.iter().map(String::as_str).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..permutations {
        labels.shuffle(&mut rng);
        total += purity_with(&sim, &labels, k);
    }
    Ok(total / permutations as f64)
}

/// Projection onto the two leading principal components.
pub fn pca_2d(v: &Array2<f32>) -> Result<Array2<f64>> {
    let (n, d) = v.dim();
    if n == 0 || d == 0 {
        return Err(Error::InvalidInput("empty embedding matrix".into()));
    }
    let v = v.mapv(f64::from);
    let mean = v.mean_axis(Axis(0)).expect("non-empty");
    let centered = &v - &mean;
    let cov = centered.t().dot(&centered) / n.max(2).saturating_sub(1) as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut out = Array2::zeros((n, 2));
    for (c, &e) in order.iter().take(2).enumerate() {
        let axis: Vec<f64> = eig.eigenvectors.column(e).iter().copied().collect();
        let axis = ArrayView1::from(&axis);
        out.column_mut(c).assign(&centered.dot(&axis));
    }
    Ok(out)
}

/// CSV with columns `image_id,patient_id,v0..v{d-1}`.
pub fn write_embeddings_csv(emb: &EmbeddingSet, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["image_id".to_string(), "patient_id".to_string()];
    header.extend((0..emb.vectors.ncols()).map(|i| format!("v{i}")));
    w.write_record(&header)?;
    for (i, row) in emb.vectors.axis_iter(Axis(0)).enumerate() {
        let mut rec = vec![emb.image_ids[i].clone(), emb.patient_ids[i].clone()];
        rec.extend(row.iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_embeddings_csv(path: &Path) -> Result<EmbeddingSet> {
    let mut r = csv::Reader::from_path(path)?;
    let d = r.headers()?.len().saturating_sub(2);
    let (mut image_ids, mut patient_ids, mut flat) = (vec![], vec![], vec![]);
    for rec in r.records() {
        let rec = rec?;
        image_ids.push(rec[0].to_string());
        patient_ids.push(rec[1].to_string());
        for x in rec.iter().skip(2) {
            flat.push(
                x.parse::<f32>()
                    .map_err(|e| Error::InvalidInput(format!("{}: bad value {x:?}: {e}", path.display())))?,
            );
        }
    }
    let vectors = Array2::from_shape_vec((image_ids.len(), d), flat)
        .map_err(|e| Error::Shape(format!("{}: {e}", path.display())))?;
    EmbeddingSet::new(vectors, patient_ids, image_ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn set(v: Array2<f32>, ids: &[&str]) -> EmbeddingSet {
        let n = ids.len();
        EmbeddingSet::new(
            v,
            ids.iter().map(|s| s.to_string()).collect(),
            (0..n).map(|i| format!("img{i}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn antipodal_clusters_are_pure() {
        let v = array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]];
        let e = set(v, &["A", "A", "A", "A", "B", "B", "B", "B"]);
        assert_eq!(patient_cluster_purity(&e, 3).unwrap(), 1.0);
    }

    #[test]
    fn k1_is_nearest_neighbour_match_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = Array2::from_shape_fn((12, 4), |_| rng.random_range(-1.0..1.0f32));
        let ids = ["A", "A", "A", "B", "B", "B", "C", "C", "C", "D", "D", "D"];
        let e = set(v.clone(), &ids);
        let sim = cosine_matrix(&v);
        let mut hits = 0;
        for i in 0..12 {
            let j = (0..12)
                .filter(|&j| j != i)
                .max_by(|&a, &b| sim[[i, a]].total_cmp(&sim[[i, b]]).then(b.cmp(&a)))
                .unwrap();
            hits += (ids[i] == ids[j]) as usize;
        }
        assert_eq!(patient_cluster_purity(&e, 1).unwrap(), hits as f64 / 12.0);
    }

    #[test]
    fn purity_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = Array2::from_shape_fn((16, 3), |_| rng.random_range(-1.0..1.0f64));
        let (c, s) = (0.6f64, 0.8f64);
        let rot = array![[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        let ids: Vec<String> = (0..16).map(|i| format!("P{}", i / 4)).collect();
        let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
        let a = set(v.mapv(|x| x as f32), &ids);
        let b = set(v.dot(&rot).mapv(|x| x as f32), &ids);
        for k in 1..5 {
            assert_eq!(
                patient_cluster_purity(&a, k).unwrap(),
                patient_cluster_purity(&b, k).unwrap()
            );
        }
    }

    #[test]
    fn shuffled_purity_is_near_chance_for_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = Array2::from_shape_fn((32, 8), |_| rng.random_range(-1.0..1.0f32));
        let ids: Vec<String> = (0..32).map(|i| format!("P{}", i / 4)).collect();
        let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
        let chance = shuffled_purity(&set(v, &ids), 3, 100, 0).unwrap();
        // P(>=2 of 3 neighbours from own 3 siblings among 31) is about 0.06
        assert!(chance < 0.2, "{chance}");
    }

    #[test]
    fn degenerate_inputs() {
        let e = set(array![[1.0, 0.0]], &["A"]);
        assert!(patient_cluster_purity(&e, 1).is_err());
        let e = set(array![[1.0, 0.0], [0.0, 1.0]], &["A", "B"]);
        assert!(patient_cluster_purity(&e, 2).is_err());
    }

    #[test]
    fn pca_recovers_dominant_axis() {
        let v = array![[-2.0f32, 0.1, 0.0], [2.0, -0.1, 0.0], [-1.0, 0.0, 0.05], [1.0, 0.0, -0.05]];
        let p = pca_2d(&v).unwrap();
        assert_eq!(p.dim(), (4, 2));
        assert!((p[[0, 0]].abs() - 2.0).abs() < 0.01);
    }

    #[test]
    fn csv_round_trip() {
        let e = set(array![[0.1f32, -2.5e-7], [3.0, 4.0]], &["A", "B"]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        write_embeddings_csv(&e, &p).unwrap();
        assert_eq!(read_embeddings_csv(&p).unwrap(), e);
    }
}
