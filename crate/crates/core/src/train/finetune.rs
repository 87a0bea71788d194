//! Supervised segmentation fine-tuning under an annotation budget.

use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, AdamConfig, Optimizer};
use super::pretrain::stack_images;
use super::schedule::cosine_lr;
use crate::augment::{augment_pair, AugmentConfig};
use crate::data::{Dataset, Manifest, NUM_CLASSES};
use crate::eval::{per_class_dice, DiceReport};
use crate::models::{transfer_encoder, Checkpoint, EncoderSpec, TransferReport, UNet};
use crate::nn::Module;
use crate::{Error, Result};

/// Additive smoothing of the soft Dice ratio.
const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    /// Annotation budgets to sweep. An empty list means the whole training
    /// fold.
    #[serde(rename = "M")]
    pub budgets: Vec<usize>,
    pub folds: usize,
    pub augment: AugmentConfig,
    /// Encoder used for random initialization. A checkpoint brings its own.
    pub encoder: EncoderSpec,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self::desk(64)
    }
}

impl FinetuneConfig {
    /// Minutes-scale preset: 60 epochs on the tiny encoder. The step size is
    /// raised from the full-scale value because a few dozen steps at 5e-5
    /// barely move a freshly initialized decoder.
    pub fn desk(image_size: usize) -> Self {
        Self {
            epochs: 60,
            batch_size: 10,
            lr: 2e-3,
            adam: AdamConfig::default(),
            budgets: vec![4],
            folds: 5,
            augment: AugmentConfig::finetuning(),
            encoder: EncoderSpec::tiny(image_size),
        }
    }

    pub fn full() -> Self {
        Self {
            epochs: 200,
            batch_size: 10,
            lr: 5e-5,
            adam: AdamConfig::default(),
            budgets: vec![],
            folds: 5,
            augment: AugmentConfig::finetuning(),
            encoder: EncoderSpec::unet(256),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.folds < 2 {
            return Err(Error::Config("need at least two folds".into()));
        }
        if self.budgets.contains(&0) {
            return Err(Error::Config("annotation budget M must be positive".into()));
        }
        self.augment.validate()?;
        self.encoder.validate()
    }
}

/// Validation fold of every record. Patients are shuffled with `seed` and
/// dealt round-robin, so each patient lands in exactly one fold.
pub fn assign_folds(manifest: &Manifest, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::Config("need at least two folds".into()));
    }
    if manifest.num_patients() < folds {
        return Err(Error::InvalidInput(format!(
            "{} patients cannot fill {folds} folds",
            manifest.num_patients()
        )));
    }
    let mut patients: Vec<&str> = manifest.patients().collect();
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![0; manifest.len()];
    for (p, patient) in patients.iter().enumerate() {
        for &r in manifest.records_of(patient) {
            out[r] = p % folds;
        }
    }
    Ok(out)
}

/// Record indices of the training and validation sides of `fold`.
pub fn fold_split(assignment: &[usize], fold: usize) -> (Vec<usize>, Vec<usize>) {
    (0..assignment.len()).partition(|&i| assignment[i] != fold)
}

/// The first `m` records of a `(seed, fold)`-specific shuffle of the
/// training side, so smaller budgets are prefixes of larger ones.
pub fn budget_subset(train: &[usize], m: usize, seed: u64, fold: usize) -> Result<Vec<usize>> {
    if m == 0 || m > train.len() {
        return Err(Error::InvalidInput(format!(
            "budget M={m} but the training fold holds {} images",
            train.len()
        )));
    }
    let mut order = train.to_vec();
    order.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1000 + fold as u64);
    order.shuffle(&mut rng);
    order.truncate(m);
    Ok(order)
}

/// Pixel-mean cross-entropy plus soft Dice (`1 - mean over classes`), and
/// the gradient w.r.t. the logits.
pub fn segmentation_loss(logits: &Array4<f32>, targets: &[&Array2<u8>]) -> Result<(f64, Array4<f32>)> {
    let (b, c, h, w) = logits.dim();
    if targets.len() != b || targets.iter().any(|t| t.dim() != (h, w)) {
        return Err(Error::Shape(format!("{} targets for logits {:?}", targets.len(), logits.dim())));
    }
    let mut p = Array4::<f64>::zeros((b, c, h, w));
    let mut ce = 0.0;
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let max = (0..c).map(|k| logits[[n, k, y, x]]).fold(f32::NEG_INFINITY, f32::max) as f64;
                let mut z = 0.0;
                for k in 0..c {
                    let e = (logits[[n, k, y, x]] as f64 - max).exp();
                    p[[n, k, y, x]] = e;
                    z += e;
                }
                for k in 0..c {
                    p[[n, k, y, x]] /= z;
                }
                let t = targets[n][[y, x]] as usize;
                if t >= c {
                    return Err(Error::InvalidInput(format!("label {t} outside {c} classes")));
                }
                ce -= p[[n, t, y, x]].max(1e-300).ln();
            }
        }
    }
    let pixels = (b * h * w) as f64;
    ce /= pixels;

    let mut inter = vec![0.0; c];
    let mut denom = vec![DICE_SMOOTH; c];
    for n in 0..b {
        for k in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let t = (targets[n][[y, x]] as usize == k) as u8 as f64;
                    inter[k] += p[[n, k, y, x]] * t;
                    denom[k] += p[[n, k, y, x]] + t;
                }
            }
        }
    }
    let dice_loss = 1.0 - (0..c).map(|k| (2.0 * inter[k] + DICE_SMOOTH) / denom[k]).sum::<f64>() / c as f64;

    let mut grad = Array4::<f32>::zeros((b, c, h, w));
    let mut g = vec![0.0; c];
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let t = targets[n][[y, x]] as usize;
                // Gradient w.r.t. probabilities of the Dice term.
                for (k, gk) in g.iter_mut().enumerate() {
                    let tk = (t == k) as u8 as f64;
                    let num = 2.0 * inter[k] + DICE_SMOOTH;
                    *gk = -(2.0 * tk * denom[k] - num) / (denom[k] * denom[k]) / c as f64;
                }
                let dot: f64 = (0..c).map(|k| p[[n, k, y, x]] * g[k]).sum();
                for k in 0..c {
                    let pk = p[[n, k, y, x]];
                    let d_ce = (pk - (t == k) as u8 as f64) / pixels;
                    grad[[n, k, y, x]] = (d_ce + pk * (g[k] - dot)) as f32;
                }
            }
        }
    }
    Ok((ce + dice_loss, grad))
}

/// Arg-max labels per pixel.
pub fn predict(net: &UNet, images: &[Array2<f32>]) -> Result<Vec<Array2<u8>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(8) {
        let logits = net.forward(&stack_images(chunk)?)?;
        for sample in logits.axis_iter(Axis(0)) {
            let (c, h, w) = sample.dim();
            out.push(Array2::from_shape_fn((h, w), |(y, x)| {
                (0..c)
                    .max_by(|&a, &b| sample[[a, y, x]].total_cmp(&sample[[b, y, x]]).then(b.cmp(&a)))
                    .unwrap_or(0) as u8
            }));
        }
    }
    Ok(out)
}

/// Per-class Dice averaged over the images in `idx`.
pub fn evaluate(net: &UNet, data: &Dataset, idx: &[usize]) -> Result<Vec<f64>> {
    if idx.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    let images: Vec<Array2<f32>> = idx.iter().map(|&i| data.images[i].clone()).collect();
    let preds = predict(net, &images)?;
    let mut sum = vec![0.0; NUM_CLASSES];
    for (pred, &i) in preds.iter().zip(idx) {
        for (s, d) in sum.iter_mut().zip(per_class_dice(pred, data.mask(i)?)?) {
            *s += d;
        }
    }
    Ok(sum.into_iter().map(|s| s / idx.len() as f64).collect())
}

pub struct TrainedSegmenter {
    /// Weights from the epoch with the lowest training loss.
    pub net: UNet,
    pub epoch_losses: Vec<f64>,
    pub best_epoch: usize,
    pub transfer: Option<TransferReport>,
}

/// Trains a U-Net on the records in `train`, optionally starting from a
/// pretrained encoder. Without a checkpoint this is the random-init
/// baseline. `stream` separates runs that share a seed.
pub fn train_segmentation(
    data: &Dataset,
    train: &[usize],
    init: Option<&Checkpoint>,
    cfg: &FinetuneConfig,
    seed: u64,
    stream: u64,
) -> Result<TrainedSegmenter> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    for &i in train {
        data.mask(i)?;
    }
    let spec = init.map(|c| c.meta.encoder.clone()).unwrap_or_else(|| cfg.encoder.clone());
    if spec.input_size != data.size {
        return Err(Error::Config(format!(
            "encoder expects {} px images, dataset has {}",
            spec.input_size, data.size
        )));
    }
    if let Some(ckpt) = init {
        if ckpt.meta.encoder.variant != cfg.encoder.variant {
            return Err(Error::Checkpoint(format!(
                "checkpoint encoder is {} but fine-tuning is configured for {}",
                ckpt.meta.encoder.variant.as_str(),
                cfg.encoder.variant.as_str()
            )));
        }
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    init_rng.set_stream(2 * stream);
    let mut net = UNet::new(spec, NUM_CLASSES, &mut init_rng)?;
    let transfer = init.map(|c| transfer_encoder(c, &mut net)).transpose()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * stream + 1);
    let mut opt = Adam::new(cfg.adam);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut order = train.to_vec();
    let mut best = (f64::INFINITY, 0, net.clone());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (s, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let lr = cosine_lr(epoch * steps_per_epoch + s, total, cfg.lr)?;
            let jobs: Vec<(usize, u64)> = chunk.iter().map(|&i| (i, rng.random::<u64>())).collect();
            let pairs = jobs
                .par_iter()
                .map(|&(i, s)| {
                    augment_pair(
                        &data.images[i],
                        data.mask(i)?,
                        &cfg.augment,
                        &mut ChaCha8Rng::seed_from_u64(s),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let (images, masks): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let x = stack_images(&images)?;
            let (logits, cache) = net.forward_cached(&x)?;
            let targets: Vec<&Array2<u8>> = masks.iter().collect();
            let (loss, d_logits) = segmentation_loss(&logits, &targets)?;
            if !loss.is_finite() {
                return Err(Error::InvalidInput(format!("fine-tuning loss diverged in epoch {}", epoch + 1)));
            }
            net.zero_grad();
            net.backward(cache, &d_logits);
            opt.step(&mut net, lr);
            sum += loss * chunk.len() as f64;
        }
        let mean = sum / train.len() as f64;
        epoch_losses.push(mean);
        // The loss is measured during the epoch, so the weights after it
        // are the ones credited with it.
        if mean < best.0 {
            best = (mean, epoch + 1, net.clone());
        }
    }
    Ok(TrainedSegmenter {
        net: best.2,
        epoch_losses,
        best_epoch: best.1,
        transfer,
    })
}

pub struct FoldResult {
    pub fold: usize,
    pub m: usize,
    pub net: UNet,
    pub report: DiceReport,
}

/// Cross-validated fine-tuning over every budget in `cfg.budgets` (or the
/// full training fold when the list is empty).
pub fn finetune(
    data: &Dataset,
    init: Option<&Checkpoint>,
    cfg: &FinetuneConfig,
    seed: u64,
    variant: &str,
) -> Result<Vec<FoldResult>> {
    cfg.validate()?;
    if !data.manifest.has_all_masks() {
        return Err(Error::InvalidInput("fine-tuning needs a mask for every record".into()));
    }
    let assignment = assign_folds(&data.manifest, cfg.folds, seed)?;
    let mut out = vec![];
    for fold in 0..cfg.folds {
        let (train, val) = fold_split(&assignment, fold);
        let budgets = if cfg.budgets.is_empty() {
            vec![train.len()]
        } else {
            cfg.budgets.clone()
        };
        for m in budgets {
            let subset = budget_subset(&train, m, seed, fold)?;
            let trained = train_segmentation(data, &subset, init, cfg, seed, fold as u64)?;
            let per_class = evaluate(&trained.net, data, &val)?;
            out.push(FoldResult {
                fold,
                m,
                report: DiceReport::new(variant, m, fold, seed, &per_class),
                net: trained.net,
            });
        }
    }
    Ok(out)
}
