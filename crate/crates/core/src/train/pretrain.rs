//! Contrastive pretraining loops.
//!
//! Both loops draw `P x K` patient-grouped images per step, make two
//! augmented views of each (interleaved, so views `2i` and `2i + 1` are
//! siblings), and minimize the multi-positive contrastive loss. The
//! in-batch loop contrasts every view against every other view; the
//! momentum loop contrasts each view against its sibling's key and a
//! patient-labeled queue of past keys.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, Array4, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{AdamConfig, AnyOptimizer, Optimizer, OptimizerKind, SgdConfig};
use super::schedule::cosine_lr;
use crate::augment::{augment_view, AugmentConfig};
use crate::contrastive::{
    contrastive_loss_gradient, Candidates, LossConfig, PositiveRule, RepresentationBatch,
};
use crate::data::{sample_batch_indices, Dataset, SamplerConfig};
use crate::models::{export_params, import_params, Checkpoint, ContrastiveNet, EncoderSpec, ProjectionSpec};
use crate::moco::{momentum_update, queue_candidates, LabeledQueue, MoCoConfig};
use crate::nn::Module;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PretrainVariant {
    ClTciSimclr,
    ClTciMoco,
    SimclrBaseline,
    MocoBaseline,
}

impl PretrainVariant {
    pub const ALL: [PretrainVariant; 4] = [
        PretrainVariant::ClTciSimclr,
        PretrainVariant::ClTciMoco,
        PretrainVariant::SimclrBaseline,
        PretrainVariant::MocoBaseline,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PretrainVariant::ClTciSimclr => "cl-tci-simclr",
            PretrainVariant::ClTciMoco => "cl-tci-moco",
            PretrainVariant::SimclrBaseline => "simclr-baseline",
            PretrainVariant::MocoBaseline => "moco-baseline",
        }
    }

    pub fn is_moco(&self) -> bool {
        matches!(self, PretrainVariant::ClTciMoco | PretrainVariant::MocoBaseline)
    }

    pub fn is_baseline(&self) -> bool {
        matches!(self, PretrainVariant::SimclrBaseline | PretrainVariant::MocoBaseline)
    }

    pub fn positive_rule(&self) -> PositiveRule {
        if self.is_baseline() {
            PositiveRule::SiblingOnly
        } else {
            PositiveRule::SamePatient
        }
    }
}

impl fmt::Display for PretrainVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PretrainVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|v| v.as_str()).collect();
                Error::Config(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub variant: PretrainVariant,
    pub epochs: usize,
    pub base_lr: f64,
    pub optimizer: OptimizerKind,
    pub sgd: SgdConfig,
    pub adam: AdamConfig,
    pub batch: SamplerConfig,
    pub loss: LossConfig,
    pub moco: MoCoConfig,
    pub augment: AugmentConfig,
    pub encoder: EncoderSpec,
    pub projection: ProjectionSpec,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self::desk(PretrainVariant::ClTciMoco, 64)
    }
}

impl PretrainConfig {
    /// Minutes-scale preset: tiny encoder, 30 epochs, eight images per step.
    pub fn desk(variant: PretrainVariant, image_size: usize) -> Self {
        Self {
            variant,
            epochs: 30,
            base_lr: Self::desk_lr(variant),
            optimizer: OptimizerKind::Sgd,
            sgd: SgdConfig::default(),
            adam: AdamConfig::default(),
            batch: Self::desk_batch(variant),
            loss: LossConfig::default(),
            moco: MoCoConfig {
                momentum: 0.99,
                ..MoCoConfig::default()
            },
            augment: AugmentConfig::pretraining(),
            encoder: EncoderSpec::tiny(image_size),
            projection: ProjectionSpec::default(),
        }
    }

    /// In-batch variants run at a lower rate; at 0.1 the eight-image batch
    /// collapses to a constant projection within a few epochs.
    pub fn desk_lr(variant: PretrainVariant) -> f64 {
        if variant.is_moco() {
            0.1
        } else {
            0.01
        }
    }

    /// Eight images per step: `4 x 2` in-batch, `8 x 1` with the dictionary.
    pub fn desk_batch(variant: PretrainVariant) -> SamplerConfig {
        if variant.is_moco() {
            SamplerConfig {
                patients_per_batch: 8,
                images_per_patient: 1,
                seed: 0,
            }
        } else {
            SamplerConfig {
                patients_per_batch: 4,
                images_per_patient: 2,
                seed: 0,
            }
        }
    }

    /// Full-scale preset: U-Net encoder at 256 px, 500 epochs, 32 images
    /// per step in-batch or 16 with the momentum dictionary.
    pub fn full(variant: PretrainVariant) -> Self {
        let batch = if variant.is_moco() {
            SamplerConfig {
                patients_per_batch: 16,
                images_per_patient: 1,
                seed: 0,
            }
        } else {
            SamplerConfig {
                patients_per_batch: 16,
                images_per_patient: 2,
                seed: 0,
            }
        };
        Self {
            variant,
            epochs: 500,
            base_lr: 0.1,
            optimizer: OptimizerKind::Sgd,
            sgd: SgdConfig::default(),
            adam: AdamConfig::default(),
            batch,
            loss: LossConfig::default(),
            moco: MoCoConfig {
                momentum: 0.999,
                queue_capacity: MoCoConfig::FULL_SCALE_CAPACITY,
            },
            augment: AugmentConfig::pretraining(),
            encoder: EncoderSpec::unet(256),
            projection: ProjectionSpec::default(),
        }
    }

    /// The sampler actually used. Baselines see one image per patient, so
    /// the batch keeps its size by drawing `P * K` patients (capped by the
    /// number available).
    pub fn effective_batch(&self, num_patients: usize) -> SamplerConfig {
        if self.variant.is_baseline() {
            SamplerConfig {
                patients_per_batch: (self.batch.batch_images()).min(num_patients).max(2),
                images_per_patient: 1,
                seed: self.batch.seed,
            }
        } else {
            self.batch
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        self.batch.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        self.encoder.validate()?;
        if self.variant.is_moco() {
            self.moco.validate(self.batch.batch_views())?;
        }
        Ok(())
    }
}

/// One row of the per-epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean step loss over the epoch.
    pub loss: f64,
    /// Learning rate used by the epoch's last step.
    pub lr: f64,
    pub wall_time: f64,
}

/// One row of the per-step loss trace. Unlike [`EpochLog`] it carries no
/// timing, so it is reproducible bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Extra state exposed by the momentum loop to step observers.
pub struct MocoStepEvent<'a> {
    /// Queue contents the step's loss was computed against.
    pub queue_before: &'a LabeledQueue,
    pub queue_after: &'a LabeledQueue,
    /// Candidate matrix handed to the loss (sibling keys, then the queue).
    pub candidates: &'a Array2<f32>,
    /// Keys produced (and enqueued) this step.
    pub keys: &'a Array2<f32>,
    pub key_before: &'a ContrastiveNet,
    pub key_after: &'a ContrastiveNet,
    pub momentum: f32,
}

pub struct StepEvent<'a> {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub positives_per_anchor: Vec<usize>,
    pub candidates_per_anchor: Vec<usize>,
    pub query_before: &'a ContrastiveNet,
    pub query_after: &'a ContrastiveNet,
    pub moco: Option<MocoStepEvent<'a>>,
}

pub type StepHook<'a> = Box<dyn FnMut(&StepEvent<'_>) + 'a>;
pub type EpochHook<'a> = Box<dyn FnMut(&EpochLog) -> Result<()> + 'a>;

/// Optional callbacks into the training loop.
#[derive(Default)]
pub struct PretrainHooks<'a> {
    pub on_step: Option<StepHook<'a>>,
    pub on_epoch: Option<EpochHook<'a>>,
}

pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub net: ContrastiveNet,
    /// Epochs run by this call (a resumed run starts after the checkpoint).
    pub epochs: Vec<EpochLog>,
    pub trace: Vec<StepLog>,
}

const MOMENTUM_PREFIX: &str = "momentum.";
const OPTIM_PREFIX: &str = "optim.";
const QUEUE_VECTORS: &str = "queue.vectors";

/// Runs the in-batch loop (`cl-tci-simclr` or `simclr-baseline`).
pub fn pretrain_simclr(
    data: &Dataset,
    cfg: &PretrainConfig,
    seed: u64,
    resume: Option<&Checkpoint>,
    hooks: PretrainHooks<'_>,
) -> Result<PretrainOutcome> {
    if cfg.variant.is_moco() {
        return Err(Error::Config(format!("{} is not an in-batch variant", cfg.variant)));
    }
    pretrain(data, cfg, seed, resume, hooks)
}

/// Runs the momentum-dictionary loop (`cl-tci-moco` or `moco-baseline`).
pub fn pretrain_moco(
    data: &Dataset,
    cfg: &PretrainConfig,
    seed: u64,
    resume: Option<&Checkpoint>,
    hooks: PretrainHooks<'_>,
) -> Result<PretrainOutcome> {
    if !cfg.variant.is_moco() {
        return Err(Error::Config(format!("{} is not a momentum variant", cfg.variant)));
    }
    pretrain(data, cfg, seed, resume, hooks)
}

struct MocoState {
    key: ContrastiveNet,
    queue: LabeledQueue,
}

/// Dispatches on `cfg.variant`.
pub fn pretrain(
    data: &Dataset,
    cfg: &PretrainConfig,
    seed: u64,
    resume: Option<&Checkpoint>,
    mut hooks: PretrainHooks<'_>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if data.size != cfg.encoder.input_size {
        return Err(Error::Config(format!(
            "images are {} px but the encoder expects {}",
            data.size, cfg.encoder.input_size
        )));
    }
    let manifest = &data.manifest;
    let sampler = cfg.effective_batch(manifest.num_patients());
    let n_views = sampler.batch_views();
    let steps_per_epoch = data.len().div_ceil(sampler.batch_images());
    let total_steps = cfg.epochs * steps_per_epoch;
    let config_hash = crate::config::hash_of(&(cfg, seed))?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = ContrastiveNet::new(cfg.encoder.clone(), &cfg.projection, &mut init_rng)?;
    let mut opt = AnyOptimizer::new(cfg.optimizer, cfg.sgd, cfg.adam);
    let mut moco = if cfg.variant.is_moco() {
        Some(MocoState {
            key: net.clone(),
            queue: LabeledQueue::new(cfg.moco.queue_capacity, cfg.projection.output_dim)?,
        })
    } else {
        None
    };

    let mut start_epoch = 0;
    if let Some(ckpt) = resume {
        start_epoch = restore(ckpt, cfg, &mut net, &mut opt, moco.as_mut())?;
        if start_epoch > cfg.epochs {
            return Err(Error::Config(format!(
                "checkpoint is at epoch {start_epoch}, beyond the configured {}",
                cfg.epochs
            )));
        }
    }

    let clock = Instant::now();
    let mut epochs = Vec::new();
    let mut trace = Vec::new();
    let rule = cfg.variant.positive_rule();
    for epoch in start_epoch..cfg.epochs {
        // Each epoch has its own stream so a resumed run replays exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1 + epoch as u64);
        let mut sum = 0.0;
        let mut lr = 0.0;
        for s in 0..steps_per_epoch {
            let step = epoch * steps_per_epoch + s;
            lr = cosine_lr(step, total_steps, cfg.base_lr)?;
            let idx = sample_batch_indices(manifest, &sampler, &mut rng)?;
            let x = make_views(data, &idx, &cfg.augment, &mut rng)?;
            let ids: Vec<String> = idx
                .iter()
                .flat_map(|&i| {
                    let p = data.patient_id(i).to_string();
                    [p.clone(), p]
                })
                .collect();
            debug_assert_eq!(ids.len(), n_views);

            let query_before = hooks.on_step.is_some().then(|| net.clone());
            let (z, cache) = net.forward_cached(&x)?;
            let z64 = z.mapv(f64::from);
            let loss;
            match moco.as_mut() {
                None => {
                    let batch = RepresentationBatch::interleaved(z64.clone(), ids)?;
                    let mask = batch.positive_mask(rule)?;
                    let g = contrastive_loss_gradient(z64.view(), Candidates::Anchors, &mask, &cfg.loss)?;
                    loss = g.loss.total;
                    net.zero_grad();
                    net.backward(cache, &g.anchors.mapv(|v| v as f32));
                    opt.step(&mut net, lr);
                    if let (Some(cb), Some(before)) = (hooks.on_step.as_mut(), query_before.as_ref()) {
                        cb(&StepEvent {
                            epoch: epoch + 1,
                            step,
                            loss,
                            lr,
                            positives_per_anchor: mask.positives_per_anchor(),
                            candidates_per_anchor: mask.valid_per_anchor(),
                            query_before: before,
                            query_after: &net,
                            moco: None,
                        });
                    }
                }
                Some(state) => {
                    let keys = state.key.embed(&x)?;
                    let sibling = keys.select(Axis(0), &(0..n_views).map(|i| i ^ 1).collect::<Vec<_>>());
                    let qc = queue_candidates(&state.queue, &ids, sibling.view(), rule)?;
                    let cand64 = qc.vectors.mapv(f64::from);
                    let g = contrastive_loss_gradient(
                        z64.view(),
                        Candidates::Separate(cand64.view()),
                        &qc.mask,
                        &cfg.loss,
                    )?;
                    loss = g.loss.total;
                    net.zero_grad();
                    net.backward(cache, &g.anchors.mapv(|v| v as f32));
                    opt.step(&mut net, lr);
                    let key_before = hooks.on_step.is_some().then(|| state.key.clone());
                    let queue_before = hooks.on_step.is_some().then(|| state.queue.clone());
                    momentum_update(&mut state.key, &net, cfg.moco.momentum)?;
                    state.queue.enqueue(keys.view(), &ids)?;
                    if let Some(cb) = hooks.on_step.as_mut() {
                        cb(&StepEvent {
                            epoch: epoch + 1,
                            step,
                            loss,
                            lr,
                            positives_per_anchor: qc.mask.positives_per_anchor(),
                            candidates_per_anchor: qc.mask.valid_per_anchor(),
                            query_before: query_before.as_ref().expect("cloned when hooked"),
                            query_after: &net,
                            moco: Some(MocoStepEvent {
                                queue_before: queue_before.as_ref().expect("cloned when hooked"),
                                queue_after: &state.queue,
                                candidates: &qc.vectors,
                                keys: &keys,
                                key_before: key_before.as_ref().expect("cloned when hooked"),
                                key_after: &state.key,
                                momentum: cfg.moco.momentum,
                            }),
                        });
                    }
                }
            }
            if !loss.is_finite() {
                return Err(Error::InvalidInput(format!("loss diverged at step {step}")));
            }
            sum += loss;
            trace.push(StepLog {
                epoch: epoch + 1,
                step,
                loss,
                lr,
            });
        }
        let log = EpochLog {
            epoch: epoch + 1,
            loss: sum / steps_per_epoch as f64,
            lr,
            wall_time: clock.elapsed().as_secs_f64(),
        };
        if let Some(cb) = hooks.on_epoch.as_mut() {
            cb(&log)?;
        }
        epochs.push(log);
    }

    let mut arrays = export_params(&net, "");
    arrays.extend(opt.state().into_iter().map(|(k, v)| (format!("{OPTIM_PREFIX}{k}"), v)));
    let mut ckpt_extra = BTreeMap::new();
    if let Some(state) = &moco {
        arrays.extend(export_params(&state.key, MOMENTUM_PREFIX));
        if !state.queue.is_empty() {
            arrays.insert(QUEUE_VECTORS.into(), state.queue.snapshot().into_dyn());
        }
        ckpt_extra.insert("queue_labels".to_string(), serde_json::json!(state.queue.labels()));
        ckpt_extra.insert("queue_capacity".to_string(), serde_json::json!(state.queue.capacity()));
    }
    ckpt_extra.insert("seed".to_string(), serde_json::json!(seed));
    let mut checkpoint = Checkpoint::new(
        cfg.variant.as_str(),
        cfg.encoder.clone(),
        Some(cfg.projection),
        config_hash,
        cfg.epochs,
        arrays,
    );
    checkpoint.meta.extra = ckpt_extra;
    Ok(PretrainOutcome {
        checkpoint,
        net,
        epochs,
        trace,
    })
}

/// Restores network, optimizer and dictionary state; returns the number of
/// epochs already completed.
fn restore(
    ckpt: &Checkpoint,
    cfg: &PretrainConfig,
    net: &mut ContrastiveNet,
    opt: &mut AnyOptimizer,
    moco: Option<&mut MocoState>,
) -> Result<usize> {
    if ckpt.meta.variant != cfg.variant.as_str() {
        return Err(Error::Checkpoint(format!(
            "cannot resume {} from a {} checkpoint",
            cfg.variant, ckpt.meta.variant
        )));
    }
    if ckpt.meta.encoder != cfg.encoder {
        return Err(Error::Checkpoint("checkpoint encoder differs from the configured one".into()));
    }
    import_params(net, &ckpt.arrays, "")?;
    let optim: BTreeMap<String, ArrayD<f32>> = ckpt
        .arrays
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(OPTIM_PREFIX).map(|n| (n.to_string(), v.clone())))
        .collect();
    opt.load_state(&optim)?;
    if let Some(state) = moco {
        import_params(&mut state.key, &ckpt.arrays, MOMENTUM_PREFIX)?;
        let labels: Vec<String> = ckpt
            .meta
            .extra
            .get("queue_labels")
            .map(|v| serde_json::from_value(v.clone()))
            .transpose()
            .map_err(|e| Error::Checkpoint(e.to_string()))?
            .unwrap_or_default();
        let dim = state.queue.dim();
        let vectors = match ckpt.arrays.get(QUEUE_VECTORS) {
            Some(v) => v
                .clone()
                .into_dimensionality()
                .map_err(|e| Error::Checkpoint(format!("{QUEUE_VECTORS}: {e}")))?,
            None => Array2::zeros((0, dim)),
        };
        state.queue = LabeledQueue::from_snapshot(cfg.moco.queue_capacity, vectors.view(), &labels)?;
    }
    Ok(ckpt.meta.epoch)
}

/// Two augmented views per image, interleaved, as a `(2N, 1, S, S)` batch.
/// Per-view seeds are drawn sequentially so the result does not depend on
/// how many worker threads run the warps.
pub fn make_views<R: Rng + ?Sized>(
    data: &Dataset,
    idx: &[usize],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Array4<f32>> {
    let jobs: Vec<(usize, u64)> = idx
        .iter()
        .flat_map(|&i| [i, i])
        .map(|i| (i, rng.random::<u64>()))
        .collect();
    let views = jobs
        .par_iter()
        .map(|&(i, s)| augment_view(&data.images[i], cfg, &mut ChaCha8Rng::seed_from_u64(s)))
        .collect::<Result<Vec<_>>>()?;
    stack_images(&views)
}

/// Stacks equally sized images into a `(B, 1, S, S)` batch.
pub fn stack_images(images: &[Array2<f32>]) -> Result<Array4<f32>> {
    let (h, w) = images
        .first()
        .map(|i| i.dim())
        .ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    let mut x = Array4::zeros((images.len(), 1, h, w));
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (h, w) {
            return Err(Error::Shape(format!("image {i} is {:?}, expected {:?}", img.dim(), (h, w))));
        }
        x.index_axis_mut(Axis(0), i).index_axis_mut(Axis(0), 0).assign(img);
    }
    Ok(x)
}

/// Pooled encoder features for every image in `data`, without augmentation.
pub fn encode_dataset(net: &crate::models::Encoder, data: &Dataset, batch: usize) -> Result<Array2<f32>> {
    let mut out = Array2::zeros((data.len(), net.spec().feature_dim()));
    for (c, chunk) in data.images.chunks(batch.max(1)).enumerate() {
        let f = net.forward(&stack_images(chunk)?)?.features;
        let start = c * batch.max(1);
        out.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&f);
    }
    Ok(out)
}

