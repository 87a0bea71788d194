//! Pretraining and fine-tuning loops, optimizers and schedules.

mod finetune;
mod optim;
mod pretrain;
mod schedule;

pub use finetune::{
    assign_folds, budget_subset, evaluate, finetune, fold_split, predict, segmentation_loss,
    train_segmentation, FinetuneConfig, FoldResult, TrainedSegmenter,
};
pub use optim::{Adam, AdamConfig, AnyOptimizer, Optimizer, OptimizerKind, Sgd, SgdConfig};
pub use pretrain::{
    encode_dataset, make_views, pretrain, pretrain_moco, pretrain_simclr, stack_images, EpochLog,
    EpochHook, MocoStepEvent, PretrainConfig, PretrainHooks, PretrainOutcome, PretrainVariant,
    StepEvent, StepHook, StepLog,
};
pub use schedule::cosine_lr;
