//! Patient-aware contrastive pretraining and segmentation fine-tuning.
//!
//! Images that come from the same patient are treated as positives when
//! learning representations, either inside one batch (in-batch contrast) or
//! against a momentum-encoded dictionary of past keys that carry patient
//! pseudo-labels. The pretrained encoder then initializes a U-Net that is
//! fine-tuned on a small annotated subset for three-class lung segmentation.

pub mod augment;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod eval;
pub mod models;
pub mod moco;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
