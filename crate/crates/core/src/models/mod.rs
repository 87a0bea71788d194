//! Encoder, projection head, U-Net and checkpoints.

mod block;
mod checkpoint;
mod encoder;
mod head;
mod unet;

pub use block::{BlockCache, ConvBlock};
pub use checkpoint::{export_params, import_params, Checkpoint, CheckpointMeta};
pub use encoder::{Encoder, EncoderCache, EncoderOutput, EncoderSpec, EncoderVariant};
pub use head::{ContrastiveNet, ContrastiveNetCache, HeadCache, ProjectionHead, ProjectionSpec};
pub use unet::{transfer_encoder, TransferReport, UNet, UNetCache};
