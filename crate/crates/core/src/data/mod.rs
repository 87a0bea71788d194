//! Manifests, preprocessing, patient-grouped sampling and synthetic data.

mod dataset;
mod io;
mod manifest;
mod preprocess;
mod sampler;
mod synthetic;

pub use dataset::Dataset;
pub use io::{read_image, read_mask, write_gray_u8, write_mask};
pub use manifest::{load_manifest, write_manifest, ImageRecord, Manifest};
pub use preprocess::{
    normalize, pad_to_square, preprocess, preprocess_mask, resize_bilinear, resize_nearest,
    square_padding, Normalization, PreprocessConfig,
};
pub use sampler::{sample_batch, sample_batch_indices, SamplerConfig};
pub use synthetic::{generate_synthetic, synthesize, SyntheticConfig, SyntheticImage};

/// Mask label values.
pub const BACKGROUND: u8 = 0;
pub const LEFT_LUNG: u8 = 1;
pub const RIGHT_LUNG: u8 = 2;
pub const NUM_CLASSES: usize = 3;
