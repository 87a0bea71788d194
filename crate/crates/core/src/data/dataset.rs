use ndarray::Array2;
use rayon::prelude::*;

use super::{
    preprocess, preprocess_mask, read_image, read_mask, ImageRecord, Manifest, PreprocessConfig,
    SyntheticImage,
};
use crate::{Error, Result};

/// Preprocessed images (and masks, when present) held in memory, aligned
/// with the manifest's record order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub images: Vec<Array2<f32>>,
    pub masks: Vec<Option<Array2<u8>>>,
    pub size: usize,
}

impl Dataset {
    /// Reads and preprocesses every record on the current rayon pool.
    pub fn load(manifest: &Manifest, cfg: &PreprocessConfig) -> Result<Self> {
        cfg.validate()?;
        let loaded: Vec<(Array2<f32>, Option<Array2<u8>>)> = manifest
            .records()
            .par_iter()
            .map(|r| {
                let raw = read_image(&r.image_path)?;
                let img = preprocess(&raw, cfg)?;
                let mask = match &r.mask_path {
                    Some(p) => {
                        let m = read_mask(p)?;
                        if m.dim() != raw.dim() {
                            return Err(Error::Shape(format!(
                                "mask {} is {:?} but image is {:?}",
                                p.display(),
                                m.dim(),
                                raw.dim()
                            )));
                        }
                        Some(preprocess_mask(&m, cfg.target_size)?)
                    }
                    None => None,
                };
                Ok((img, mask))
            })
            .collect::<Result<_>>()?;
        let (images, masks) = loaded.into_iter().unzip();
        Ok(Self {
            manifest: manifest.clone(),
            images,
            masks,
            size: cfg.target_size,
        })
    }

    /// Preprocesses in-memory synthetic images without touching the disk.
    pub fn from_synthetic(images: &[SyntheticImage], cfg: &PreprocessConfig) -> Result<Self> {
        cfg.validate()?;
        let records = images
            .iter()
            .map(|s| ImageRecord {
                image_id: s.image_id.clone(),
                patient_id: s.patient_id.clone(),
                image_path: format!("{}.png", s.image_id).into(),
                mask_path: Some(format!("{}_mask.png", s.image_id).into()),
                timestamp_index: Some(s.timestamp_index),
            })
            .collect();
        let loaded = images
            .par_iter()
            .map(|s| Ok((preprocess(&s.image, cfg)?, Some(preprocess_mask(&s.mask, cfg.target_size)?))))
            .collect::<Result<Vec<_>>>()?;
        let (images, masks) = loaded.into_iter().unzip();
        Ok(Self {
            manifest: Manifest::new(records)?,
            images,
            masks,
            size: cfg.target_size,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn patient_id(&self, i: usize) -> &str {
        &self.manifest.records()[i].patient_id
    }

    pub fn mask(&self, i: usize) -> Result<&Array2<u8>> {
        self.masks[i].as_ref().ok_or_else(|| {
            Error::InvalidInput(format!(
                "record {} has no mask",
                self.manifest.records()[i].image_id
            ))
        })
    }
}
