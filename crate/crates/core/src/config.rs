//! Run configuration files.
//!
//! A run is described by one TOML document. Every section is optional and
//! falls back to the desk-scale presets; unknown keys are rejected. The
//! resolved configuration is hashed so outputs can be traced back to it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{PreprocessConfig, SyntheticConfig};
use crate::train::{FinetuneConfig, PretrainConfig, PretrainVariant};
use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset manifest consumed by pretraining, fine-tuning and evaluation.
    pub manifest: Option<PathBuf>,
    /// Output directory.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Neighbours considered by the cluster purity.
    pub k: usize,
    /// Label shuffles used for the chance baseline.
    pub permutations: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: 3, permutations: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub preprocess: PreprocessConfig,
    pub synthetic: SyntheticConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    /// Whether `[pretrain.batch]` was given explicitly; otherwise the batch
    /// shape follows the variant.
    #[serde(skip)]
    batch_explicit: bool,
    /// Same for `pretrain.base_lr`.
    #[serde(skip)]
    lr_explicit: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk(64)
    }
}

impl RunConfig {
    /// Desk-scale preset on `size`-pixel images.
    pub fn desk(size: usize) -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            preprocess: PreprocessConfig {
                target_size: size,
                ..PreprocessConfig::default()
            },
            synthetic: SyntheticConfig {
                image_size: size,
                ..SyntheticConfig::default()
            },
            pretrain: PretrainConfig::desk(PretrainVariant::ClTciMoco, size),
            finetune: FinetuneConfig::desk(size),
            eval: EvalConfig::default(),
            batch_explicit: false,
            lr_explicit: false,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let given = |key: &str| {
            table
                .get("pretrain")
                .and_then(|p| p.as_table())
                .is_some_and(|p| p.contains_key(key))
        };
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.batch_explicit = given("batch");
        cfg.lr_explicit = given("base_lr");
        let variant = cfg.pretrain.variant;
        cfg.set_variant(variant);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Switches the pretraining variant; an implicit batch shape and
    /// learning rate follow it.
    pub fn set_variant(&mut self, variant: PretrainVariant) {
        self.pretrain.variant = variant;
        if !self.batch_explicit {
            self.pretrain.batch = PretrainConfig::desk_batch(variant);
        }
        if !self.lr_explicit {
            self.pretrain.base_lr = PretrainConfig::desk_lr(variant);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.synthetic.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.pretrain.encoder.input_size != self.preprocess.target_size {
            return Err(Error::Config(format!(
                "pretrain encoder input {} differs from preprocess target {}",
                self.pretrain.encoder.input_size, self.preprocess.target_size
            )));
        }
        if self.finetune.encoder.input_size != self.preprocess.target_size {
            return Err(Error::Config(format!(
                "finetune encoder input {} differs from preprocess target {}",
                self.finetune.encoder.input_size, self.preprocess.target_size
            )));
        }
        if self.eval.k == 0 || self.eval.permutations == 0 {
            return Err(Error::Config("eval.k and eval.permutations must be positive".into()));
        }
        Ok(())
    }

    /// Hash of everything that affects results; the output directory does not.
    pub fn hash(&self) -> Result<String> {
        let mut key = self.clone();
        key.paths.out = None;
        hash_of(&key)
    }

    /// Writes `config.toml` and `config.sha256` into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<String> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let hash = self.hash()?;
        let p = dir.join("config.toml");
        fs::write(&p, self.to_toml()?).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("config.sha256");
        fs::write(&p, format!("{hash}\n")).map_err(|e| Error::io(&p, e))?;
        Ok(hash)
    }
}

/// Hex SHA-256 of the JSON serialization of `value`. Struct fields
/// serialize in declaration order, so equal values hash equally.
pub fn hash_of<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value).map_err(|e| Error::Config(e.to_string()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_desk_preset() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn round_trip_preserves_hash() {
        let mut cfg = RunConfig::desk(32);
        cfg.seed = 9;
        cfg.finetune.budgets = vec![2, 4, 8];
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        assert_eq!(back, RunConfig { batch_explicit: true, lr_explicit: true, ..cfg });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 1").is_err());
        assert!(RunConfig::from_toml("[pretrain]\nepochz = 3").is_err());
        assert!(RunConfig::from_toml("[pretrain]\nvariant = \"byol\"").is_err());
    }

    #[test]
    fn batch_follows_variant_unless_given() {
        let cfg = RunConfig::from_toml("[pretrain]\nvariant = \"cl-tci-simclr\"").unwrap();
        assert_eq!(cfg.pretrain.batch.images_per_patient, 2);
        let mut cfg = RunConfig::from_toml(
            "[pretrain]\nvariant = \"cl-tci-simclr\"\n[pretrain.batch]\npatients_per_batch = 3\nimages_per_patient = 3",
        )
        .unwrap();
        cfg.set_variant(PretrainVariant::ClTciMoco);
        assert_eq!(cfg.pretrain.batch.images_per_patient, 3);
    }

    #[test]
    fn output_directory_is_not_hashed() {
        let mut cfg = RunConfig::default();
        let before = cfg.hash().unwrap();
        cfg.paths.out = Some("elsewhere".into());
        assert_eq!(cfg.hash().unwrap(), before);
        cfg.paths.manifest = Some("m.tsv".into());
        assert_ne!(cfg.hash().unwrap(), before);
    }

    #[test]
    fn learning_rate_follows_variant_unless_given() {
        let mut cfg = RunConfig::default();
        cfg.set_variant(PretrainVariant::SimclrBaseline);
        assert_eq!(cfg.pretrain.base_lr, 0.01);
        cfg.set_variant(PretrainVariant::MocoBaseline);
        assert_eq!(cfg.pretrain.base_lr, 0.1);
        let mut cfg = RunConfig::from_toml("[pretrain]\nbase_lr = 0.05").unwrap();
        cfg.set_variant(PretrainVariant::ClTciSimclr);
        assert_eq!(cfg.pretrain.base_lr, 0.05);
    }

    #[test]
    fn hash_changes_with_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.pretrain.epochs += 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }
}
