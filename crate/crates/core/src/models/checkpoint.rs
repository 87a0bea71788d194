//! Named-array checkpoints.
//!
//! On disk a checkpoint is a safetensors archive: a JSON header with the
//! shape table, raw little-endian `f32` payloads addressable by name, and a
//! single `cltci` metadata entry holding [`CheckpointMeta`] as JSON.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::{EncoderSpec, ProjectionSpec};
use crate::nn::Module;
use crate::{Error, Result};

const FORMAT: &str = "cltci-checkpoint/1";
const META_KEY: &str = "cltci";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    /// Training variant that produced the weights.
    pub variant: String,
    pub encoder: EncoderSpec,
    pub projection: Option<ProjectionSpec>,
    pub config_hash: String,
    /// Number of completed epochs.
    pub epoch: usize,
    pub init_scheme: String,
    pub shapes: BTreeMap<String, Vec<usize>>,
    /// Resume state and other run-specific values.
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: BTreeMap<String, ArrayD<f32>>,
}

impl Checkpoint {
    /// Fills in the format tag and the shape table from `arrays`.
    pub fn new(
        variant: impl Into<String>,
        encoder: EncoderSpec,
        projection: Option<ProjectionSpec>,
        config_hash: impl Into<String>,
        epoch: usize,
        arrays: BTreeMap<String, ArrayD<f32>>,
    ) -> Self {
        let shapes = arrays
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect();
        Self {
            meta: CheckpointMeta {
                format: FORMAT.to_string(),
                variant: variant.into(),
                encoder,
                projection,
                config_hash: config_hash.into(),
                epoch,
                init_scheme: crate::nn::INIT_SCHEME.to_string(),
                shapes,
                extra: BTreeMap::new(),
            },
            arrays,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f32>) {
        let name = name.into();
        self.meta.shapes.insert(name.clone(), value.shape().to_vec());
        self.arrays.insert(name, value);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let buffers: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .arrays
            .iter()
            .map(|(k, v)| {
                let bytes = v.iter().flat_map(|x| x.to_le_bytes()).collect();
                (k.clone(), bytes, v.shape().to_vec())
            })
            .collect();
        let views = buffers
            .iter()
            .map(|(k, b, s)| {
                TensorView::new(Dtype::F32, s.clone(), b)
                    .map(|v| (k.as_str(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = serde_json::to_string(&self.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let info = HashMap::from([(META_KEY.to_string(), meta)]);
        safetensors::tensor::serialize(views, Some(info)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint("missing checkpoint metadata".into()))?;
        let meta: CheckpointMeta =
            serde_json::from_str(meta_json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if meta.format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format {:?}", meta.format)));
        }
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut arrays = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!("{name}: expected f32, got {:?}", view.dtype())));
            }
            let data: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), data)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            arrays.insert(name, arr);
        }
        let table: BTreeMap<String, Vec<usize>> =
            arrays.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect();
        if table != meta.shapes {
            return Err(Error::Checkpoint("shape table does not match stored arrays".into()));
        }
        Ok(Self { meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Copies every parameter of `module` into a map, prepending `prefix` to
/// each name.
pub fn export_params<M: Module + ?Sized>(module: &M, prefix: &str) -> BTreeMap<String, ArrayD<f32>> {
    module
        .params()
        .into_iter()
        .map(|p| (format!("{prefix}{}", p.name()), p.value.clone()))
        .collect()
}

/// Loads every parameter of `module` from `arrays[prefix + name]`.
pub fn import_params<M: Module + ?Sized>(
    module: &mut M,
    arrays: &BTreeMap<String, ArrayD<f32>>,
    prefix: &str,
) -> Result<()> {
    for p in module.params_mut() {
        let key = format!("{prefix}{}", p.name());
        let src = arrays
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {key}")))?;
        if src.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "{key}: shape {:?} vs expected {:?}",
                src.shape(),
                p.value.shape()
            )));
        }
        p.value.assign(src);
    }
    Ok(())
}
