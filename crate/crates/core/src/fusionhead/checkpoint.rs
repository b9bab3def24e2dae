use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FusionConfig, FusionParams};
use crate::featio::container::{self, Container, TensorData};
use crate::featio::FeatError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WLC1";

/// A trained head: parameters at full precision plus where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: FusionConfig,
    pub params: FusionParams,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub fold: usize,
    /// 1-based epoch the parameters were taken from.
    pub epoch: usize,
    pub step: u64,
    pub val_f1: f64,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: FusionConfig,
    #[serde(flatten)]
    meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, FeatError> {
        let tensors: Vec<TensorData> = self
            .params
            .views()
            .iter()
            .map(|v| TensorData::f64(v.name, v.shape.clone(), v.values))
            .collect();
        let metadata = serde_json::to_value(Metadata {
            config: self.config.clone(),
            meta: self.meta.clone(),
        })
        .map_err(|e| FeatError::CorruptManifest(e.to_string()))?;
        container::encode(CHECKPOINT_MAGIC, &tensors, metadata)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FeatError> {
        from_container(container::decode(CHECKPOINT_MAGIC, bytes)?)
    }
}

fn from_container(c: Container) -> Result<Checkpoint, FeatError> {
    let Metadata { config, meta } = serde_json::from_value::<Metadata>(c.manifest.metadata.clone())
        .map_err(|e| FeatError::CorruptManifest(e.to_string()))?;
    // Start from a correctly shaped template and overwrite every tensor.
    let mut params = FusionParams::init(&config, 0);
    let expected: Vec<(&'static str, Vec<usize>)> =
        params.views().iter().map(|v| (v.name, v.shape.clone())).collect();
    if c.manifest.tensors.len() != expected.len() {
        return Err(FeatError::ShapeMismatch(format!(
            "checkpoint holds {} tensors, mode {} needs {}",
            c.manifest.tensors.len(),
            config.mode,
            expected.len()
        )));
    }
    for ((name, shape), (_, dst, _)) in expected.into_iter().zip(params.slices_mut()) {
        let (got_shape, values) = c.f64(name)?;
        if got_shape != shape {
            return Err(FeatError::ShapeMismatch(format!(
                "tensor {name} has shape {got_shape:?}, expected {shape:?}"
            )));
        }
        dst.copy_from_slice(&values);
    }
    if !params.is_finite() {
        return Err(FeatError::Validation("checkpoint contains non-finite parameters".into()));
    }
    Ok(Checkpoint { config, params, meta })
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), FeatError> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, FeatError> {
    from_container(container::read(path, CHECKPOINT_MAGIC)?)
}
