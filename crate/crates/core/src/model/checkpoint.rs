//! Versioned JSON checkpoint container.
//!
//! Top-level fields, in serialization order: `format`, `version`, `kind`,
//! `dims`, `meta`, `layers` (canonical layer order, each with `name`,
//! `out_dim`, `in_dim`, row-major `weight`, `bias`), and
//! `intervention_values` (`high`, `low`, or `null`). Floats are written in
//! shortest round-trip form, so save → load → save is byte-identical.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AnyModel, Dims, Linear, ModelKind};
use crate::autodiff::Tensor;
use crate::data::Protocol;
use crate::error::{Error, Result};
use crate::intervention::InterventionValues;
use crate::training::Mode;

pub const CHECKPOINT_FORMAT: &str = "chair-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training provenance stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub protocol: Protocol,
    pub mode: Option<Mode>,
    pub stages: Vec<u8>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: AnyModel,
    pub meta: CheckpointMeta,
    pub intervention_values: Option<InterventionValues>,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    name: String,
    out_dim: usize,
    in_dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    kind: ModelKind,
    dims: Dims,
    meta: CheckpointMeta,
    layers: Vec<LayerRecord>,
    intervention_values: Option<InterventionValues>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let layers = self
            .model
            .network()
            .named_layers()
            .into_iter()
            .map(|(name, _, l)| LayerRecord {
                name,
                out_dim: l.out_dim(),
                in_dim: l.in_dim(),
                weight: l.weight.data().to_vec(),
                bias: l.bias.data().to_vec(),
            })
            .collect();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: self.model.kind(),
            dims: self.model.dims(),
            meta: self.meta.clone(),
            layers,
            intervention_values: self.intervention_values.clone(),
        };
        let mut bytes = serde_json::to_vec(&file).expect("checkpoint serializes");
        bytes.push(b'\n');
        bytes
    }

    /// SHA-256 (hex) of the serialized checkpoint.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_slice(bytes).map_err(|e| Error::checkpoint("<document>", e.to_string()))?;
        match value.get("format").and_then(|v| v.as_str()) {
            Some(CHECKPOINT_FORMAT) => {}
            other => {
                return Err(Error::checkpoint(
                    "format",
                    format!("expected \"{CHECKPOINT_FORMAT}\", found {other:?}"),
                ))
            }
        }
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            other => {
                return Err(Error::checkpoint(
                    "version",
                    format!("unsupported version {other:?}, expected {CHECKPOINT_VERSION}"),
                ))
            }
        }
        let file: CheckpointFile = serde_json::from_value(value).map_err(|e| Error::checkpoint("<document>", e.to_string()))?;
        file.dims.validate().map_err(|e| Error::checkpoint("dims", e.to_string()))?;

        let mut model = AnyModel::new(file.kind, file.dims, &mut ChaCha8Rng::seed_from_u64(0))
            .map_err(|e| Error::checkpoint("dims", e.to_string()))?;
        let expected: Vec<(String, usize, usize)> = model
            .network()
            .named_layers()
            .into_iter()
            .map(|(n, _, l)| (n, l.out_dim(), l.in_dim()))
            .collect();
        if file.layers.len() != expected.len() {
            return Err(Error::checkpoint(
                "layers",
                format!("expected {} layers for {}, found {}", expected.len(), file.kind, file.layers.len()),
            ));
        }
        for (i, ((name, out_dim, in_dim), rec)) in expected.iter().zip(&file.layers).enumerate() {
            let field = |f: &str| format!("layers[{i}].{f}");
            if &rec.name != name {
                return Err(Error::checkpoint(field("name"), format!("expected `{name}`, found `{}`", rec.name)));
            }
            if rec.out_dim != *out_dim || rec.in_dim != *in_dim {
                return Err(Error::checkpoint(
                    field("out_dim"),
                    format!(
                        "layer `{name}` is {}×{} but dims require {out_dim}×{in_dim}",
                        rec.out_dim, rec.in_dim
                    ),
                ));
            }
        }
        for (i, ((_, layer), rec)) in model.network_mut().layers_mut().into_iter().zip(file.layers).enumerate() {
            let field = |f: &str| format!("layers[{i}].{f}");
            let weight = Tensor::matrix(rec.out_dim, rec.in_dim, rec.weight)
                .map_err(|e| Error::checkpoint(field("weight"), e.to_string()))?;
            let bias = Tensor::vector(rec.bias).map_err(|e| Error::checkpoint(field("bias"), e.to_string()))?;
            *layer = Linear::from_parts(weight, bias).map_err(|e| Error::checkpoint(field("bias"), e.to_string()))?;
        }
        if let Some(v) = &file.intervention_values {
            v.validate()
                .map_err(|e| Error::checkpoint("intervention_values", e.to_string()))?;
            if v.len() != file.dims.num_concepts {
                return Err(Error::checkpoint(
                    "intervention_values",
                    format!("has {} concepts, dims say {}", v.len(), file.dims.num_concepts),
                ));
            }
        }
        Ok(Checkpoint {
            model,
            meta: file.meta,
            intervention_values: file.intervention_values,
        })
    }
}

/// Writes atomically (temp file + rename) and returns the content hash.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<String> {
    let bytes = ck.to_bytes();
    crate::util::write_atomic(path, &bytes)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
