//! Checkpoints: a JSON manifest plus a flat little-endian `f64` payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, json_err, Error, Result};
use crate::model::{Dpae, DpaeConfig};

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
pub const CHECKPOINT_PAYLOAD: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in `f64` elements.
    pub offset: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub steps: usize,
    pub epochs: usize,
    pub first_epoch_mean: Option<f64>,
    pub last_epoch_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: DpaeConfig,
    pub init_seed: u64,
    pub params: Vec<ParamEntry>,
    pub total_len: usize,
    pub loss_summary: LossSummary,
    /// Free-form provenance (resolved run settings).
    #[serde(default)]
    pub run: serde_json::Value,
}

pub fn save_checkpoint(
    model: &Dpae,
    init_seed: u64,
    loss_summary: LossSummary,
    run: serde_json::Value,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut params = Vec::new();
    let mut payload = Vec::with_capacity(model.store().numel() * 8);
    let mut offset = 0;
    for (_, p) in model.store().iter() {
        params.push(ParamEntry {
            name: p.name().to_string(),
            shape: p.value().shape().to_vec(),
            offset,
        });
        for v in p.value().data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += p.value().numel();
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        init_seed,
        params,
        total_len: offset,
        loss_summary,
        run,
    };
    let payload_path = dir.join(CHECKPOINT_PAYLOAD);
    fs::write(&payload_path, payload).map_err(io_err(&payload_path))?;
    let manifest_path = dir.join(CHECKPOINT_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(json_err(&manifest_path))?;
    fs::write(&manifest_path, text + "\n").map_err(io_err(&manifest_path))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(json_err(&path))
}

/// Rebuilds the model from the manifest's config and overwrites every
/// parameter with the stored values.
pub fn load_checkpoint(dir: &Path) -> Result<(Dpae, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let payload_path = dir.join(CHECKPOINT_PAYLOAD);
    let bytes = fs::read(&payload_path).map_err(io_err(&payload_path))?;
    let format = |msg: String| Error::Format {
        path: payload_path.clone(),
        msg,
    };
    if manifest.format_version != FORMAT_VERSION {
        return Err(format(format!("unsupported format version {}", manifest.format_version)));
    }
    if bytes.len() != manifest.total_len * 8 {
        return Err(format(format!(
            "payload has {} bytes, manifest expects {}",
            bytes.len(),
            manifest.total_len * 8
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    let mut model = Dpae::new(manifest.config.clone(), manifest.init_seed)?;
    let (_, store) = model.parts_mut();
    if store.len() != manifest.params.len() {
        return Err(format(format!(
            "model has {} parameters, checkpoint has {}",
            store.len(),
            manifest.params.len()
        )));
    }
    for entry in &manifest.params {
        let id = store
            .find(&entry.name)
            .ok_or_else(|| format(format!("unknown parameter {}", entry.name)))?;
        let param = store.get_mut(id);
        if param.value().shape() != entry.shape.as_slice() {
            return Err(format(format!(
                "{}: shape {:?} does not match model {:?}",
                entry.name,
                entry.shape,
                param.value().shape()
            )));
        }
        let n = param.value().numel();
        let src = values
            .get(entry.offset..entry.offset + n)
            .ok_or_else(|| format(format!("{}: offset out of range", entry.name)))?;
        param.value_mut().data_mut().copy_from_slice(src);
    }
    Ok((model, manifest))
}
