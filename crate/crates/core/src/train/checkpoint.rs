//! Checkpoint directories: `manifest.json`, `params.bin` and `optim.bin`.
//!
//! Tensor blobs are raw little-endian `f64` in row-major order; the manifest
//! records each tensor's name, shape and byte offset.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autograd::Mat;
use crate::config::TrainConfig;
use crate::dataset::{FeatureStats, Manifest};
use crate::error::CheckpointError;
use crate::model::Model;

use super::{Adam, EpochMetrics, Trainer};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub offset: usize,
}

/// Everything in `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub dataset: Manifest,
    pub frames: usize,
    pub feature_stats: FeatureStats,
    pub tensors: Vec<TensorEntry>,
    pub optimizer_step: u64,
    /// Random streams are derived from the seed and these counters.
    pub rng: RngState,
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: usize,
}

const FIELDS: [&str; 10] = [
    "format_version",
    "config",
    "dataset",
    "frames",
    "feature_stats",
    "tensors",
    "optimizer_step",
    "rng",
    "epoch",
    "history",
];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_blob(mats: &[&Mat]) -> Vec<u8> {
    let mut out = Vec::with_capacity(mats.iter().map(|m| m.len() * 8).sum());
    for m in mats {
        for v in m.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(trainer: &Trainer, dir: &Path) -> Result<(), CheckpointError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let store = &trainer.model.store;
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0;
    for id in store.ids() {
        let m = store.get(id);
        tensors.push(TensorEntry {
            name: store.name(id).to_string(),
            shape: [m.nrows(), m.ncols()],
            dtype: "f64le".into(),
            offset,
        });
        offset += m.len() * 8;
    }
    let params: Vec<&Mat> = store.ids().map(|id| store.get(id)).collect();
    let moments: Vec<&Mat> = trainer.optim.m.iter().chain(trainer.optim.v.iter()).collect();
    let ck = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        config: trainer.cfg.clone(),
        dataset: trainer.manifest.clone(),
        frames: trainer.model.dims.frames,
        feature_stats: trainer.stats,
        tensors,
        optimizer_step: trainer.optim.step,
        rng: RngState {
            seed: trainer.cfg.train.seed,
            epoch: trainer.epoch,
        },
        epoch: trainer.epoch,
        history: trainer.history.clone(),
    };
    let pp = dir.join("params.bin");
    std::fs::write(&pp, write_blob(&params)).map_err(io_err(&pp))?;
    let op = dir.join("optim.bin");
    std::fs::write(&op, write_blob(&moments)).map_err(io_err(&op))?;
    let mp = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&ck).expect("manifest serializes");
    std::fs::write(&mp, text).map_err(io_err(&mp))
}

fn field<T: DeserializeOwned>(obj: &serde_json::Map<String, Value>, name: &str) -> Result<T, CheckpointError> {
    let v = obj.get(name).ok_or_else(|| CheckpointError::Manifest {
        field: name.into(),
        msg: "missing".into(),
    })?;
    serde_json::from_value(v.clone()).map_err(|e| CheckpointError::Manifest {
        field: name.into(),
        msg: e.to_string(),
    })
}

fn parse_manifest(text: &str) -> Result<Checkpoint, CheckpointError> {
    let v: Value = serde_json::from_str(text).map_err(|e| CheckpointError::Manifest {
        field: "<root>".into(),
        msg: e.to_string(),
    })?;
    let obj = v.as_object().ok_or_else(|| CheckpointError::Manifest {
        field: "<root>".into(),
        msg: "expected a JSON object".into(),
    })?;
    if let Some(k) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(CheckpointError::Manifest {
            field: k.clone(),
            msg: "unknown field".into(),
        });
    }
    let version: u32 = field(obj, "format_version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    Ok(Checkpoint {
        format_version: version,
        config: field(obj, "config")?,
        dataset: field(obj, "dataset")?,
        frames: field(obj, "frames")?,
        feature_stats: field(obj, "feature_stats")?,
        tensors: field(obj, "tensors")?,
        optimizer_step: field(obj, "optimizer_step")?,
        rng: field(obj, "rng")?,
        epoch: field(obj, "epoch")?,
        history: field(obj, "history")?,
    })
}

fn read_f64s(bytes: &[u8], offset: usize, n: usize, name: &str) -> Result<Vec<f64>, CheckpointError> {
    let end = offset + n * 8;
    if end > bytes.len() {
        return Err(CheckpointError::Tensor {
            name: name.into(),
            msg: format!("needs bytes {offset}..{end}, blob has {}", bytes.len()),
        });
    }
    Ok(bytes[offset..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Restores a trainer, including optimizer moments, from `dir`.
pub fn load_checkpoint(dir: &Path) -> Result<Trainer, CheckpointError> {
    let mp = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mp).map_err(io_err(&mp))?;
    let ck = parse_manifest(&text)?;
    ck.config.validate().map_err(|e| CheckpointError::Manifest {
        field: "config".into(),
        msg: e.to_string(),
    })?;
    ck.dataset.validate().map_err(|e| CheckpointError::Manifest {
        field: "dataset".into(),
        msg: e.to_string(),
    })?;
    let mut model = Model::new(
        &ck.config.model,
        &ck.dataset,
        ck.frames,
        ck.config.cluster.num_prototypes,
        ck.config.train.seed,
    )
    .map_err(|e| CheckpointError::Manifest {
        field: "config".into(),
        msg: e.to_string(),
    })?;
    if ck.tensors.len() != model.store.len() {
        return Err(CheckpointError::Manifest {
            field: "tensors".into(),
            msg: format!("{} entries, the configured model has {}", ck.tensors.len(), model.store.len()),
        });
    }
    let pp = dir.join("params.bin");
    let blob = std::fs::read(&pp).map_err(io_err(&pp))?;
    let ids: Vec<_> = model.store.ids().collect();
    for (entry, id) in ck.tensors.iter().zip(ids) {
        let expect = model.store.get(id).dim();
        if entry.name != model.store.name(id) {
            return Err(CheckpointError::Tensor {
                name: entry.name.clone(),
                msg: format!("expected `{}` at this position", model.store.name(id)),
            });
        }
        if (entry.shape[0], entry.shape[1]) != expect || entry.dtype != "f64le" {
            return Err(CheckpointError::Tensor {
                name: entry.name.clone(),
                msg: format!("shape {:?} {} does not match {:?} f64le", entry.shape, entry.dtype, expect),
            });
        }
        let vals = read_f64s(&blob, entry.offset, expect.0 * expect.1, &entry.name)?;
        *model.store.get_mut(id) = Mat::from_shape_vec(expect, vals).expect("sized");
    }
    let total: usize = ck.tensors.iter().map(|t| t.shape[0] * t.shape[1] * 8).sum();
    if blob.len() != total {
        return Err(CheckpointError::Tensor {
            name: "params.bin".into(),
            msg: format!("{} bytes, manifest describes {total}", blob.len()),
        });
    }

    let mut optim = Adam::new(&model.store);
    optim.step = ck.optimizer_step;
    let op = dir.join("optim.bin");
    let moments = std::fs::read(&op).map_err(io_err(&op))?;
    if moments.len() != 2 * total {
        return Err(CheckpointError::Tensor {
            name: "optim.bin".into(),
            msg: format!("{} bytes, expected {}", moments.len(), 2 * total),
        });
    }
    let mut off = 0;
    for slot in optim.m.iter_mut().chain(optim.v.iter_mut()) {
        let vals = read_f64s(&moments, off, slot.len(), "optim.bin")?;
        off += slot.len() * 8;
        *slot = Mat::from_shape_vec(slot.dim(), vals).expect("sized");
    }

    Ok(Trainer {
        cfg: ck.config,
        manifest: ck.dataset,
        model,
        optim,
        stats: ck.feature_stats,
        epoch: ck.epoch,
        history: ck.history,
    })
}
