//! Self-describing binary checkpoints.
//!
//! Layout: an 8-byte magic, a little-endian u32 header length, a JSON header
//! (format version, sharing flags, hyperparameters, vocabulary hash, the
//! explicit tying map, tensor names with shapes, optimizer presence, step
//! counter), then each physical tensor as raw little-endian f64 values in
//! header order, then optionally the optimizer's first and second moments.
//!
//! Writes go to a temp file in the same directory and are renamed into
//! place.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{init_params, HyperParams, ModelError, Representor, SharingConfig};
use crate::train::OptimizerState;

const MAGIC: &[u8; 8] = b"RPRSTOR1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    Corrupt(String),
    Model(ModelError),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io error: {e}"),
            CheckpointError::Corrupt(msg) => write!(f, "corrupt checkpoint: {msg}"),
            CheckpointError::Model(e) => write!(f, "checkpoint model error: {e}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

impl From<ModelError> for CheckpointError {
    fn from(e: ModelError) -> Self {
        CheckpointError::Model(e)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    sharing: SharingConfig,
    hyper: HyperParams,
    vocab_sha256: String,
    tying: BTreeMap<String, String>,
    tensors: Vec<TensorRecord>,
    has_optimizer: bool,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
}

/// Everything a checkpoint restores.
pub struct Checkpoint {
    pub model: Representor,
    pub vocab_sha256: String,
    pub optimizer: Option<OptimizerState>,
    pub step: u64,
}

pub fn save(
    model: &Representor,
    vocab_sha256: &str,
    optimizer: Option<&OptimizerState>,
    step: u64,
    path: &Path,
) -> Result<(), CheckpointError> {
    let tensors: Vec<TensorRecord> = model
        .store
        .physical_iter()
        .map(|(name, t)| TensorRecord { name: name.clone(), shape: t.shape() })
        .collect();
    let header = Header {
        version: FORMAT_VERSION,
        sharing: model.sharing,
        hyper: model.hyper,
        vocab_sha256: vocab_sha256.to_string(),
        tying: model.store.tying_map().clone(),
        tensors,
        has_optimizer: optimizer.is_some(),
        step,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| CheckpointError::Corrupt(format!("header encode: {e}")))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (_, tensor) in model.store.physical_iter() {
        for v in tensor.values().iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(opt) = optimizer {
        for (name, tensor) in model.store.physical_iter() {
            let zeros = vec![0.0; tensor.numel()];
            let m = opt.first_moment.get(name).unwrap_or(&zeros);
            let v = opt.second_moment.get(name).unwrap_or(&zeros);
            for x in m.iter().chain(v.iter()) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }

    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Corrupt("bad magic".into()));
    }
    let mut len_bytes = [0u8; 4];
    f.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| CheckpointError::Corrupt(format!("header decode: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(CheckpointError::Corrupt(format!(
            "unsupported format version {}",
            header.version
        )));
    }

    let store = init_params(&header.sharing, &header.hyper, 0)?;
    if *store.tying_map() != header.tying {
        return Err(CheckpointError::Corrupt(
            "stored tying map does not match the sharing configuration".into(),
        ));
    }
    let mut read_array = |n: usize| -> Result<Vec<f64>, CheckpointError> {
        let mut bytes = vec![0u8; n * 8];
        f.read_exact(&mut bytes)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    for rec in &header.tensors {
        let tensor = store.physical_get(&rec.name).ok_or_else(|| {
            CheckpointError::Corrupt(format!("unexpected tensor {}", rec.name))
        })?;
        if tensor.shape() != rec.shape {
            return Err(CheckpointError::Corrupt(format!(
                "tensor {} shape {:?} does not match expected {:?}",
                rec.name,
                rec.shape,
                tensor.shape()
            )));
        }
        let values = read_array(tensor.numel())?;
        tensor.set_values(&values);
    }
    let optimizer = if header.has_optimizer {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for rec in &header.tensors {
            let n: usize = rec.shape.iter().product();
            first.insert(rec.name.clone(), read_array(n)?);
            second.insert(rec.name.clone(), read_array(n)?);
        }
        Some(OptimizerState {
            first_moment: first,
            second_moment: second,
            step: header.step,
        })
    } else {
        None
    };

    Ok(Checkpoint {
        model: Representor {
            sharing: header.sharing,
            hyper: header.hyper,
            store,
        },
        vocab_sha256: header.vocab_sha256,
        optimizer,
        step: header.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SharingConfig;

    fn toy_model(seed: u64) -> Representor {
        let hyper = HyperParams {
            num_layers: 2,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_rows: 13,
            max_len: 32,
        };
        Representor::init(SharingConfig::representor(), hyper, seed).unwrap()
    }

    #[test]
    fn round_trip_restores_values_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = toy_model(42);
        save(&model, "deadbeef", None, 17, &path).unwrap();
        let restored = load(&path).unwrap();
        assert_eq!(restored.vocab_sha256, "deadbeef");
        assert_eq!(restored.step, 17);
        assert!(restored.optimizer.is_none());
        assert_eq!(restored.model.sharing, model.sharing);
        assert_eq!(restored.model.hyper, model.hyper);
        for (name, t) in model.store.physical_iter() {
            let r = restored.model.store.physical_get(name).unwrap();
            assert_eq!(t.value_vec(), r.value_vec(), "{name}");
        }
    }

    #[test]
    fn round_trip_with_optimizer_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = toy_model(1);
        let mut opt = OptimizerState::new(&model.store);
        opt.step = 5;
        for m in opt.first_moment.values_mut() {
            for (i, x) in m.iter_mut().enumerate() {
                *x = i as f64 * 0.5;
            }
        }
        save(&model, "cafe", Some(&opt), 5, &path).unwrap();
        let restored = load(&path).unwrap();
        let ropt = restored.optimizer.unwrap();
        assert_eq!(ropt.step, 5);
        assert_eq!(ropt.first_moment, opt.first_moment);
        assert_eq!(ropt.second_moment, opt.second_moment);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::Corrupt(_))));
    }
}
