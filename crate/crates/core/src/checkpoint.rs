//! Self-describing checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! | offset | size | content                                   |
//! |--------|------|-------------------------------------------|
//! | 0      | 8    | magic `EVELMCKP`                          |
//! | 8      | 4    | `u32` format version (currently 1)        |
//! | 12     | 8    | `u64` header length `H`                   |
//! | 20     | H    | UTF-8 JSON [`CheckpointHeader`]           |
//! | 20+H   | 8·N  | tensor data, `f64` LE, in directory order |
//! | end-32 | 32   | SHA-256 of every preceding byte           |
//!
//! Each directory entry gives a tensor's name, shape, trainable flag and
//! element offset into the data section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{EmbeddingMode, Model, ModelConfig};
use crate::rng::RngState;
use crate::tensorcore::Tensor;
use crate::varneuron::ControlState;

const MAGIC: &[u8; 8] = b"EVELMCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    /// Full run configuration, kept opaque so that checkpoints stay readable
    /// by tools that only need the model.
    pub run_config: Option<serde_json::Value>,
    pub rng: RngState,
    pub epoch: usize,
    pub select_by: String,
    pub metric: f64,
    pub controls: Vec<ControlState>,
    pub skipped_batches: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
}

/// Metadata stored next to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub run_config: Option<serde_json::Value>,
    pub rng: RngState,
    pub epoch: usize,
    pub select_by: String,
    pub metric: f64,
    pub skipped_batches: usize,
}

pub fn encode(model: &Model, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut offset = 0;
    for (_, p) in model.store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
            offset,
        });
        offset += p.value.numel();
    }
    let header = CheckpointHeader {
        model: model.config.clone(),
        run_config: meta.run_config.clone(),
        rng: meta.rng,
        epoch: meta.epoch,
        select_by: meta.select_by.clone(),
        metric: meta.metric,
        controls: model.controls.clone(),
        skipped_batches: meta.skipped_batches,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(20 + json.len() + 8 * offset + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, p) in model.store.iter() {
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 20 + 32 {
        return Err(Error::Checksum);
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(Error::Checksum);
    }
    if &body[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let header_end = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::Checkpoint("header length exceeds file".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&body[20..header_end])?;
    let data = &body[header_end..];
    let n_values: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if data.len() != 8 * n_values {
        return Err(Error::Checkpoint(
            "tensor data length does not match directory".into(),
        ));
    }

    let frozen = match header.model.embedding_mode {
        EmbeddingMode::FrozenFromFile => Some(Tensor::zeros(&[
            header.model.vocab_size,
            header.model.d_model,
        ])),
        EmbeddingMode::Learned => None,
    };
    let mut model = Model::with_embedding(header.model.clone(), 0, frozen)?;
    if model.store.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, configuration expects {}",
            header.tensors.len(),
            model.store.len()
        )));
    }
    for entry in &header.tensors {
        let id = model
            .store
            .find(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", entry.name)))?;
        if model.store.value(id).shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {}",
                entry.name
            )));
        }
        let n: usize = entry.shape.iter().product();
        let vals = data[8 * entry.offset..8 * (entry.offset + n)]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *model.store.value_mut(id) = Tensor::new(entry.shape.clone(), vals)?;
        model.store.set_trainable(id, entry.trainable);
    }
    if header.controls.len() != model.controls.len() {
        return Err(Error::Checkpoint("control state count mismatch".into()));
    }
    model.controls = header.controls.clone();
    Ok(Checkpoint { header, model })
}

pub fn save(path: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    fs::write(path, encode(model, meta)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
