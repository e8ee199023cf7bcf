//! Self-describing checkpoint container.
//!
//! Layout, stable across versions:
//!
//! ```text
//! bytes 0..4    magic "DWCP"
//! bytes 4..8    format version, u32 little-endian (currently 1)
//! bytes 8..16   header length H, u64 little-endian
//! bytes 16..16+H  header, UTF-8 JSON (see `Header`)
//! rest          tensor payload: f64 little-endian, tensors back to back
//!               in header order
//! ```
//!
//! The header records the model config, run seed, scheduler state (alpha,
//! class weights, step count), the frozen answer-class table, segmentation
//! class names, the serialized vocabulary, and a tensor directory of
//! (name, shape, element offset, element count).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{init_params, ModelConfig, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DWCP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt header: {0}")]
    Header(String),
    #[error("tensor payload truncated: expected {expected} elements, file holds {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("tensor directory mismatch: {0}")]
    TensorMismatch(String),
    #[error("invalid model config in checkpoint: {0}")]
    BadConfig(String),
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct SchedulerEntry {
    alpha: f64,
    class_weights: Vec<f64>,
    step_count: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    seed: u64,
    scheduler: SchedulerEntry,
    answer_classes: Vec<String>,
    class_names: Vec<String>,
    vocab: String,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub alpha: f64,
    pub class_weights: Vec<f64>,
    pub scheduler_steps: usize,
    pub answer_classes: Vec<String>,
    pub class_names: Vec<String>,
    pub vocab_text: String,
    pub params: ModelParams<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let named = self.params.named();
        let mut tensors = Vec::with_capacity(named.len());
        let mut offset = 0usize;
        for (name, tensor) in &named {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: tensor.shape().to_vec(),
                offset,
                len: tensor.numel(),
            });
            offset += tensor.numel();
        }
        let header = Header {
            config: self.config.clone(),
            seed: self.seed,
            scheduler: SchedulerEntry {
                alpha: self.alpha,
                class_weights: self.class_weights.clone(),
                step_count: self.scheduler_steps,
            },
            answer_classes: self.answer_classes.clone(),
            class_names: self.class_names.clone(),
            vocab: self.vocab_text.clone(),
            tensors,
        };
        let header_json =
            serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;

        let mut bytes =
            Vec::with_capacity(16 + header_json.len() + offset * std::mem::size_of::<f64>());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header_json);
        for (_, tensor) in &named {
            for v in tensor.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path)?;
        if bytes.len() < 16 || &bytes[0..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16 + header_len;
        if bytes.len() < header_end {
            return Err(CheckpointError::Header("header extends past end of file".to_string()));
        }
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        header.config.validate().map_err(|e| CheckpointError::BadConfig(e.to_string()))?;

        let payload = &bytes[header_end..];
        let total_elems: usize = header.tensors.iter().map(|t| t.len).sum();
        if payload.len() < total_elems * 8 {
            return Err(CheckpointError::Truncated {
                expected: total_elems,
                actual: payload.len() / 8,
            });
        }

        // rebuild the parameter structure for this config, then fill each
        // tensor from the directory by name
        let mut params = init_params::<f64>(&header.config, header.seed)
            .map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
        {
            let mut named = params.named_mut();
            if named.len() != header.tensors.len() {
                return Err(CheckpointError::TensorMismatch(format!(
                    "checkpoint holds {} tensors, model expects {}",
                    header.tensors.len(),
                    named.len()
                )));
            }
            for ((name, tensor), entry) in named.iter_mut().zip(header.tensors.iter()) {
                if *name != entry.name {
                    return Err(CheckpointError::TensorMismatch(format!(
                        "expected tensor {name}, found {}",
                        entry.name
                    )));
                }
                if tensor.shape() != entry.shape.as_slice() {
                    return Err(CheckpointError::TensorMismatch(format!(
                        "{name}: shape {:?} in file, {:?} expected",
                        entry.shape,
                        tensor.shape()
                    )));
                }
                let mut data = Vec::with_capacity(entry.len);
                let start = entry.offset * 8;
                for chunk in payload[start..start + entry.len * 8].chunks_exact(8) {
                    data.push(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
                }
                **tensor = Tensor::from_vec(entry.shape.clone(), data)
                    .map_err(|e| CheckpointError::TensorMismatch(e.to_string()))?;
            }
        }

        Ok(Checkpoint {
            config: header.config,
            seed: header.seed,
            alpha: header.scheduler.alpha,
            class_weights: header.scheduler.class_weights,
            scheduler_steps: header.scheduler.step_count,
            answer_classes: header.answer_classes,
            class_names: header.class_names,
            vocab_text: header.vocab,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::Vocabulary;

    fn sample_checkpoint() -> Checkpoint {
        let vocab = Vocabulary::default_charset();
        let config = ModelConfig::tiny(2, 3, vocab.size());
        let params = init_params::<f64>(&config, 77).unwrap();
        Checkpoint {
            config,
            seed: 77,
            alpha: 0.4321,
            class_weights: vec![1.0, 0.9, 1.2],
            scheduler_steps: 42,
            answer_classes: vec!["yes".into(), "no".into(), "3".into()],
            class_names: vec!["grass".into(), "pool".into()],
            vocab_text: vocab.to_text(),
            params,
        }
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("datwep-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("test.ckpt");
        let original = sample_checkpoint();
        original.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();

        assert_eq!(loaded.config, original.config);
        assert_eq!(loaded.alpha.to_bits(), original.alpha.to_bits());
        assert_eq!(loaded.class_weights, original.class_weights);
        assert_eq!(loaded.scheduler_steps, 42);
        assert_eq!(loaded.answer_classes, original.answer_classes);
        assert_eq!(loaded.vocab_text, original.vocab_text);
        for ((name, a), (_, b)) in original.params.named().iter().zip(loaded.params.named().iter())
        {
            assert_eq!(a.shape(), b.shape(), "{name}");
            for (x, y) in a.data().iter().zip(b.data().iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name} payload drifted");
            }
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        let dir = std::env::temp_dir().join(format!("datwep-ckpt-bad-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();

        let garbage = dir.join("garbage.ckpt");
        fs::write(&garbage, b"not a checkpoint").unwrap();
        assert!(matches!(Checkpoint::load(&garbage), Err(CheckpointError::BadMagic)));

        let path = dir.join("trunc.ckpt");
        sample_checkpoint().save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 64]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::Truncated { .. })));

        fs::remove_dir_all(&dir).unwrap();
    }
}
