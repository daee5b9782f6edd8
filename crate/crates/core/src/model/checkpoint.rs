//! Binary checkpoint container.
//!
//! ```text
//! magic    8 bytes  "GPTACNCK"
//! version  u32 LE
//! hlen     u64 LE   length of the JSON header
//! header   hlen bytes of JSON: config, vocab hash, tensor table
//! blobs    for each table entry in order: numel × f64 LE
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::partition::ParamKind;
use super::{Model, ModelConfig};
use crate::error::{AcnError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GPTACNCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_hash: String,
    tensors: Vec<TensorEntry>,
}

/// A model plus the hash of the vocabulary it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab_hash: String,
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| AcnError::Checkpoint(format!("truncated at byte {at}")))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

impl Checkpoint {
    pub fn new(model: Model, vocab_hash: impl Into<String>) -> Self {
        Self {
            model,
            vocab_hash: vocab_hash.into(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.params();
        let header = Header {
            config: self.model.config.clone(),
            vocab_hash: self.vocab_hash.clone(),
            tensors: params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    kind: ParamKind::of(name),
                    trainable: t.requires_grad,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let total: usize = params.iter().map(|(_, t)| t.numel() * 8).sum();
        let mut out = Vec::with_capacity(20 + json.len() + total);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut at = 0;
        if take(bytes, &mut at, 8)? != CHECKPOINT_MAGIC {
            return Err(AcnError::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(AcnError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let hlen = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(take(bytes, &mut at, hlen)?)?;
        // Build the skeleton, then fill every tensor from the blob section.
        let mut model = Model::init(header.config.clone(), 0)?;
        let mut slots = model.params_mut();
        if slots.len() != header.tensors.len() {
            return Err(AcnError::Checkpoint(format!(
                "expected {} tensors, header lists {}",
                slots.len(),
                header.tensors.len()
            )));
        }
        for ((name, slot), entry) in slots.iter_mut().zip(&header.tensors) {
            if *name != entry.name || slot.shape() != entry.shape.as_slice() {
                return Err(AcnError::Checkpoint(format!(
                    "tensor {} {:?} does not match expected {name} {:?}",
                    entry.name,
                    entry.shape,
                    slot.shape()
                )));
            }
            let raw = take(bytes, &mut at, slot.numel() * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            **slot = Tensor::new(entry.shape.clone(), data)?.with_grad(entry.trainable);
        }
        drop(slots);
        if at != bytes.len() {
            return Err(AcnError::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - at
            )));
        }
        Ok(Self {
            model,
            vocab_hash: header.vocab_hash,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| AcnError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| AcnError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless this checkpoint was trained with the vocabulary hashing
    /// to `vocab_hash`.
    pub fn check_vocab(&self, vocab_hash: &str) -> Result<()> {
        if self.vocab_hash != vocab_hash {
            return Err(AcnError::Checkpoint(format!(
                "vocabulary hash mismatch: checkpoint {} vs vocab {}",
                self.vocab_hash, vocab_hash
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt() -> Checkpoint {
        let mut cfg = ModelConfig::toy(30, 10);
        cfg.d_model = 8;
        cfg.d_ff = 16;
        cfg.adapter_size = 4;
        let mut m = Model::init(cfg, 5).unwrap();
        m.adapters[1].w_up.data_mut()[3] = 0.25;
        m.copy.b_c.requires_grad = true;
        Checkpoint::new(m, "abc123")
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let c = ckpt();
        let a = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), a);
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let bytes = ckpt().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn vocab_hash_is_checked() {
        let c = ckpt();
        c.check_vocab("abc123").unwrap();
        assert!(c.check_vocab("other").is_err());
    }
}
