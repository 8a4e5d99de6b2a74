//! `MMCKPT1` checkpoints: magic, little-endian `u32` header length, a JSON
//! header, then one little-endian `f32` blob per named parameter array.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MMCKPT1\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

pub fn encode_checkpoint(model: &Model, step: u64, seed: u64) -> Result<Vec<u8>> {
    let params = model.params();
    let header = CheckpointHeader {
        version: 1,
        config: model.config.clone(),
        step,
        seed,
        tensors: params
            .iter()
            .map(|(name, p)| TensorEntry {
                name: name.clone(),
                len: p.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(MAGIC.len() + 4 + json.len() + model.num_params() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, p) in params {
        for v in p {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, Model)> {
    if bytes.len() < MAGIC.len() + 4 {
        return Err(Error::format(bytes.len() as u64, "truncated checkpoint header"));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"MMCKPT1\""));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = 12 + hlen;
    if bytes.len() < body {
        return Err(Error::format(bytes.len() as u64, "truncated checkpoint JSON header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[12..body]).map_err(|e| Error::format(12, e.to_string()))?;
    if header.version != 1 {
        return Err(Error::format(12, format!("unsupported checkpoint version {}", header.version)));
    }
    let has_anchor = header.tensors.iter().any(|t| t.name == "anchor.weights_raw");
    let anchor = has_anchor.then(|| vec![0.0; header.config.num_modalities]);
    let mut model = Model::new(header.config.clone(), 0, anchor)?;

    let expected: Vec<(String, usize)> = model.params().into_iter().map(|(n, p)| (n, p.len())).collect();
    let found: Vec<(String, usize)> = header.tensors.iter().map(|t| (t.name.clone(), t.len)).collect();
    if expected != found {
        return Err(Error::format(12, "parameter table does not match the model configuration"));
    }
    let total: usize = found.iter().map(|(_, l)| l).sum();
    if bytes.len() != body + total * 4 {
        return Err(Error::format(
            bytes.len().min(body + total * 4) as u64,
            format!("expected {} parameter bytes", total * 4),
        ));
    }
    let mut offset = body;
    for dst in model.params_mut() {
        for v in dst.iter_mut() {
            *v = f32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes")) as f64;
            offset += 4;
        }
    }
    Ok((header, model))
}

pub fn save_checkpoint(model: &Model, step: u64, seed: u64, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model, step, seed)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Model)> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::model::EncoderConfig;

    #[test]
    fn roundtrip_to_f32_precision() {
        let cfg = ModelConfig {
            num_modalities: 3,
            encoder: EncoderConfig::default(),
        };
        let model = Model::new(cfg, 5, Some(vec![0.1, -0.2, 0.3])).unwrap();
        let bytes = encode_checkpoint(&model, 17, 5).unwrap();
        let (header, loaded) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(header.step, 17);
        for ((_, a), (_, b)) in model.params().iter().zip(loaded.params().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*y, *x as f32 as f64);
            }
        }
        // a loaded model re-encodes to identical bytes
        assert_eq!(encode_checkpoint(&loaded, 17, 5).unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let cfg = ModelConfig {
            num_modalities: 2,
            encoder: EncoderConfig::default(),
        };
        let model = Model::new(cfg, 1, None).unwrap();
        let mut bytes = encode_checkpoint(&model, 0, 1).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 2]).is_err());
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format { offset: 0, .. })));
    }
}
