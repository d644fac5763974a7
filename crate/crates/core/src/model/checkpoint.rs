//! Binary checkpoint: `AKWS`, `u32` version, `u64` metadata length, JSON
//! metadata, then every tensor as little-endian `f32` in directory order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{KwsModel, ModelConfig};
use crate::audio::FeatureStats;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AKWS";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub val_accuracy: f64,
    pub tool_version: String,
}

/// Offsets are in bytes from the start of the tensor payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    labels: Vec<String>,
    feature_stats: FeatureStats,
    training: TrainingMeta,
    tensors: Vec<TensorEntry>,
}

/// A trained source model with everything needed to score new audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: KwsModel<f32>,
    pub labels: Vec<String>,
    pub feature_stats: FeatureStats,
    pub training: TrainingMeta,
}

fn tensors(model: &KwsModel<f32>) -> Vec<(String, &Tensor<f32>)> {
    let mut out: Vec<(String, &Tensor<f32>)> = model.params.iter().map(|p| (p.name.clone(), &p.value)).collect();
    for rs in &model.running {
        out.push((format!("{}.running_mean", rs.name), &rs.mean));
        out.push((format!("{}.running_var", rs.name), &rs.var));
    }
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let list = tensors(&self.model);
        let mut offset = 0u64;
        let entries = list
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += 4 * t.numel() as u64;
                e
            })
            .collect();
        let meta = Metadata {
            config: self.model.config.clone(),
            labels: self.labels.clone(),
            feature_stats: self.feature_stats.clone(),
            training: self.training.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in list {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let meta_end = 16usize.checked_add(meta_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated metadata"))?;
        let meta: Metadata = serde_json::from_slice(&bytes[16..meta_end])?;
        let payload = &bytes[meta_end..];

        let mut model = KwsModel::<f32>::build(&meta.config, 0)?;
        if meta.labels.len() != meta.config.num_classes {
            return Err(bad(format!("checkpoint has {} labels for {} classes", meta.labels.len(), meta.config.num_classes)));
        }
        let expected: Vec<(String, Vec<usize>)> = tensors(&model).into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        let mut values = Vec::with_capacity(expected.len());
        for (name, shape) in &expected {
            let entry = meta.tensors.iter().find(|e| &e.name == name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if &entry.shape != shape {
                return Err(bad(format!("tensor {name} has shape {:?}, expected {shape:?}", entry.shape)));
            }
            let start = entry.offset as usize;
            let end = start + 4 * shape.iter().product::<usize>();
            let raw = payload.get(start..end).ok_or_else(|| bad(format!("missing tensor {name}: payload truncated")))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            values.push(Tensor::new(shape.clone(), data)?);
        }
        if meta.tensors.len() != expected.len() {
            return Err(bad(format!("checkpoint lists {} tensors, architecture has {}", meta.tensors.len(), expected.len())));
        }
        let mut values = values.into_iter();
        for p in &mut model.params {
            p.value = values.next().unwrap();
        }
        for rs in &mut model.running {
            rs.mean = values.next().unwrap();
            rs.var = values.next().unwrap();
        }
        Ok(Checkpoint { model, labels: meta.labels, feature_stats: meta.feature_stats, training: meta.training })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::file(path, msg),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut model = KwsModel::<f32>::build(&ModelConfig::small_kws(3), 7).unwrap();
        for (i, rs) in model.running_stats_mut().iter_mut().enumerate() {
            rs.mean.data_mut()[0] = i as f32 * 0.25;
            rs.var.data_mut()[0] = 2.0 + i as f32;
        }
        Checkpoint {
            model,
            labels: vec!["a".into(), "b".into(), "c".into()],
            feature_stats: FeatureStats { mean: vec![0.5; 40], std: vec![1.5; 40] },
            training: TrainingMeta { seed: 7, epochs: 2, best_epoch: 1, val_accuracy: 0.5, tool_version: "test".into() },
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(back.model.bitwise_eq(&ck.model));
        assert_eq!(back.labels, ck.labels);
        assert_eq!(back.feature_stats, ck.feature_stats);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"AKWS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let meta: serde_json::Value = serde_json::from_slice(&bytes[16..16 + meta_len]).unwrap();
        let n = sample().model.num_parameters() + 2 * (16 + 16 + 24 + 24 + 32 + 32 + 32);
        assert_eq!(bytes.len(), 16 + meta_len + 4 * n);
        assert_eq!(meta["tensors"][0]["name"], "stem.conv.weight");
        assert_eq!(meta["tensors"][0]["offset"], 0);
    }

    #[test]
    fn rejects_bad_input() {
        let err = Checkpoint::from_bytes(b"RIFF0000000000000000").unwrap_err();
        assert!(err.to_string().contains("not a checkpoint"));

        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 2;
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("version 2"));

        let bytes = sample().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(err.to_string().contains("missing tensor"), "{err}");
    }

    #[test]
    fn load_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        std::fs::write(&p, b"nope").unwrap();
        let err = Checkpoint::load(&p).unwrap_err().to_string();
        assert!(err.contains("x.ckpt") && err.contains("not a checkpoint"), "{err}");
    }
}
