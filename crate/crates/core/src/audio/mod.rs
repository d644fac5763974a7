//! Audio loading and MFCC feature extraction.

mod mfcc;
mod wav;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use mfcc::{hz_to_mel, mel_to_hz, Mfcc, MfccConfig};
pub use wav::{fit_to_length, load_wav, read_wav, write_wav_pcm16};

pub const SAMPLE_RATE: u32 = 16_000;
/// One second at [`SAMPLE_RATE`].
pub const CLIP_SAMPLES: usize = SAMPLE_RATE as usize;
pub const NUM_COEFFS: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub source_path: Option<String>,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>) -> Self {
        AudioClip { samples, sample_rate: SAMPLE_RATE, source_path: None }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Root-mean-square level, accumulated in `f64`.
    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }
}

pub fn rms(samples: &[f32]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    (samples.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / samples.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameParams {
    pub window_len: usize,
    pub hop_len: usize,
    pub fft_size: usize,
}

/// MFCC matrix `[coefficients, frames]` for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub coeffs: Tensor<f32>,
    pub frame_params: FrameParams,
}

impl FeatureMap {
    pub fn num_coeffs(&self) -> usize {
        self.coeffs.shape()[0]
    }

    pub fn num_frames(&self) -> usize {
        self.coeffs.shape()[1]
    }

    /// Per-coefficient standardization `(x - mean) / std`.
    pub fn normalize(&self, stats: &FeatureStats) -> Result<FeatureMap> {
        let rows = self.num_coeffs();
        if stats.mean.len() != rows || stats.std.len() != rows {
            return Err(Error::Shape(format!("feature stats have {} coefficients, feature map has {rows}", stats.mean.len())));
        }
        let t = self.num_frames();
        let mut out = self.coeffs.clone();
        for (r, row) in out.data_mut().chunks_mut(t).enumerate() {
            let (m, s) = (stats.mean[r], stats.std[r]);
            for v in row {
                *v = (*v - m) / s;
            }
        }
        Ok(FeatureMap { coeffs: out, frame_params: self.frame_params })
    }
}

/// Per-coefficient mean and standard deviation over a source training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl FeatureStats {
    pub const STD_FLOOR: f32 = 1e-6;

    pub fn identity(rows: usize) -> Self {
        FeatureStats { mean: vec![0.0; rows], std: vec![1.0; rows] }
    }

    /// Statistics over every frame of every map.
    pub fn from_maps<'a>(maps: impl IntoIterator<Item = &'a FeatureMap>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for fm in maps {
            let (rows, t) = (fm.num_coeffs(), fm.num_frames());
            if sum.is_empty() {
                sum = vec![0.0; rows];
                sq = vec![0.0; rows];
            } else if sum.len() != rows {
                return Err(Error::Shape("feature maps disagree on coefficient count".into()));
            }
            for (r, row) in fm.coeffs.data().chunks(t).enumerate() {
                for &v in row {
                    sum[r] += v as f64;
                    sq[r] += (v as f64) * (v as f64);
                }
            }
            count += t;
        }
        if count == 0 {
            return Err(Error::Dataset("cannot compute feature statistics from zero frames".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| ((q / n - m * m).max(0.0).sqrt() as f32).max(Self::STD_FLOOR)).collect();
        Ok(FeatureStats { mean: mean.iter().map(|&m| m as f32).collect(), std })
    }
}

const FEATURE_MAGIC: &[u8; 8] = b"AKWSFEAT";

/// Serialize a feature map: magic, `u32` rows, `u32` cols, little-endian `f32` row-major payload.
pub fn encode_feature_map(fm: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * fm.coeffs.numel());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(fm.num_coeffs() as u32).to_le_bytes());
    out.extend_from_slice(&(fm.num_frames() as u32).to_le_bytes());
    for v in fm.coeffs.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parse the payload written by [`encode_feature_map`] into a `[rows, cols]` tensor.
pub fn decode_feature_map(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 16 || &bytes[..8] != FEATURE_MAGIC {
        return Err(Error::Audio("not a feature file".into()));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let payload = &bytes[16..];
    if payload.len() != rows * cols * 4 {
        return Err(Error::Audio(format!("feature payload has {} bytes, expected {}", payload.len(), rows * cols * 4)));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(vec![rows, cols], data)
}

pub fn write_feature_file(path: &Path, fm: &FeatureMap) -> Result<()> {
    fs::write(path, encode_feature_map(fm)).map_err(|e| Error::io(path, e))
}
