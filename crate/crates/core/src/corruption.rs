//! Deterministic waveform corruption: additive Gaussian noise at severity δ
//! and environmental noise mixed at a target SNR.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioClip};
use crate::error::{Error, Result};
use crate::rng::{self, streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian { delta: f64 },
    Environmental { category: String, snr_db: f64 },
}

impl NoiseKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseKind::Gaussian { delta } if !(delta.is_finite() && *delta >= 0.0) => {
                Err(Error::Config(format!("gaussian delta must be finite and ≥ 0, got {delta}")))
            }
            NoiseKind::Environmental { snr_db, .. } if !snr_db.is_finite() => {
                Err(Error::Config(format!("snr_db must be finite, got {snr_db}")))
            }
            NoiseKind::Environmental { category, .. } if category.is_empty() => {
                Err(Error::Config("environmental noise needs a category".into()))
            }
            _ => Ok(()),
        }
    }
}

/// `gaussian:<δ>` or `env:<category>:<snr_db>`.
impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseKind::Gaussian { delta } => write!(f, "gaussian:{delta}"),
            NoiseKind::Environmental { category, snr_db } => write!(f, "env:{category}:{snr_db}"),
        }
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("noise must be gaussian:<delta> or env:<category>:<snr_db>, got '{s}'"));
        let kind = match s.split(':').collect::<Vec<_>>()[..] {
            ["gaussian", delta] => NoiseKind::Gaussian { delta: delta.parse().map_err(|_| bad())? },
            ["env", category, snr] => NoiseKind::Environmental { category: category.to_string(), snr_db: snr.parse().map_err(|_| bad())? },
            _ => return Err(bad()),
        };
        kind.validate()?;
        Ok(kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(flatten)]
    pub kind: NoiseKind,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn gaussian(delta: f64, seed: u64) -> Self {
        NoiseSpec { kind: NoiseKind::Gaussian { delta }, seed }
    }

    pub fn environmental(category: &str, snr_db: f64, seed: u64) -> Self {
        NoiseSpec { kind: NoiseKind::Environmental { category: category.to_string(), snr_db }, seed }
    }

    /// Corrupt the `index`-th utterance of a stream. Each utterance draws from
    /// its own sub-seed, so the result does not depend on batch order.
    pub fn apply(&self, clip: &AudioClip, index: u64, bank: Option<&NoiseBank>) -> Result<AudioClip> {
        let seed = rng::derive_seed(self.seed, streams::CORRUPTION, index);
        match &self.kind {
            NoiseKind::Gaussian { delta } => Ok(add_gaussian(clip, *delta, seed)),
            NoiseKind::Environmental { category, snr_db } => {
                let bank = bank.ok_or_else(|| Error::Config(format!("noise '{}' needs a noise bank", self.kind)))?;
                let clips = bank.category(category)?;
                let pick = rng::stream(seed).random_range(0..clips.len());
                let crop_seed = rng::derive_seed(seed, streams::NOISE_CROP, 0);
                mix_at_snr(clip, &clips[pick], *snr_db, crop_seed)
            }
        }
    }
}

/// `out[i] = clamp(in[i] + δ·n_i, -1, 1)` with `n_i` i.i.d. standard normal.
pub fn add_gaussian(clip: &AudioClip, delta: f64, seed: u64) -> AudioClip {
    if delta == 0.0 {
        return clip.clone();
    }
    let mut r = rng::stream(seed);
    let samples = clip
        .samples
        .iter()
        .map(|&s| {
            let n: f64 = StandardNormal.sample(&mut r);
            (s as f64 + delta * n).clamp(-1.0, 1.0) as f32
        })
        .collect();
    AudioClip { samples, sample_rate: clip.sample_rate, source_path: clip.source_path.clone() }
}

/// Result of [`mix_at_snr_detailed`]: the mixture plus the exact noise
/// segment and gain used, so the achieved SNR can be re-measured.
#[derive(Debug, Clone)]
pub struct Mixture {
    pub clip: AudioClip,
    pub noise_crop: Vec<f32>,
    pub gain: f64,
}

impl Mixture {
    /// SNR of speech against the scaled noise, before clamping.
    pub fn pre_clamp_snr_db(&self, speech: &AudioClip) -> f64 {
        let noise_rms = audio::rms(&self.noise_crop) * self.gain;
        20.0 * (speech.rms() / noise_rms).log10()
    }
}

pub fn mix_at_snr(clip: &AudioClip, noise: &AudioClip, snr_db: f64, seed: u64) -> Result<AudioClip> {
    mix_at_snr_detailed(clip, noise, snr_db, seed).map(|m| m.clip)
}

/// Mix `noise` into `clip` at `snr_db`. A seeded random crop of the noise
/// (tiled when shorter than the clip) is scaled by
/// `g = (rms_speech / rms_crop) · 10^(-snr/20)`.
pub fn mix_at_snr_detailed(clip: &AudioClip, noise: &AudioClip, snr_db: f64, seed: u64) -> Result<Mixture> {
    if !snr_db.is_finite() {
        return Err(Error::Config(format!("snr_db must be finite, got {snr_db}")));
    }
    let speech_rms = clip.rms();
    if speech_rms == 0.0 {
        return Err(Error::Audio("cannot define SNR for silent signal".into()));
    }
    if noise.is_empty() {
        return Err(Error::Audio("noise clip is empty".into()));
    }
    let len = clip.len();
    let tiled: Vec<f32> = noise.samples.iter().copied().cycle().take(len.max(noise.len())).collect();
    let start = rng::stream(seed).random_range(0..=tiled.len() - len);
    let noise_crop = tiled[start..start + len].to_vec();
    let noise_rms = audio::rms(&noise_crop);
    if noise_rms == 0.0 {
        return Err(Error::Audio("cannot define SNR for silent noise segment".into()));
    }
    let gain = speech_rms / noise_rms * 10f64.powf(-snr_db / 20.0);
    let samples = clip.samples.iter().zip(&noise_crop).map(|(&s, &n)| (s as f64 + gain * n as f64).clamp(-1.0, 1.0) as f32).collect();
    Ok(Mixture { clip: AudioClip { samples, sample_rate: clip.sample_rate, source_path: clip.source_path.clone() }, noise_crop, gain })
}

/// Noise recordings grouped by category, at full length.
#[derive(Debug, Clone)]
pub struct NoiseBank {
    categories: BTreeMap<String, Vec<AudioClip>>,
    pub manifest: PathBuf,
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    path: String,
    category: String,
}

impl NoiseBank {
    pub fn from_clips(categories: BTreeMap<String, Vec<AudioClip>>) -> Result<Self> {
        if let Some((name, _)) = categories.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::Dataset(format!("noise category '{name}' is empty")));
        }
        Ok(NoiseBank { categories, manifest: PathBuf::new() })
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.categories.keys().map(String::as_str)
    }

    pub fn category(&self, name: &str) -> Result<&[AudioClip]> {
        self.categories.get(name).map(Vec::as_slice).ok_or_else(|| Error::Dataset(format!("noise category '{name}' not in bank")))
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }
}

/// Load a bank from a `path,category` CSV manifest; paths are relative to `dir`.
pub fn load_noise_bank(dir: &Path, manifest: &Path) -> Result<NoiseBank> {
    let mut reader = csv::Reader::from_path(manifest).map_err(|e| Error::file(manifest, e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::file(manifest, e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["path", "category"] {
        return Err(Error::file(manifest, "noise manifest header must be `path,category`"));
    }
    let mut categories: BTreeMap<String, Vec<AudioClip>> = BTreeMap::new();
    let mut offenders = Vec::new();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row.map_err(|e| Error::file(manifest, e.to_string()))?;
        let path = dir.join(&row.path);
        if row.category.trim().is_empty() {
            offenders.push(format!("{}: empty category", row.path));
            continue;
        }
        if !path.is_file() {
            offenders.push(format!("missing file {}", path.display()));
            continue;
        }
        categories.entry(row.category).or_default().push(audio::read_wav(&path)?);
    }
    if !offenders.is_empty() {
        return Err(Error::Dataset(format!("invalid noise manifest: {}", offenders.join("; "))));
    }
    if categories.is_empty() {
        return Err(Error::Dataset(format!("noise manifest {} lists no clips", manifest.display())));
    }
    Ok(NoiseBank { categories, manifest: manifest.to_path_buf() })
}
