//! Online test-time adaptation over a stream of unlabeled batches.
//!
//! Every method except `Unadapted` normalizes with the statistics of the
//! current batch. Gradient methods then take one SGD step per batch on the
//! batch-norm affine parameters only.

mod adapter;
mod stream;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::kernels::argmax_rows;
use crate::tensor::{Real, Tensor};

pub use adapter::{weighted_entropy_loss, Adapter, SampleRecord, StepReport};
pub use stream::{run_stream, run_stream_on, ConditionReport, TestStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Unadapted,
    #[serde(rename = "TBN")]
    Tbn,
    Tent,
    #[serde(rename = "ETA")]
    Eta,
    #[serde(rename = "SAR")]
    Sar,
    #[serde(rename = "AdaKWS")]
    AdaKws,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Unadapted, Method::Tbn, Method::Tent, Method::Eta, Method::Sar, Method::AdaKws];

    pub fn name(self) -> &'static str {
        match self {
            Method::Unadapted => "Unadapted",
            Method::Tbn => "TBN",
            Method::Tent => "Tent",
            Method::Eta => "ETA",
            Method::Sar => "SAR",
            Method::AdaKws => "AdaKWS",
        }
    }

    /// Whether the method takes gradient steps.
    pub fn is_gradient_based(self) -> bool {
        matches!(self, Method::Tent | Method::Eta | Method::Sar | Method::AdaKws)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (expected one of Unadapted, TBN, Tent, ETA, SAR, AdaKWS)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TauMode {
    /// Threshold is `tau_ent · ln C`.
    FractionOfMaxEntropy,
    AbsoluteNats,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskPolicy {
    pub num_time_masks: usize,
    /// Frames.
    pub max_time_len: usize,
    pub num_freq_masks: usize,
    /// Coefficients.
    pub max_freq_len: usize,
    /// Value written into masked cells; 0 is the per-coefficient mean after
    /// normalization.
    pub fill: f32,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy { num_time_masks: 2, max_time_len: 20, num_freq_masks: 2, max_freq_len: 5, fill: 0.0 }
    }
}

impl MaskPolicy {
    /// No-op policy: every mask has length 0.
    pub fn identity() -> Self {
        MaskPolicy { max_time_len: 0, max_freq_len: 0, ..Default::default() }
    }

    pub fn validate(&self, coeffs: usize, frames: usize) -> Result<()> {
        if self.max_time_len > frames || self.max_freq_len > coeffs {
            return Err(Error::Config(format!(
                "mask lengths (time {}, freq {}) exceed feature dims ({frames} frames, {coeffs} coefficients)",
                self.max_time_len, self.max_freq_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub use_entropy_sampler: bool,
    pub use_pkc_sampler: bool,
    pub use_reweighting: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles { use_entropy_sampler: true, use_pkc_sampler: true, use_reweighting: true }
    }
}

impl Toggles {
    pub const OFF: Toggles = Toggles { use_entropy_sampler: false, use_pkc_sampler: false, use_reweighting: false };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SarConfig {
    /// Perturbation radius.
    pub rho: f64,
    /// Reset to the source model when the loss EMA drops below this.
    pub reset_ema_threshold: f64,
    pub ema_momentum: f64,
}

impl Default for SarConfig {
    fn default() -> Self {
        SarConfig { rho: 0.05, reset_ema_threshold: 0.2, ema_momentum: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub method: Method,
    pub tau_ent: f64,
    pub tau_ent_mode: TauMode,
    pub tau_pkc: f64,
    pub sigma: f64,
    pub mask: MaskPolicy,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub toggles: Toggles,
    pub sar: SarConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            method: Method::AdaKws,
            tau_ent: 0.4,
            tau_ent_mode: TauMode::FractionOfMaxEntropy,
            tau_pkc: 0.05,
            sigma: 0.5,
            mask: MaskPolicy::default(),
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 128,
            seed: 0,
            toggles: Toggles::default(),
            sar: SarConfig::default(),
        }
    }
}

impl AdaptConfig {
    pub fn for_method(method: Method) -> Self {
        AdaptConfig { method, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_ent > 0.0 && self.tau_ent.is_finite()) {
            return Err(Error::Config(format!("tau_ent must be > 0, got {}", self.tau_ent)));
        }
        if !(self.tau_pkc > -1.0 && self.tau_pkc < 1.0) {
            return Err(Error::Config(format!("tau_pkc must be in (-1, 1), got {}", self.tau_pkc)));
        }
        if !self.sigma.is_finite() {
            return Err(Error::Config("sigma must be finite".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.sar.rho < 0.0 || !(0.0..1.0).contains(&self.sar.ema_momentum) {
            return Err(Error::Config("sar.rho must be ≥ 0 and sar.ema_momentum in [0, 1)".into()));
        }
        Ok(())
    }

    /// Entropy threshold in nats for a `num_classes`-way output.
    pub fn effective_tau_ent(&self, num_classes: usize) -> f64 {
        effective_tau(self.tau_ent, self.tau_ent_mode, num_classes)
    }
}

pub fn effective_tau(tau_ent: f64, mode: TauMode, num_classes: usize) -> f64 {
    match mode {
        TauMode::FractionOfMaxEntropy => tau_ent * (num_classes as f64).ln(),
        TauMode::AbsoluteNats => tau_ent,
    }
}

/// `entropy < threshold`, strictly.
pub fn entropy_select(entropies: &[f64], threshold: f64) -> Vec<bool> {
    entropies.iter().map(|&h| h < threshold).collect()
}

/// Pseudo-label consistency under masking.
#[derive(Debug, Clone, PartialEq)]
pub struct PkcScores {
    /// Argmax of the clean prediction, lowest index on ties.
    pub pseudo: Vec<usize>,
    /// `p(x)[c] − p(x′)[c]`.
    pub scores: Vec<f64>,
    /// `score > tau_pkc`, strictly.
    pub mask: Vec<bool>,
}

pub fn pkc_scores<T: Real>(probs_x: &Tensor<T>, probs_xp: &Tensor<T>, tau_pkc: f64) -> Result<PkcScores> {
    let [n, c] = probs_x.dims2("pkc clean probabilities")?;
    if probs_xp.shape() != probs_x.shape() {
        return Err(Error::Shape(format!("masked probabilities {:?} do not match clean {:?}", probs_xp.shape(), probs_x.shape())));
    }
    let pseudo = argmax_rows(probs_x)?;
    let scores: Vec<f64> =
        (0..n).map(|i| probs_x.data()[i * c + pseudo[i]].as_f64() - probs_xp.data()[i * c + pseudo[i]].as_f64()).collect();
    let mask = scores.iter().map(|&s| s > tau_pkc).collect();
    Ok(PkcScores { pseudo, scores, mask })
}

/// `α = exp(−(H − σ)) + exp(L_pkc)`.
pub fn sample_weight(entropy: f64, pkc: f64, sigma: f64) -> f64 {
    (-(entropy - sigma)).exp() + pkc.exp()
}

pub fn sample_weights(entropies: &[f64], pkc: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if entropies.len() != pkc.len() {
        return Err(Error::Shape(format!("{} entropies for {} pkc scores", entropies.len(), pkc.len())));
    }
    Ok(entropies.iter().zip(pkc).map(|(&h, &p)| sample_weight(h, p, sigma)).collect())
}

/// Entropy-based weight `exp(E0 − H)` used by ETA.
pub fn eta_weight(entropy: f64, e0: f64) -> f64 {
    (e0 - entropy).exp()
}

/// One rectangular mask: `(start, len)` per time and frequency mask.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskDraw {
    pub time: Vec<(usize, usize)>,
    pub freq: Vec<(usize, usize)>,
}

impl MaskDraw {
    pub fn draw(policy: &MaskPolicy, coeffs: usize, frames: usize, rng: &mut impl Rng) -> Self {
        let mut span = |n: usize, max: usize, dim: usize| -> Vec<(usize, usize)> {
            (0..n)
                .map(|_| {
                    let len = rng.random_range(0..=max.min(dim));
                    let start = rng.random_range(0..=dim - len);
                    (start, len)
                })
                .collect()
        };
        let time = span(policy.num_time_masks, policy.max_time_len, frames);
        let freq = span(policy.num_freq_masks, policy.max_freq_len, coeffs);
        MaskDraw { time, freq }
    }

    /// Fill masked frames (columns) and coefficients (rows) of one
    /// `coeffs × frames` map in place.
    pub fn apply<T: Real>(&self, map: &mut [T], coeffs: usize, frames: usize, fill: T) {
        for &(start, len) in &self.time {
            for row in map.chunks_mut(frames).take(coeffs) {
                row[start..start + len].fill(fill);
            }
        }
        for &(start, len) in &self.freq {
            map[start * frames..(start + len) * frames].fill(fill);
        }
    }
}

/// Independently masked copy of a `[N, 1, coeffs, frames]` batch. Sample `i`
/// draws from its own stream derived from `(seed, i)`.
pub fn spec_mask<T: Real>(batch: &Tensor<T>, policy: &MaskPolicy, seed: u64) -> Result<Tensor<T>> {
    let [_, c, coeffs, frames] = batch.dims4("spec_mask input")?;
    if c != 1 {
        return Err(Error::Shape(format!("spec_mask expects one channel, got {c}")));
    }
    policy.validate(coeffs, frames)?;
    let mut out = batch.clone();
    for (i, map) in out.data_mut().chunks_mut(coeffs * frames).enumerate() {
        let mut r = rng::stream(rng::derive_seed(seed, streams::MASKING, i as u64));
        MaskDraw::draw(policy, coeffs, frames, &mut r).apply(map, coeffs, frames, T::of(policy.fill as f64));
    }
    Ok(out)
}
