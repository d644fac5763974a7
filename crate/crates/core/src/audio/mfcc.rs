//! 40-band MFCC front end.
//!
//! 30 ms Hann frames every 10 ms, 512-point power spectrum, 40 HTK-mel
//! triangular filters between 20 Hz and 7.6 kHz, `ln(e + 1e-6)` compression
//! and an orthonormal DCT-II that keeps all 40 coefficients.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{AudioClip, FeatureMap, FrameParams, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop_len: usize,
    pub fft_size: usize,
    pub num_filters: usize,
    pub num_coeffs: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            sample_rate: SAMPLE_RATE,
            window_len: 480,
            hop_len: 160,
            fft_size: 512,
            num_filters: 40,
            num_coeffs: 40,
            f_min: 20.0,
            f_max: 7600.0,
            log_floor: 1e-6,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Precomputed window, filterbank, DCT matrix and FFT plan.
#[derive(Clone)]
pub struct Mfcc {
    config: MfccConfig,
    window: Vec<f64>,
    /// `[num_filters][fft_size / 2 + 1]`
    filterbank: Vec<Vec<f64>>,
    /// Filter edge frequencies: `num_filters + 2` points.
    edges_hz: Vec<f64>,
    /// Row-major `[num_coeffs][num_filters]`.
    dct: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Mfcc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mfcc").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Default for Mfcc {
    fn default() -> Self {
        Mfcc::new(MfccConfig::default()).expect("default MFCC config is valid")
    }
}

impl Mfcc {
    pub fn new(config: MfccConfig) -> Result<Self> {
        let nyquist = config.sample_rate as f64 / 2.0;
        if config.window_len == 0 || config.window_len > config.fft_size || config.hop_len == 0 {
            return Err(Error::Config("MFCC window must be non-empty, fit the FFT, and hop ≥ 1".into()));
        }
        if !(0.0 <= config.f_min && config.f_min < config.f_max && config.f_max <= nyquist) {
            return Err(Error::Config(format!("mel range [{}, {}] Hz must lie within [0, {nyquist}]", config.f_min, config.f_max)));
        }
        if config.num_coeffs == 0 || config.num_coeffs > config.num_filters {
            return Err(Error::Config("MFCC needs 1 ≤ num_coeffs ≤ num_filters".into()));
        }

        // Periodic Hann window.
        let n = config.window_len;
        let window = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect();

        let (mel_lo, mel_hi) = (hz_to_mel(config.f_min), hz_to_mel(config.f_max));
        let m = config.num_filters;
        let edges_hz: Vec<f64> = (0..m + 2).map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (m + 1) as f64)).collect();
        let bins = config.fft_size / 2 + 1;
        let bin_hz = config.sample_rate as f64 / config.fft_size as f64;
        let filterbank = (0..m)
            .map(|f| {
                let (lo, c, hi) = (edges_hz[f], edges_hz[f + 1], edges_hz[f + 2]);
                (0..bins)
                    .map(|b| {
                        let hz = b as f64 * bin_hz;
                        ((hz - lo) / (c - lo)).min((hi - hz) / (hi - c)).max(0.0)
                    })
                    .collect()
            })
            .collect();

        let k = config.num_coeffs;
        let mut dct = vec![0.0; k * m];
        for i in 0..k {
            let scale = if i == 0 { (1.0 / m as f64).sqrt() } else { (2.0 / m as f64).sqrt() };
            for j in 0..m {
                dct[i * m + j] = scale * (PI * i as f64 * (2 * j + 1) as f64 / (2 * m) as f64).cos();
            }
        }

        let fft = FftPlanner::new().plan_fft_forward(config.fft_size);
        Ok(Mfcc { config, window, filterbank, edges_hz, dct, fft })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.config
    }

    pub fn frame_params(&self) -> FrameParams {
        FrameParams { window_len: self.config.window_len, hop_len: self.config.hop_len, fft_size: self.config.fft_size }
    }

    /// `1 + floor((len - window) / hop)`, or 0 when the signal is shorter than a window.
    pub fn num_frames(&self, len: usize) -> usize {
        if len < self.config.window_len {
            0
        } else {
            1 + (len - self.config.window_len) / self.config.hop_len
        }
    }

    /// Peak frequency of each filter.
    pub fn filter_centers_hz(&self) -> Vec<f64> {
        self.edges_hz[1..self.edges_hz.len() - 1].to_vec()
    }

    pub fn filterbank(&self) -> &[Vec<f64>] {
        &self.filterbank
    }

    /// Row-major `[num_coeffs][num_filters]` DCT-II matrix.
    pub fn dct_matrix(&self) -> &[f64] {
        &self.dct
    }

    /// Log mel energies `[num_filters][frames]` before the DCT.
    #[allow(clippy::needless_range_loop)]
    pub fn log_mel(&self, clip: &AudioClip) -> Result<Vec<Vec<f64>>> {
        if clip.sample_rate != self.config.sample_rate {
            return Err(Error::Audio(format!("unsupported sample rate {}", clip.sample_rate)));
        }
        let frames = self.num_frames(clip.len());
        if frames == 0 {
            return Err(Error::Audio(format!(
                "clip of {} samples is shorter than one {}-sample window",
                clip.len(),
                self.config.window_len
            )));
        }
        let bins = self.config.fft_size / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); self.config.fft_size];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; bins];
        let mut out = vec![vec![0.0; frames]; self.config.num_filters];
        for t in 0..frames {
            let start = t * self.config.hop_len;
            let frame = &clip.samples[start..start + self.config.window_len];
            for (slot, (&s, &w)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                *slot = Complex::new(s as f64 * w, 0.0);
            }
            for slot in &mut buf[self.config.window_len..] {
                *slot = Complex::new(0.0, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf[..bins]) {
                *p = c.norm_sqr();
            }
            for (f, filt) in self.filterbank.iter().enumerate() {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                out[f][t] = (e + self.config.log_floor).ln();
            }
        }
        Ok(out)
    }

    pub fn compute(&self, clip: &AudioClip) -> Result<FeatureMap> {
        let log_mel = self.log_mel(clip)?;
        let frames = log_mel[0].len();
        let (k, m) = (self.config.num_coeffs, self.config.num_filters);
        let mut coeffs = vec![0.0f32; k * frames];
        for i in 0..k {
            let row = &self.dct[i * m..(i + 1) * m];
            for t in 0..frames {
                let v: f64 = row.iter().zip(&log_mel).map(|(d, band)| d * band[t]).sum();
                coeffs[i * frames + t] = v as f32;
            }
        }
        let coeffs = Tensor::new(vec![k, frames], coeffs)?;
        coeffs.ensure_finite("mfcc")?;
        Ok(FeatureMap { coeffs, frame_params: self.frame_params() })
    }
}
