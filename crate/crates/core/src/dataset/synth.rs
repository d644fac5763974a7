//! Synthetic keyword corpus for desk-scale experiments.
//!
//! Each class is a "word" of three tones played in sequence, like three
//! phonemes. Per clip the tone frequencies jitter by ±3% and each segment's
//! duration by ±10%, so time and frequency masking can remove class-bearing
//! content.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gsc::{scan_with_labels, LABELS_FILE, TEST_LIST, VAL_LIST};
use super::Manifest;
use crate::audio::{write_wav_pcm16, AudioClip, CLIP_SAMPLES, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::rng::{self, streams};

const F_MIN: f64 = 200.0;
const F_MAX: f64 = 4000.0;
const AMPLITUDE: f64 = 0.3;
const RAMP_SECS: f64 = 0.01;
/// Minimum separation between two class triads, in octaves, on their most
/// different tone.
const MIN_TRIAD_DISTANCE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub clips_per_class: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { num_classes: 10, clips_per_class: 200, seed: 0 }
    }
}

/// Tone frequencies and the four breakpoints (seconds) bounding the three
/// tone segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTemplate {
    pub freqs: [f64; 3],
    pub breakpoints: [f64; 4],
}

fn triad_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x / y).log2().abs()).fold(0.0, f64::max)
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("synthetic set needs at least 2 classes".into()));
        }
        if self.clips_per_class < 1 {
            return Err(Error::Config("synthetic set needs at least 1 clip per class".into()));
        }
        Ok(())
    }

    pub fn label(&self, class: usize) -> String {
        format!("kw{class:02}")
    }

    /// Pairwise-distinct class templates drawn from the spec's seed.
    pub fn templates(&self) -> Vec<ClassTemplate> {
        let mut r = rng::stream(rng::derive_seed(self.seed, streams::SYNTH, u64::MAX));
        let (lo, hi) = (F_MIN.log2(), F_MAX.log2());
        let mut out: Vec<ClassTemplate> = Vec::with_capacity(self.num_classes);
        while out.len() < self.num_classes {
            let freqs = [0; 3].map(|_| 2f64.powf(r.random_range(lo..hi)));
            if out.iter().any(|t| triad_distance(&t.freqs, &freqs) < MIN_TRIAD_DISTANCE) {
                continue;
            }
            let start = r.random_range(0.1..0.2);
            let end = r.random_range(0.75..0.85);
            let w = [0; 3].map(|_| r.random_range(0.7..1.3));
            let total: f64 = w.iter().sum();
            let b1 = start + (end - start) * w[0] / total;
            let b2 = b1 + (end - start) * w[1] / total;
            out.push(ClassTemplate { freqs, breakpoints: [start, b1, b2, end] });
        }
        out
    }

    /// Render clip `index` of class `class`.
    pub fn render(&self, template: &ClassTemplate, class: usize, index: usize) -> AudioClip {
        let seed = rng::derive_seed(self.seed, streams::SYNTH, (class * self.clips_per_class + index) as u64);
        let mut r = rng::stream(seed);
        let sr = SAMPLE_RATE as f64;
        let mut samples = vec![0.0f64; CLIP_SAMPLES];
        let mut t0 = template.breakpoints[0];
        for k in 0..3 {
            let freq = template.freqs[k] * r.random_range(0.97..1.03);
            let dur = (template.breakpoints[k + 1] - template.breakpoints[k]) * r.random_range(0.9..1.1);
            let phase = r.random_range(0.0..2.0 * PI);
            let (first, last) = ((t0 * sr) as usize, (((t0 + dur) * sr) as usize).min(CLIP_SAMPLES));
            for (i, s) in samples.iter_mut().enumerate().take(last).skip(first) {
                let t = i as f64 / sr;
                let edge = (t - t0).min(t0 + dur - t).max(0.0);
                let env = if edge < RAMP_SECS { 0.5 - 0.5 * (PI * edge / RAMP_SECS).cos() } else { 1.0 };
                *s += AMPLITUDE * env * (2.0 * PI * freq * t + phase).sin();
            }
            t0 += dur;
        }
        AudioClip::new(samples.into_iter().map(|s| s.clamp(-1.0, 1.0) as f32).collect())
    }
}

/// Write the corpus as `<out>/<label>/<label>_<i>_nohash_0.wav` plus
/// `labels.txt` and GSC-style validation/testing lists, split 80/10/10 per
/// class by a seeded permutation.
pub fn synth_generate(spec: &SynthSpec, out_dir: &Path) -> Result<(Manifest, Manifest, Manifest)> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let templates = spec.templates();
    let n = spec.clips_per_class;
    let n_val = (n as f64 * 0.1).round() as usize;
    let n_test = (n as f64 * 0.1).round() as usize;
    let mut labels = String::new();
    let (mut val, mut test) = (String::new(), String::new());
    for (class, template) in templates.iter().enumerate() {
        let label = spec.label(class);
        labels.push_str(&label);
        labels.push('\n');
        let dir = out_dir.join(&label);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let order = rng::permutation(n, rng::derive_seed(spec.seed, streams::SHUFFLE, class as u64));
        for (rank, &i) in order.iter().enumerate() {
            let name = format!("{label}_{i:04}_nohash_0.wav");
            write_wav_pcm16(&dir.join(&name), &spec.render(template, class, i))?;
            let line = format!("{label}/{name}\n");
            if rank < n_val {
                val.push_str(&line);
            } else if rank < n_val + n_test {
                test.push_str(&line);
            }
        }
    }
    let write = |name: &str, text: &str| {
        let p = out_dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(LABELS_FILE, &labels)?;
    write(VAL_LIST, &val)?;
    write(TEST_LIST, &test)?;
    scan_with_labels(out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_distinct_and_in_range() {
        let spec = SynthSpec { num_classes: 12, clips_per_class: 1, seed: 4 };
        let t = spec.templates();
        assert_eq!(t.len(), 12);
        for (i, a) in t.iter().enumerate() {
            assert!(a.freqs.iter().all(|f| (F_MIN..=F_MAX).contains(f)));
            assert!(a.breakpoints.windows(2).all(|w| w[0] < w[1]));
            for b in &t[i + 1..] {
                assert!(triad_distance(&a.freqs, &b.freqs) >= MIN_TRIAD_DISTANCE);
            }
        }
        assert_eq!(spec.templates(), t);
    }

    #[test]
    fn generation_sizes_and_determinism() {
        let spec = SynthSpec { num_classes: 3, clips_per_class: 20, seed: 1 };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (tr, va, te) = synth_generate(&spec, a.path()).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (48, 6, 6));
        assert_eq!(tr.labels, vec!["kw00", "kw01", "kw02"]);
        synth_generate(&spec, b.path()).unwrap();
        for e in &tr.entries {
            let rel = e.path.strip_prefix(a.path()).unwrap();
            assert_eq!(fs::read(&e.path).unwrap(), fs::read(b.path().join(rel)).unwrap());
        }
    }

    #[test]
    fn clip_is_one_second_and_bounded() {
        let spec = SynthSpec::default();
        let t = spec.templates();
        let clip = spec.render(&t[0], 0, 0);
        assert_eq!(clip.len(), CLIP_SAMPLES);
        let peak = clip.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()));
        assert!(peak > 0.25 && peak <= 0.31, "peak {peak}");
    }
}
