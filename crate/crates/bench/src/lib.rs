//! Fixtures shared by the benchmarks.

use adakws_core::audio::CLIP_SAMPLES;
use adakws_core::{rng, AudioClip, Tensor};
use rand::Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut r = rng::stream(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// One second of quiet noise-like audio.
pub fn random_clip(seed: u64) -> AudioClip {
    let mut r = rng::stream(seed);
    AudioClip::new((0..CLIP_SAMPLES).map(|_| r.random_range(-0.1..0.1)).collect())
}

/// A `[n, 1, 40, 98]` batch of feature-like values.
pub fn feature_batch(n: usize, seed: u64) -> Tensor<f32> {
    random_tensor(&[n, 1, 40, 98], seed)
}
