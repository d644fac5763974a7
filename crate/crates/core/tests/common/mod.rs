#![allow(dead_code)]

use adakws_core::dataset::{synth_generate, Manifest, SynthSpec};
use tempfile::TempDir;

pub struct SynthData {
    pub dir: TempDir,
    pub train: Manifest,
    pub val: Manifest,
    pub test: Manifest,
}

pub fn synth(num_classes: usize, clips_per_class: usize, seed: u64) -> SynthData {
    let dir = tempfile::tempdir().unwrap();
    let (train, val, test) = synth_generate(&SynthSpec { num_classes, clips_per_class, seed }, dir.path()).unwrap();
    SynthData { dir, train, val, test }
}
