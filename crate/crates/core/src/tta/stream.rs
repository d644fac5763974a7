use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AdaptConfig, Adapter, Method, StepReport};
use crate::audio::{FeatureStats, Mfcc};
use crate::corruption::{NoiseBank, NoiseSpec};
use crate::dataset::{batch_indices, FeatureSet, LabeledClips};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, KwsModel};

/// One test split under one corruption, as normalized features.
#[derive(Debug, Clone)]
pub struct TestStream {
    pub noise: NoiseSpec,
    pub data: FeatureSet,
}

impl TestStream {
    /// Corrupt clip `i` with sub-seed `i`, so the result does not depend on
    /// batching or evaluation order.
    pub fn prepare(
        clips: &LabeledClips,
        noise: &NoiseSpec,
        bank: Option<&NoiseBank>,
        frontend: &Mfcc,
        stats: &FeatureStats,
    ) -> Result<Self> {
        let corrupted = clips.clips.par_iter().enumerate().map(|(i, c)| noise.apply(c, i as u64, bank)).collect::<Result<Vec<_>>>()?;
        let corrupted = LabeledClips { clips: corrupted, ..clips.clone() };
        let data = FeatureSet::extract(&corrupted, frontend)?.normalized(stats)?;
        Ok(TestStream { noise: noise.clone(), data })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub noise: NoiseSpec,
    pub method: Method,
    pub seed: u64,
    pub batch_size: usize,
    pub accuracy: f64,
    pub n_samples: usize,
    pub n_correct: usize,
    pub n_updates: usize,
    pub n_resets: usize,
    pub steps: Vec<StepReport>,
    /// Not covered by the determinism contract.
    pub wall_clock_secs: f64,
}

/// Stream every sample of `stream` through a fresh adapter in seeded batch
/// order, scoring each batch with the forward pass that adapts on it.
pub fn run_stream_on(model: &KwsModel<f32>, stream: &TestStream, config: &AdaptConfig) -> Result<ConditionReport> {
    let start = Instant::now();
    let mut adapter = Adapter::new(model.clone(), config.clone())?;
    let data = &stream.data;
    if data.is_empty() {
        return Err(Error::Dataset("cannot adapt on an empty stream".into()));
    }
    let mut steps = Vec::new();
    let mut n_correct = 0;
    for idx in batch_indices(data.len(), config.batch_size, config.seed)? {
        let batch = data.batch(&idx)?;
        let report = adapter.step(&batch.features)?;
        let labels = batch.labels.as_deref().unwrap_or_default();
        n_correct += report.predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
        steps.push(report);
    }
    adapter.check_frozen()?;
    if config.method == Method::Unadapted && !adapter.model().bitwise_eq(model) {
        return Err(Error::Adapt("Unadapted run modified the model".into()));
    }
    Ok(ConditionReport {
        noise: stream.noise.clone(),
        method: config.method,
        seed: config.seed,
        batch_size: config.batch_size,
        accuracy: n_correct as f64 / data.len() as f64,
        n_samples: data.len(),
        n_correct,
        n_updates: steps.iter().filter(|s| s.update_applied).count(),
        n_resets: steps.iter().filter(|s| s.reset).count(),
        steps,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

pub fn run_stream(
    checkpoint: &Checkpoint,
    clips: &LabeledClips,
    noise: &NoiseSpec,
    bank: Option<&NoiseBank>,
    config: &AdaptConfig,
) -> Result<ConditionReport> {
    let stream = TestStream::prepare(clips, noise, bank, &Mfcc::default(), &checkpoint.feature_stats)?;
    run_stream_on(&checkpoint.model, &stream, config)
}
