//! Supervised source training of the keyword model.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::audio::{FeatureStats, Mfcc};
use crate::dataset::{batch_indices, FeatureSet, Manifest};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, KwsModel, ModelConfig, Trainable, TrainingMeta};
use crate::optim::{Sgd, SgdConfig};
use crate::rng::{self, streams};
use crate::tensor::kernels::argmax_rows;
use crate::tensor::{BnMode, Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate, cosine-decayed to 0 over all steps.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 30, batch_size: 64, lr: 0.05, momentum: 0.9, weight_decay: 1e-4, label_smoothing: 0.1, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing must be in [0, 1), got {}", self.label_smoothing)));
        }
        self.sgd().validate()
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig { lr: self.lr, momentum: self.momentum, weight_decay: self.weight_decay }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy_from_logits<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let pred = argmax_rows(logits)?;
    if pred.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), labels.len())));
    }
    if pred.is_empty() {
        return Err(Error::Dataset("cannot score an empty set".into()));
    }
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / pred.len() as f64)
}

/// Frozen (running-statistics) accuracy on already-normalized features.
pub fn evaluate(model: &KwsModel<f32>, data: &FeatureSet) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty set".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(256) {
        let batch = data.batch(chunk)?;
        let logits = model.logits(&batch.features, BnMode::Running)?;
        let labels = batch.labels.as_deref().unwrap_or_default();
        correct += (accuracy_from_logits(&logits, labels)? * chunk.len() as f64).round() as usize;
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Raw and normalized features for the train and validation splits.
pub struct PreparedData {
    pub stats: FeatureStats,
    pub train: FeatureSet,
    pub val: FeatureSet,
}

pub fn prepare(train: &Manifest, val: &Manifest, frontend: &Mfcc) -> Result<PreparedData> {
    let raw = FeatureSet::extract(&train.load_clips()?, frontend)?;
    let stats = FeatureStats::from_maps(&raw.maps)?;
    let val = FeatureSet::extract(&val.load_clips()?, frontend)?.normalized(&stats)?;
    Ok(PreparedData { train: raw.normalized(&stats)?, val, stats })
}

pub fn train_source(config: &TrainConfig, model_config: &ModelConfig, train: &Manifest, val: &Manifest) -> Result<TrainOutcome> {
    config.validate()?;
    let per_class = (0..train.num_classes()).map(|c| train.entries.iter().filter(|e| e.label == c).count());
    if let Some(c) = per_class.clone().position(|n| n == 0) {
        return Err(Error::Dataset(format!("class {:?} has no training samples", train.labels[c])));
    }
    if model_config.num_classes != train.num_classes() {
        return Err(Error::Config(format!("model has {} classes, dataset has {}", model_config.num_classes, train.num_classes())));
    }
    let data = prepare(train, val, &Mfcc::default())?;
    train_on_features(config, model_config, &data, train.labels.clone())
}

pub fn train_on_features(
    config: &TrainConfig,
    model_config: &ModelConfig,
    data: &PreparedData,
    labels: Vec<String>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model = KwsModel::<f32>::build(model_config, config.seed)?;
    let mut opt = Sgd::new(config.sgd())?;
    let steps_per_epoch = data.train.len().div_ceil(config.batch_size);
    let total_steps = (config.epochs * steps_per_epoch) as f64;
    let mut step = 0usize;
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, KwsModel<f32>)> = None;

    for epoch in 0..config.epochs {
        let order = batch_indices(data.train.len(), config.batch_size, rng::derive_seed(config.seed, streams::SHUFFLE, epoch as u64))?;
        let (mut loss_sum, mut correct) = (0.0, 0.0);
        for (b, idx) in order.iter().enumerate() {
            let diverged = |loss: f64| Error::Diverged { epoch, batch: b, loss };
            let batch = data.train.batch(idx)?;
            let targets = batch.labels.as_deref().unwrap_or_default();
            let mut pass = model.forward(&batch.features, BnMode::Train, Trainable::All).map_err(|e| match e {
                Error::NonFinite(_) => diverged(f64::NAN),
                other => other,
            })?;
            let loss = pass.graph.cross_entropy(pass.logits, targets, config.label_smoothing).map_err(|e| match e {
                Error::NonFinite(_) => diverged(f64::NAN),
                other => other,
            })?;
            let loss_value = pass.graph.value(loss).data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(diverged(loss_value));
            }
            model.apply_batch_stats(&pass);
            correct += accuracy_from_logits(pass.logits(), targets)? * idx.len() as f64;
            loss_sum += loss_value * idx.len() as f64;
            let grads = pass.graph.backward(loss)?;
            let lr = config.lr * 0.5 * (1.0 + (PI * step as f64 / total_steps).cos());
            opt.step_with_lr(&mut model, &grads, lr)?;
            step += 1;
        }
        let val_accuracy = evaluate(&model, &data.val)?;
        let n = data.train.len() as f64;
        metrics.push(EpochMetrics { epoch, train_loss: loss_sum / n, train_accuracy: correct / n, val_accuracy });
        if best.as_ref().is_none_or(|(_, acc, _)| val_accuracy > *acc) {
            best = Some((epoch, val_accuracy, model.clone()));
        }
    }
    let (best_epoch, val_accuracy, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            labels,
            feature_stats: data.stats.clone(),
            training: TrainingMeta {
                seed: config.seed,
                epochs: config.epochs,
                best_epoch,
                val_accuracy,
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
            },
        },
        metrics,
    })
}
