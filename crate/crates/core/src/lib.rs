//! Test-time adaptation for small-footprint keyword spotting.
//!
//! The crate covers the whole pipeline: WAV loading and MFCC features,
//! deterministic noise corruption, a small depthwise-separable CNN with its
//! own reverse-mode gradients, source training, and online adaptation with
//! AdaKWS (selective entropy minimization with pseudo-keyword consistency and
//! sample reweighting) alongside the TBN, Tent, ETA and SAR baselines.

pub mod audio;
pub mod corruption;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod tta;

pub use error::{Error, Result};
pub use tensor::{BnMode, ParamId, ParamKind, ParamTag, Real, Tensor};

pub use audio::{AudioClip, FeatureMap, FeatureStats, Mfcc};
pub use corruption::{NoiseBank, NoiseKind, NoiseSpec};
pub use dataset::{Batch, FeatureSet, LabeledClips, Manifest};
pub use experiment::{ExperimentConfig, RunReport};
pub use model::{Checkpoint, KwsModel, ModelConfig};
pub use train::TrainConfig;
pub use tta::{AdaptConfig, Adapter, Method, Toggles};
