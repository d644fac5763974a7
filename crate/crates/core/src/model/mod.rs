//! SmallKwsNet: a depthwise-separable keyword-spotting CNN with batch norm
//! after every convolution.
//!
//! Default layout on a `1 × 40 × 98` MFCC input:
//!
//! ```text
//! stem      conv 3×3 s2 (1→16)   BN  ReLU
//! block 1   dw 3×3 s1 (16)       BN  ReLU   pw 1×1 (16→24)  BN  ReLU
//! block 2   dw 3×3 s2 (24)       BN  ReLU   pw 1×1 (24→32)  BN  ReLU
//! block 3   dw 3×3 s1 (32)       BN  ReLU   pw 1×1 (32→32)  BN  ReLU
//! global average pool, linear 32→C
//! ```

mod checkpoint;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::kernels::{BatchStats, ConvGeometry, BN_MOMENTUM};
use crate::tensor::{BnMode, Graph, NodeId, ParamId, ParamKind, ParamTag, Real, Tensor};

pub use checkpoint::{Checkpoint, TensorEntry, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub stem_channels: usize,
    pub blocks: Vec<BlockConfig>,
    /// `[coefficients, frames]`
    pub input_shape: [usize; 2],
    /// Insert batch norm after every convolution.
    #[serde(default = "default_true")]
    pub batch_norm: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn small_kws(num_classes: usize) -> Self {
        ModelConfig {
            num_classes,
            stem_channels: 16,
            blocks: vec![
                BlockConfig { channels: 24, stride: 1 },
                BlockConfig { channels: 32, stride: 2 },
                BlockConfig { channels: 32, stride: 1 },
            ],
            input_shape: [40, 98],
            batch_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be ≥ 2".into()));
        }
        if self.stem_channels == 0 || self.blocks.iter().any(|b| b.channels == 0) {
            return Err(Error::Config("channel counts must be ≥ 1".into()));
        }
        if let Some(b) = self.blocks.iter().find(|b| !matches!(b.stride, 1 | 2)) {
            return Err(Error::Config(format!("block stride must be 1 or 2, got {}", b.stride)));
        }
        let [h, w] = self.input_shape;
        let (mut h, mut w) = ConvGeometry::new(2, 1, 1)
            .output_size(h, w, 3, 3)
            .map_err(|e| Error::Config(format!("input shape too small for stem: {e}")))?;
        for b in &self.blocks {
            (h, w) = ConvGeometry::new(b.stride, 1, 1).output_size(h, w, 3, 3)?;
        }
        if h == 0 || w == 0 {
            return Err(Error::Config("input shape collapses to zero size".into()));
        }
        Ok(())
    }

    /// Channel count entering the classifier.
    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map_or(self.stem_channels, |b| b.channels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Real> {
    pub name: String,
    pub tag: ParamTag,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T: Real> {
    pub name: String,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Conv { weight: ParamId, geom: ConvGeometry, label: String },
    BatchNorm { gamma: ParamId, beta: ParamId, stats: usize, label: String },
    Relu,
    GlobalAvgPool,
    Linear { weight: ParamId, bias: ParamId },
}

/// Which parameter leaves a forward pass records as trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    /// Batch-norm γ and β only.
    Adaptable,
    All,
}

impl Trainable {
    fn includes(self, tag: &ParamTag) -> bool {
        match self {
            Trainable::Nothing => false,
            Trainable::Adaptable => tag.is_bn_affine(),
            Trainable::All => true,
        }
    }
}

/// Partition of a model's parameter leaves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroups {
    pub adaptable: Vec<ParamId>,
    pub frozen: Vec<ParamId>,
}

/// A recorded forward pass.
pub struct ForwardPass<T: Real> {
    pub graph: Graph<T>,
    pub logits: NodeId,
    batch_stats: Vec<Option<BatchStats<T>>>,
}

impl<T: Real> ForwardPass<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.graph.value(self.logits)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KwsModel<T: Real = f32> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    running: Vec<RunningStats<T>>,
    layers: Vec<Layer>,
}

struct Builder<'a, T: Real> {
    params: Vec<Param<T>>,
    running: Vec<RunningStats<T>>,
    layers: Vec<Layer>,
    rng: &'a mut rng::StreamRng,
    batch_norm: bool,
}

impl<T: Real> Builder<'_, T> {
    fn param(&mut self, name: String, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let tag = ParamTag { kind, layer: self.layers.len() };
        self.params.push(Param { name, tag, value });
        ParamId(self.params.len() - 1)
    }

    fn he_normal(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        Tensor::from_fn(shape, |_| T::of(normal.sample(self.rng)))
    }

    fn conv_bn_relu(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, groups: usize) {
        let shape = [cout, cin / groups, k, k];
        let w = self.he_normal(&shape, cin / groups * k * k);
        let weight = self.param(format!("{name}.conv.weight"), ParamKind::ConvWeight, w);
        let pad = k / 2;
        self.layers.push(Layer::Conv { weight, geom: ConvGeometry::new(stride, pad, groups), label: format!("{name}.conv") });
        if self.batch_norm {
            let gamma = self.param(format!("{name}.bn.gamma"), ParamKind::BnGamma, Tensor::full(&[cout], T::one()));
            let beta = self.param(format!("{name}.bn.beta"), ParamKind::BnBeta, Tensor::zeros(&[cout]));
            self.running.push(RunningStats {
                name: format!("{name}.bn"),
                mean: Tensor::zeros(&[cout]),
                var: Tensor::full(&[cout], T::one()),
            });
            let stats = self.running.len() - 1;
            self.layers.push(Layer::BatchNorm { gamma, beta, stats, label: format!("{name}.bn") });
        }
        self.layers.push(Layer::Relu);
    }
}

impl<T: Real> KwsModel<T> {
    /// Fresh model with He-normal conv/linear weights drawn from `init_seed`,
    /// γ = 1, β = 0 and running statistics (0, 1).
    pub fn build(config: &ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(rng::derive_seed(init_seed, streams::INIT, 0));
        let mut b = Builder { params: Vec::new(), running: Vec::new(), layers: Vec::new(), rng: &mut r, batch_norm: config.batch_norm };
        b.conv_bn_relu("stem", 1, config.stem_channels, 3, 2, 1);
        let mut cin = config.stem_channels;
        for (i, block) in config.blocks.iter().enumerate() {
            b.conv_bn_relu(&format!("block{}.dw", i + 1), cin, cin, 3, block.stride, cin);
            b.conv_bn_relu(&format!("block{}.pw", i + 1), cin, block.channels, 1, 1, 1);
            cin = block.channels;
        }
        b.layers.push(Layer::GlobalAvgPool);
        let w = b.he_normal(&[config.num_classes, cin], cin);
        let weight = b.param("classifier.weight".into(), ParamKind::LinearWeight, w);
        let bias = b.param("classifier.bias".into(), ParamKind::LinearBias, Tensor::zeros(&[config.num_classes]));
        b.layers.push(Layer::Linear { weight, bias });
        let Builder { params, running, layers, .. } = b;
        Ok(KwsModel { config: config.clone(), params, running, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn param_groups(&self) -> ParamGroups {
        let (adaptable, frozen) = (0..self.params.len()).map(ParamId).partition(|&id| self.params[id.0].tag.is_bn_affine());
        ParamGroups { adaptable, frozen }
    }

    /// Element-wise copy into another precision.
    pub fn cast<U: Real>(&self) -> KwsModel<U> {
        KwsModel {
            config: self.config.clone(),
            params: self.params.iter().map(|p| Param { name: p.name.clone(), tag: p.tag, value: p.value.cast() }).collect(),
            running: self.running.iter().map(|s| RunningStats { name: s.name.clone(), mean: s.mean.cast(), var: s.var.cast() }).collect(),
            layers: self.layers.clone(),
        }
    }

    /// Bitwise equality of every parameter and running statistic.
    pub fn bitwise_eq(&self, other: &KwsModel<T>) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.value.bitwise_eq(&b.value))
            && self.running.iter().zip(&other.running).all(|(a, b)| a.mean.bitwise_eq(&b.mean) && a.var.bitwise_eq(&b.var))
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let [n, c, h, w] = input.dims4("model input")?;
        let [eh, ew] = self.config.input_shape;
        if n == 0 || c != 1 || h != eh || w != ew {
            return Err(Error::Shape(format!("model expects input [N≥1, 1, {eh}, {ew}], got {:?}", input.shape())));
        }
        Ok(())
    }

    /// Record a forward pass on `[N, 1, coefficients, frames]` features.
    /// Nothing in the model is modified; in `Train` mode the batch statistics
    /// are kept on the pass for [`KwsModel::apply_batch_stats`].
    pub fn forward(&self, input: &Tensor<T>, mode: BnMode, trainable: Trainable) -> Result<ForwardPass<T>> {
        self.check_input(input)?;
        let mut g = Graph::new();
        let mut x = g.input(input.clone())?;
        let mut batch_stats = vec![None; self.running.len()];
        let leaf = |g: &mut Graph<T>, id: ParamId| {
            let p = &self.params[id.0];
            g.param(id, p.value.clone(), trainable.includes(&p.tag), &p.name)
        };
        for layer in &self.layers {
            x = match layer {
                Layer::Conv { weight, geom, label } => {
                    let w = leaf(&mut g, *weight)?;
                    g.conv2d(x, w, *geom, label)?
                }
                Layer::BatchNorm { gamma, beta, stats, label } => {
                    let ga = leaf(&mut g, *gamma)?;
                    let be = leaf(&mut g, *beta)?;
                    let rs = &self.running[*stats];
                    let (y, bs) = g.batch_norm(x, ga, be, Some((rs.mean.data(), rs.var.data())), mode, label)?;
                    if mode == BnMode::Train {
                        batch_stats[*stats] = bs;
                    }
                    y
                }
                Layer::Relu => g.relu(x, "relu")?,
                Layer::GlobalAvgPool => g.global_avg_pool(x, "pool")?,
                Layer::Linear { weight, bias } => {
                    let w = leaf(&mut g, *weight)?;
                    let b = leaf(&mut g, *bias)?;
                    g.linear(x, w, b, "classifier")?
                }
            };
        }
        Ok(ForwardPass { graph: g, logits: x, batch_stats })
    }

    /// Fold `Train`-mode batch statistics into the running statistics with
    /// momentum 0.1 (biased batch variance).
    pub fn apply_batch_stats(&mut self, pass: &ForwardPass<T>) {
        let m = T::of(BN_MOMENTUM);
        let keep = T::one() - m;
        for (rs, bs) in self.running.iter_mut().zip(&pass.batch_stats) {
            if let Some((mean, var)) = bs {
                for (r, &b) in rs.mean.data_mut().iter_mut().zip(mean) {
                    *r = keep * *r + m * b;
                }
                for (r, &b) in rs.var.data_mut().iter_mut().zip(var) {
                    *r = keep * *r + m * b;
                }
            }
        }
    }

    /// `Train`-mode forward that also updates the running statistics.
    pub fn forward_train(&mut self, input: &Tensor<T>, trainable: Trainable) -> Result<ForwardPass<T>> {
        let pass = self.forward(input, BnMode::Train, trainable)?;
        self.apply_batch_stats(&pass);
        Ok(pass)
    }

    /// Logits under `mode` without any trainable leaves.
    pub fn logits(&self, input: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let pass = self.forward(input, mode, Trainable::Nothing)?;
        Ok(pass.logits().clone())
    }

    #[cfg(test)]
    pub(crate) fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.running
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn random_input(n: usize, seed: u64) -> Tensor<f32> {
        let mut r = rng::stream(seed);
        Tensor::from_fn(&[n, 1, 40, 98], |_| StandardNormal.sample(&mut r))
    }

    #[test]
    fn default_architecture_counts() {
        let m = KwsModel::<f32>::build(&ModelConfig::small_kws(10), 0).unwrap();
        let groups = m.param_groups();
        assert_eq!(groups.adaptable.len(), 14);
        let bn_affine: usize = groups.adaptable.iter().map(|&id| m.param(id).value.numel()).sum();
        assert_eq!(bn_affine, 2 * (16 + 16 + 24 + 24 + 32 + 32 + 32));
        assert!(m.num_parameters() < 20_000);
        let mut all: Vec<ParamId> = groups.adaptable.iter().chain(&groups.frozen).copied().collect();
        all.sort();
        assert_eq!(all, (0..m.params().len()).map(ParamId).collect::<Vec<_>>());
        assert!(groups.frozen.iter().all(|id| !groups.adaptable.contains(id)));
    }

    #[test]
    fn build_is_seeded_and_validated() {
        let c = ModelConfig::small_kws(10);
        let a = KwsModel::<f32>::build(&c, 3).unwrap();
        assert!(a.bitwise_eq(&KwsModel::build(&c, 3).unwrap()));
        assert!(!a.bitwise_eq(&KwsModel::build(&c, 4).unwrap()));
        let err = KwsModel::<f32>::build(&ModelConfig::small_kws(1), 0).unwrap_err();
        assert!(err.to_string().contains("num_classes must be ≥ 2"));
        let mut bad = ModelConfig::small_kws(4);
        bad.blocks[0].stride = 3;
        assert!(KwsModel::<f32>::build(&bad, 0).is_err());
    }

    #[test]
    fn no_bn_config_has_empty_adaptable_group() {
        let mut c = ModelConfig::small_kws(5);
        c.batch_norm = false;
        let m = KwsModel::<f32>::build(&c, 0).unwrap();
        assert!(m.param_groups().adaptable.is_empty());
        assert_eq!(m.logits(&random_input(2, 1), BnMode::Running).unwrap().shape(), &[2, 5]);
    }

    #[test]
    fn logits_shape_and_shape_errors() {
        let m = KwsModel::<f32>::build(&ModelConfig::small_kws(10), 0).unwrap();
        assert_eq!(m.logits(&random_input(4, 1), BnMode::Running).unwrap().shape(), &[4, 10]);
        assert!(m.logits(&Tensor::zeros(&[2, 1, 40, 50]), BnMode::Running).is_err());
    }

    #[test]
    fn running_mode_rows_are_independent() {
        let m = KwsModel::<f32>::build(&ModelConfig::small_kws(10), 2).unwrap();
        let x = random_input(3, 5);
        let doubled = Tensor::new(vec![6, 1, 40, 98], [x.data(), x.data()].concat()).unwrap();
        let a = m.logits(&x, BnMode::Running).unwrap();
        let b = m.logits(&doubled, BnMode::Running).unwrap();
        assert_eq!(&b.data()[..30], a.data());
        assert_eq!(&b.data()[30..], a.data());
        assert!(a.bitwise_eq(&m.logits(&x, BnMode::Running).unwrap()));
    }

    #[test]
    fn batch_stat_rows_depend_on_batch() {
        let m = KwsModel::<f32>::build(&ModelConfig::small_kws(10), 2).unwrap();
        let x = random_input(2, 9);
        let single = Tensor::new(vec![1, 1, 40, 98], x.data()[..40 * 98].to_vec()).unwrap();
        let a = m.logits(&single, BnMode::BatchStat).unwrap();
        let ab = m.logits(&x, BnMode::BatchStat).unwrap();
        assert_ne!(a.data(), &ab.data()[..10]);
    }

    #[test]
    fn train_mode_updates_running_stats_with_momentum() {
        // A one-layer-deep check on the first BN: feed a constant input so the
        // stem conv output is known, then compare against the momentum rule.
        let mut m = KwsModel::<f64>::build(&ModelConfig::small_kws(3), 1).unwrap();
        let x = Tensor::from_fn(&[2, 1, 40, 98], |i| ((i % 7) as f64) - 3.0);
        let pass = m.forward(&x, BnMode::Train, Trainable::Nothing).unwrap();
        let before = m.running_stats()[0].clone();
        let (mean, var) = pass.batch_stats[0].clone().unwrap();
        m.apply_batch_stats(&pass);
        let after = &m.running_stats()[0];
        for c in 0..16 {
            assert!((after.mean.data()[c] - (0.9 * before.mean.data()[c] + 0.1 * mean[c])).abs() < 1e-12);
            assert!((after.var.data()[c] - (0.9 * before.var.data()[c] + 0.1 * var[c])).abs() < 1e-12);
        }
        // Other modes leave running stats alone.
        let snapshot = m.clone();
        m.forward(&x, BnMode::BatchStat, Trainable::Adaptable).unwrap();
        assert!(m.bitwise_eq(&snapshot));
    }

    #[test]
    fn momentum_rule_reference_values() {
        // Batch mean 3, var 4 from running (0, 1): 0.9·0 + 0.1·3, 0.9·1 + 0.1·4.
        let mut m = KwsModel::<f64>::build(&ModelConfig::small_kws(3), 1).unwrap();
        let mut pass = m.forward(&Tensor::zeros(&[1, 1, 40, 98]), BnMode::Train, Trainable::Nothing).unwrap();
        for bs in pass.batch_stats.iter_mut() {
            let c = bs.as_ref().unwrap().0.len();
            *bs = Some((vec![3.0; c], vec![4.0; c]));
        }
        m.apply_batch_stats(&pass);
        for rs in m.running_stats() {
            assert!(rs.mean.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
            assert!(rs.var.data().iter().all(|&v| (v - 1.3).abs() < 1e-12));
        }
    }
}
