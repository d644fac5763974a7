use serde::{Deserialize, Serialize};

use super::{effective_tau, entropy_select, eta_weight, pkc_scores, sample_weight, spec_mask, AdaptConfig, Method};
use crate::error::{Error, Result};
use crate::model::{ForwardPass, KwsModel, Trainable};
use crate::optim::{Sgd, SgdConfig};
use crate::rng::{self, streams};
use crate::tensor::kernels::{argmax_rows, softmax_entropy};
use crate::tensor::{BnMode, Gradients, NodeId, ParamId, Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub entropy: f64,
    /// Confidence drop under masking; absent when no masked pass ran.
    pub pkc: Option<f64>,
    pub pseudo_label: usize,
    /// Loss weight, recorded only for selected samples.
    pub weight: Option<f64>,
    pub selected_ent: bool,
    pub selected_pkc: bool,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub batch_index: usize,
    pub samples: Vec<SampleRecord>,
    pub update_applied: bool,
    pub loss: Option<f64>,
    pub predictions: Vec<usize>,
    /// SAR restored the source model after this step.
    #[serde(default)]
    pub reset: bool,
}

impl StepReport {
    pub fn num_selected(&self) -> usize {
        self.samples.iter().filter(|s| s.selected).count()
    }
}

/// `Σ w_i H_i / denom` under batch statistics, with its gradients on the
/// batch-norm affine parameters. The weights are constants.
pub fn weighted_entropy_loss<T: Real>(model: &KwsModel<T>, x: &Tensor<T>, weights: &[T], denom: T) -> Result<(f64, Gradients<T>)> {
    let mut pass = model.forward(x, BnMode::BatchStat, Trainable::Adaptable)?;
    let h = pass.graph.softmax_entropy(pass.logits)?;
    let loss = pass.graph.weighted_mean(h, weights.to_vec(), denom)?;
    let value = pass.graph.value(loss).data()[0].as_f64();
    Ok((value, pass.graph.backward(loss)?))
}

/// One adaptation stream: the live model, its optimizer, and the source
/// model it started from.
#[derive(Debug, Clone)]
pub struct Adapter<T: Real = f32> {
    config: AdaptConfig,
    model: KwsModel<T>,
    source: KwsModel<T>,
    opt: Sgd<T>,
    ema: Option<f64>,
    steps: usize,
    adaptable: Vec<ParamId>,
}

impl<T: Real> Adapter<T> {
    pub fn new(model: KwsModel<T>, config: AdaptConfig) -> Result<Self> {
        config.validate()?;
        let adaptable = model.param_groups().adaptable;
        if config.method != Method::Unadapted && adaptable.is_empty() {
            return Err(Error::Adapt("no adaptable parameters".into()));
        }
        let opt = Sgd::new(SgdConfig { lr: config.lr, momentum: config.momentum, weight_decay: 0.0 })?;
        Ok(Adapter { config, source: model.clone(), model, opt, ema: None, steps: 0, adaptable })
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.config
    }

    pub fn model(&self) -> &KwsModel<T> {
        &self.model
    }

    pub fn source(&self) -> &KwsModel<T> {
        &self.source
    }

    /// Error unless every frozen parameter and every running statistic is
    /// bitwise equal to the source model.
    pub fn check_frozen(&self) -> Result<()> {
        for id in self.model.param_groups().frozen {
            let (now, then) = (self.model.param(id), self.source.param(id));
            if !now.value.bitwise_eq(&then.value) {
                return Err(Error::Adapt(format!("frozen parameter {} changed during adaptation", now.name)));
            }
        }
        for (now, then) in self.model.running_stats().iter().zip(self.source.running_stats()) {
            if !now.mean.bitwise_eq(&then.mean) || !now.var.bitwise_eq(&then.var) {
                return Err(Error::Adapt(format!("running statistics of {} changed during adaptation", now.name)));
            }
        }
        Ok(())
    }

    /// Adapt on one `[N, 1, coeffs, frames]` batch. Predictions come from the
    /// same forward pass that drives the update.
    pub fn step(&mut self, x: &Tensor<T>) -> Result<StepReport> {
        let batch_index = self.steps;
        self.steps += 1;
        let method = self.config.method;
        let mode = if method == Method::Unadapted { BnMode::Running } else { BnMode::BatchStat };
        let trainable = if method.is_gradient_based() { Trainable::Adaptable } else { Trainable::Nothing };
        let mut pass = self.model.forward(x, mode, trainable)?;
        let h = pass.graph.softmax_entropy(pass.logits)?;
        let entropies: Vec<f64> = pass.graph.value(h).data().iter().map(|v| v.as_f64()).collect();
        let predictions = argmax_rows(pass.logits())?;
        let num_classes = self.model.config().num_classes;
        let tau = effective_tau(self.config.tau_ent, self.config.tau_ent_mode, num_classes);
        let mut samples: Vec<SampleRecord> = entropies
            .iter()
            .zip(&predictions)
            .map(|(&entropy, &pseudo_label)| SampleRecord {
                entropy,
                pkc: None,
                pseudo_label,
                weight: None,
                selected_ent: true,
                selected_pkc: true,
                selected: method.is_gradient_based(),
            })
            .collect();

        let mut report = StepReport { batch_index, samples: Vec::new(), update_applied: false, loss: None, predictions, reset: false };
        match method {
            Method::Unadapted | Method::Tbn => {}
            Method::Tent => {
                for s in &mut samples {
                    s.weight = Some(1.0);
                }
                report.loss = Some(self.update(pass, h, &samples)?);
                report.update_applied = true;
            }
            Method::Eta => {
                for s in &mut samples {
                    s.selected_ent = s.entropy < tau;
                    s.selected = s.selected_ent;
                    s.weight = s.selected.then(|| eta_weight(s.entropy, tau));
                }
                if samples.iter().any(|s| s.selected) {
                    report.loss = Some(self.update(pass, h, &samples)?);
                    report.update_applied = true;
                }
            }
            Method::Sar => {
                let ent = entropy_select(&entropies, tau);
                for (s, sel) in samples.iter_mut().zip(ent) {
                    s.selected_ent = sel;
                    s.selected = sel;
                    s.weight = sel.then_some(1.0);
                }
                if samples.iter().any(|s| s.selected) {
                    (report.loss, report.reset) = self.sar_update(x, pass, h, &mut samples, tau)?;
                    report.update_applied = report.loss.is_some();
                }
            }
            Method::AdaKws => {
                let toggles = self.config.toggles;
                if toggles.use_entropy_sampler {
                    for s in &mut samples {
                        s.selected_ent = s.entropy < tau;
                    }
                }
                if toggles.use_pkc_sampler || toggles.use_reweighting {
                    let seed = rng::derive_seed(self.config.seed, streams::MASKING, batch_index as u64);
                    let xp = spec_mask(x, &self.config.mask, seed)?;
                    let logits_p = self.model.logits(&xp, BnMode::BatchStat)?;
                    let (probs_p, _, _) = softmax_entropy(&logits_p)?;
                    let probs = pass.graph.probs(h).expect("entropy node keeps probabilities");
                    let pkc = pkc_scores(probs, &probs_p, self.config.tau_pkc)?;
                    for (i, s) in samples.iter_mut().enumerate() {
                        s.pkc = Some(pkc.scores[i]);
                        if toggles.use_pkc_sampler {
                            s.selected_pkc = pkc.mask[i];
                        }
                    }
                }
                for s in &mut samples {
                    s.selected = s.selected_ent && s.selected_pkc;
                    s.weight = s.selected.then(|| match (toggles.use_reweighting, s.pkc) {
                        (true, Some(p)) => sample_weight(s.entropy, p, self.config.sigma),
                        _ => 1.0,
                    });
                }
                if samples.iter().any(|s| s.selected) {
                    report.loss = Some(self.update(pass, h, &samples)?);
                    report.update_applied = true;
                }
            }
        }
        report.samples = samples;
        Ok(report)
    }

    fn weights(samples: &[SampleRecord]) -> (Vec<T>, T) {
        let w = samples.iter().map(|s| T::of(s.weight.unwrap_or(0.0))).collect();
        let count = samples.iter().filter(|s| s.selected).count();
        (w, T::of(count as f64))
    }

    fn backward(mut pass: ForwardPass<T>, h: NodeId, samples: &[SampleRecord]) -> Result<(f64, Gradients<T>)> {
        let (w, denom) = Self::weights(samples);
        let loss = pass.graph.weighted_mean(h, w, denom)?;
        let value = pass.graph.value(loss).data()[0].as_f64();
        Ok((value, pass.graph.backward(loss)?))
    }

    fn update(&mut self, pass: ForwardPass<T>, h: NodeId, samples: &[SampleRecord]) -> Result<f64> {
        let (loss, grads) = Self::backward(pass, h, samples)?;
        self.opt.step(&mut self.model, &grads)?;
        Ok(loss)
    }

    /// Sharpness-aware step: ascend to `θ + ρ·g/‖g‖`, take the gradient of
    /// the filtered entropy there, and apply it at `θ`.
    fn sar_update(
        &mut self,
        x: &Tensor<T>,
        pass: ForwardPass<T>,
        h: NodeId,
        samples: &mut [SampleRecord],
        tau: f64,
    ) -> Result<(Option<f64>, bool)> {
        let (_, grads) = Self::backward(pass, h, samples)?;
        let norm = grads.values().map(|g| g.norm().powi(2)).sum::<f64>().sqrt();
        let saved: Vec<Tensor<T>> = self.adaptable.iter().map(|&id| self.model.param(id).value.clone()).collect();
        let rho = self.config.sar.rho;
        if rho > 0.0 {
            let scale = T::of(rho / (norm + 1e-12));
            for (id, g) in &grads {
                for (p, &gi) in self.model.param_mut(*id).value.data_mut().iter_mut().zip(g.data()) {
                    *p += scale * gi;
                }
            }
        }
        let mut pass2 = self.model.forward(x, BnMode::BatchStat, Trainable::Adaptable)?;
        let h2 = pass2.graph.softmax_entropy(pass2.logits)?;
        let second: Vec<f64> = pass2.graph.value(h2).data().iter().map(|v| v.as_f64()).collect();
        for (s, &e2) in samples.iter_mut().zip(&second) {
            s.selected = s.selected && e2 < tau;
            s.weight = s.selected.then_some(1.0);
        }
        for (&id, v) in self.adaptable.iter().zip(saved) {
            self.model.param_mut(id).value = v;
        }
        if !samples.iter().any(|s| s.selected) {
            return Ok((None, false));
        }
        let (loss, grads2) = Self::backward(pass2, h2, samples)?;
        self.opt.step(&mut self.model, &grads2)?;
        let m = self.config.sar.ema_momentum;
        let ema = self.ema.map_or(loss, |e| m * e + (1.0 - m) * loss);
        if ema < self.config.sar.reset_ema_threshold {
            self.model = self.source.clone();
            self.opt.reset();
            self.ema = None;
            return Ok((Some(loss), true));
        }
        self.ema = Some(ema);
        Ok((Some(loss), false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tta::{MaskPolicy, SarConfig, Toggles};
    use rand_distr::{Distribution, StandardNormal};

    fn setup(n: usize) -> (KwsModel<f32>, Tensor<f32>) {
        let model = KwsModel::build(&ModelConfig::small_kws(4), 11).unwrap();
        let mut r = rng::stream(3);
        let x = Tensor::from_fn(&[n, 1, 40, 98], |_| StandardNormal.sample(&mut r));
        (model, x)
    }

    fn params_equal(a: &KwsModel<f32>, b: &KwsModel<f32>) -> bool {
        a.bitwise_eq(b)
    }

    #[test]
    fn no_adaptable_parameters_is_an_error() {
        let mut c = ModelConfig::small_kws(4);
        c.batch_norm = false;
        let m = KwsModel::<f32>::build(&c, 0).unwrap();
        let err = Adapter::new(m.clone(), AdaptConfig::for_method(Method::Tent)).unwrap_err();
        assert!(err.to_string().contains("no adaptable parameters"));
        assert!(Adapter::new(m, AdaptConfig::for_method(Method::Unadapted)).is_ok());
    }

    #[test]
    fn non_gradient_methods_change_nothing() {
        let (model, x) = setup(6);
        for method in [Method::Unadapted, Method::Tbn] {
            let mut a = Adapter::new(model.clone(), AdaptConfig::for_method(method)).unwrap();
            let r = a.step(&x).unwrap();
            assert!(!r.update_applied);
            assert!(params_equal(a.model(), &model));
        }
    }

    #[test]
    fn adakws_without_toggles_is_tent() {
        let (model, x) = setup(8);
        let mut tent = Adapter::new(model.clone(), AdaptConfig::for_method(Method::Tent)).unwrap();
        let cfg = AdaptConfig { toggles: Toggles::OFF, ..AdaptConfig::for_method(Method::AdaKws) };
        let mut ada = Adapter::new(model.clone(), cfg).unwrap();
        for _ in 0..2 {
            let (a, b) = (tent.step(&x).unwrap(), ada.step(&x).unwrap());
            assert_eq!(a.loss.map(f64::to_bits), b.loss.map(f64::to_bits));
        }
        assert!(params_equal(tent.model(), ada.model()));
        assert!(!params_equal(tent.model(), &model));
        tent.check_frozen().unwrap();
    }

    #[test]
    fn identity_masks_select_nothing() {
        let (model, x) = setup(8);
        let cfg = AdaptConfig { mask: MaskPolicy::identity(), ..AdaptConfig::for_method(Method::AdaKws) };
        let mut a = Adapter::new(model.clone(), cfg).unwrap();
        let r = a.step(&x).unwrap();
        assert!(r.samples.iter().all(|s| s.pkc == Some(0.0) && !s.selected_pkc && !s.selected && s.weight.is_none()));
        assert!(!r.update_applied);
        assert!(params_equal(a.model(), &model));
    }

    #[test]
    fn sar_without_perturbation_is_filtered_tent() {
        let (model, x) = setup(8);
        // Absolute threshold high enough to keep part of the batch.
        let entropies: Vec<f64> = Adapter::new(model.clone(), AdaptConfig::for_method(Method::Tbn))
            .unwrap()
            .step(&x)
            .unwrap()
            .samples
            .iter()
            .map(|s| s.entropy)
            .collect();
        let mut sorted = entropies.clone();
        sorted.sort_by(f64::total_cmp);
        let tau = (sorted[3] + sorted[4]) / 2.0;
        let base = AdaptConfig {
            tau_ent: tau,
            tau_ent_mode: super::super::TauMode::AbsoluteNats,
            sar: SarConfig { rho: 0.0, reset_ema_threshold: 0.0, ..Default::default() },
            ..Default::default()
        };
        let mut sar = Adapter::new(model.clone(), AdaptConfig { method: Method::Sar, ..base.clone() }).unwrap();
        let filtered = Toggles { use_entropy_sampler: true, use_pkc_sampler: false, use_reweighting: false };
        let mut tent = Adapter::new(model.clone(), AdaptConfig { method: Method::AdaKws, toggles: filtered, ..base }).unwrap();
        let (a, b) = (sar.step(&x).unwrap(), tent.step(&x).unwrap());
        assert_eq!(a.num_selected(), 4);
        assert_eq!(b.num_selected(), 4);
        assert!(params_equal(sar.model(), tent.model()));
        assert!(!params_equal(sar.model(), &model));
    }

    #[test]
    fn sar_resets_when_ema_falls() {
        let (model, x) = setup(8);
        let cfg = AdaptConfig {
            tau_ent: 10.0,
            tau_ent_mode: super::super::TauMode::AbsoluteNats,
            sar: SarConfig { reset_ema_threshold: 100.0, ..Default::default() },
            ..AdaptConfig::for_method(Method::Sar)
        };
        let mut a = Adapter::new(model.clone(), cfg).unwrap();
        let r = a.step(&x).unwrap();
        assert!(r.update_applied && r.reset);
        assert!(params_equal(a.model(), &model));
    }

    #[test]
    fn eta_weights_and_selection() {
        let (model, x) = setup(8);
        let mut a = Adapter::new(model, AdaptConfig { tau_ent: 0.9999, ..AdaptConfig::for_method(Method::Eta) }).unwrap();
        let r = a.step(&x).unwrap();
        let tau = 0.9999 * 4f64.ln();
        for s in &r.samples {
            assert_eq!(s.selected, s.entropy < tau);
            if s.selected {
                assert!((s.weight.unwrap() - (tau - s.entropy).exp()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weighted_loss_matches_tent_gradients() {
        let (model, x) = setup(4);
        let (loss, grads) = weighted_entropy_loss(&model, &x, &[1.0; 4], 4.0).unwrap();
        let ids: Vec<ParamId> = grads.keys().copied().collect();
        assert_eq!(ids, model.param_groups().adaptable);
        let mut tent = Adapter::new(model.clone(), AdaptConfig { momentum: 0.0, ..AdaptConfig::for_method(Method::Tent) }).unwrap();
        let r = tent.step(&x).unwrap();
        assert_eq!(r.loss.unwrap().to_bits(), loss.to_bits());
        let id = ids[0];
        let expect: Vec<f32> = model.param(id).value.data().iter().zip(grads[&id].data()).map(|(&p, &g)| p - 1e-3f32 * g).collect();
        assert_eq!(tent.model().param(id).value.data(), &expect[..]);
    }
}
