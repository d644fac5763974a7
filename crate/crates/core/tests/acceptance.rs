//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use adakws_core::audio::{AudioClip, Mfcc};
use adakws_core::corruption::{mix_at_snr_detailed, NoiseBank, NoiseSpec};
use adakws_core::dataset::{batch_indices, synth_generate, LabeledClips, SynthSpec};
use adakws_core::experiment::{run_ablation, run_batch_sweep, run_experiment, ExperimentConfig, RunReport, ABLATION_ROWS, DEFAULT_SWEEP};
use adakws_core::model::{BlockConfig, Checkpoint, KwsModel, ModelConfig};
use adakws_core::tensor::kernels::softmax_entropy;
use adakws_core::train::{evaluate, train_source, TrainConfig};
use adakws_core::tta::{
    run_stream_on, sample_weight, weighted_entropy_loss, AdaptConfig, Adapter, MaskPolicy, Method, SarConfig, TestStream, Toggles,
};
use adakws_core::{rng, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Source-training epochs for the three acceptance checkpoints.
const EPOCHS: usize = 8;
const SEEDS: [u64; 3] = [0, 1, 2];
const DELTAS: [f64; 3] = [0.01, 0.02, 0.03];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Fixture {
    dir: PathBuf,
    test: LabeledClips,
    checkpoints: Vec<Checkpoint>,
    train_secs: Vec<f64>,
}

impl Fixture {
    fn build(dir: &Path) -> Fixture {
        let data = dir.join("data");
        let (train, val, test) = synth_generate(&SynthSpec::default(), &data).unwrap();
        let mut checkpoints = Vec::new();
        let mut train_secs = Vec::new();
        for seed in SEEDS {
            let start = Instant::now();
            let config = TrainConfig { epochs: EPOCHS, seed, ..Default::default() };
            let out = train_source(&config, &ModelConfig::small_kws(10), &train, &val).unwrap();
            train_secs.push(start.elapsed().as_secs_f64());
            out.checkpoint.save(&dir.join(format!("model{seed}.ckpt"))).unwrap();
            checkpoints.push(out.checkpoint);
        }
        Fixture { dir: dir.to_path_buf(), test: test.load_clips().unwrap(), checkpoints, train_secs }
    }

    fn stream(&self, seed: usize, delta: f64) -> TestStream {
        let ck = &self.checkpoints[seed];
        TestStream::prepare(&self.test, &NoiseSpec::gaussian(delta, SEEDS[seed]), None, &Mfcc::default(), &ck.feature_stats).unwrap()
    }

    fn config(&self, name: &str, seed: u64, noise: &[&str], methods: &[&str], seeds: &[u64]) -> ExperimentConfig {
        let quote = |v: &[&str]| v.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(", ");
        let text = format!(
            "checkpoint = \"model{seed}.ckpt\"\nnoise = [{}]\nmethods = [{}]\nseeds = {seeds:?}\n\n[dataset]\nkind = \"synth\"\ndir = \"data\"\n",
            quote(noise),
            quote(methods),
        );
        let path = self.dir.join(name);
        fs::write(&path, text).unwrap();
        ExperimentConfig::load(&path).unwrap()
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / scale(a).max(scale(b)).max(1e-300)
}

/// Central differences of the weighted entropy loss over every BN affine
/// coordinate, compared with backprop as one vector.
fn bn_affine_fd_error(model: &KwsModel<f64>, x: &Tensor<f64>, w: &[f64], step: f64) -> f64 {
    let (_, grads) = weighted_entropy_loss(model, x, w, 8.0).unwrap();
    let mut m = model.clone();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (&id, g) in &grads {
        for j in 0..g.numel() {
            let v = model.param(id).value.data()[j];
            m.param_mut(id).value.data_mut()[j] = v + step;
            let up = weighted_entropy_loss(&m, x, w, 8.0).unwrap().0;
            m.param_mut(id).value.data_mut()[j] = v - step;
            let down = weighted_entropy_loss(&m, x, w, 8.0).unwrap().0;
            m.param_mut(id).value.data_mut()[j] = v;
            analytic.push(g.data()[j]);
            numeric.push((up - down) / (2.0 * step));
        }
    }
    rel_err(&analytic, &numeric)
}

fn criterion_1() -> Outcome {
    let config = ModelConfig {
        blocks: vec![BlockConfig { channels: 24, stride: 1 }, BlockConfig { channels: 32, stride: 2 }],
        ..ModelConfig::small_kws(10)
    };
    let model = KwsModel::<f64>::build(&config, 0).unwrap();
    let mut r = rng::stream(100);
    let x = Tensor::from_fn(&[8, 1, 40, 98], |_| StandardNormal.sample(&mut r));
    let w: Vec<f64> = (0..8).map(|i| 0.5 + 0.25 * i as f64).collect();
    let start = Instant::now();
    let err = bn_affine_fd_error(&model, &x, &w, 1e-4);
    let secs = start.elapsed().as_secs_f64();
    let fine = bn_affine_fd_error(&model, &x, &w, 1e-6);
    outcome(err < 1e-5 && secs < 60.0, format!("rel. error {err:.3e} at step 1e-4 in {secs:.1} s (at step 1e-6: {fine:.3e})"))
}

fn criterion_2() -> Outcome {
    let (_, _, h) = softmax_entropy(&Tensor::<f64>::zeros(&[1, 35])).unwrap();
    let h = h.data()[0];
    let ent_ok = (h - 35f64.ln()).abs() <= 1e-6 && (h - 3.5553).abs() < 1e-4;
    let alpha = sample_weight(0.5, 0.0, 0.5);
    let alpha_ok = (alpha - 2.0).abs() <= 1e-9;
    let grid: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
    let mut mono = true;
    for &pkc in &[-0.5, 0.0, 0.5] {
        let a: Vec<f64> = grid.iter().map(|g| sample_weight(g * 35f64.ln(), pkc, 0.5)).collect();
        mono &= a.windows(2).all(|p| p[1] < p[0]);
    }
    for &ent in &[0.0, 1.0, 3.0] {
        let a: Vec<f64> = grid.iter().map(|g| sample_weight(ent, 2.0 * g - 1.0, 0.5)).collect();
        mono &= a.windows(2).all(|p| p[1] > p[0]);
    }
    outcome(ent_ok && alpha_ok && mono, format!("H(uniform 35) = {h:.7}, α = {alpha}, monotone on grid: {mono}"))
}

/// Step two adapters through the same batches and compare every parameter
/// bitwise after each step.
fn lockstep(model: &KwsModel<f32>, a: AdaptConfig, b: AdaptConfig, stream: &TestStream, batches: usize) -> (bool, usize, bool) {
    let (mut x, mut y) = (Adapter::new(model.clone(), a).unwrap(), Adapter::new(model.clone(), b).unwrap());
    let (mut same, mut updates, mut reset) = (true, 0, false);
    for idx in batch_indices(stream.data.len(), 64, 0).unwrap().iter().take(batches) {
        let batch = stream.data.batch(idx).unwrap();
        let (rx, ry) = (x.step(&batch.features).unwrap(), y.step(&batch.features).unwrap());
        same &= x.model().bitwise_eq(y.model()) && rx.predictions == ry.predictions;
        updates += rx.update_applied as usize;
        reset |= rx.reset || ry.reset;
    }
    (same, updates, reset)
}

fn criterion_3(f: &Fixture) -> Outcome {
    let model = &f.checkpoints[0].model;
    let stream = f.stream(0, 0.03);
    let ada_off = AdaptConfig { toggles: Toggles::OFF, ..AdaptConfig::for_method(Method::AdaKws) };
    let (tent_same, tent_updates, _) = lockstep(model, ada_off, AdaptConfig::for_method(Method::Tent), &stream, 3);
    let sar = AdaptConfig { sar: SarConfig { rho: 0.0, ..Default::default() }, ..AdaptConfig::for_method(Method::Sar) };
    let filtered =
        AdaptConfig { toggles: Toggles { use_entropy_sampler: true, ..Toggles::OFF }, ..AdaptConfig::for_method(Method::AdaKws) };
    let (sar_same, sar_updates, reset) = lockstep(model, sar, filtered, &stream, 3);
    outcome(
        tent_same && sar_same && tent_updates > 0 && sar_updates > 0 && !reset,
        format!("AdaKWS(off) = Tent: {tent_same} ({tent_updates} updates); SAR(ρ=0) = filtered Tent: {sar_same} ({sar_updates} updates)"),
    )
}

fn run_adapter(model: &KwsModel<f32>, config: AdaptConfig, stream: &TestStream) -> (Adapter<f32>, bool, usize) {
    let mut adapter = Adapter::new(model.clone(), config.clone()).unwrap();
    let (mut zero_pkc, mut selected) = (true, 0);
    for idx in batch_indices(stream.data.len(), config.batch_size, config.seed).unwrap() {
        let report = adapter.step(&stream.data.batch(&idx).unwrap().features).unwrap();
        zero_pkc &= report.samples.iter().all(|s| s.pkc.is_none_or(|p| p == 0.0));
        selected += report.num_selected();
    }
    (adapter, zero_pkc, selected)
}

fn criterion_4(f: &Fixture) -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for (seed, ck) in f.checkpoints.iter().enumerate() {
        let stream = f.stream(seed, 0.03);
        let identity = AdaptConfig { mask: MaskPolicy::identity(), ..AdaptConfig::for_method(Method::AdaKws) };
        let (adapter, zero_pkc, selected) = run_adapter(&ck.model, identity, &stream);
        let unchanged = adapter.model().bitwise_eq(&ck.model);
        pass &= zero_pkc && selected == 0 && unchanged;
        if seed == 0 {
            notes.push(format!("identity masks: L_pkc = 0 {zero_pkc}, selected {selected}, unchanged {unchanged}"));
        }
        for method in Method::ALL {
            let (adapter, _, _) = run_adapter(&ck.model, AdaptConfig::for_method(method), &stream);
            let frozen_ok = adapter.check_frozen().is_ok()
                && ck.model.param_groups().frozen.iter().all(|&id| adapter.model().param(id).value.bitwise_eq(&ck.model.param(id).value));
            pass &= frozen_ok;
            if !method.is_gradient_based() {
                let untouched = adapter.model().bitwise_eq(&ck.model);
                pass &= untouched;
                if seed == 0 {
                    notes.push(format!("{method} unchanged {untouched}"));
                }
            }
            if !frozen_ok {
                notes.push(format!("{method} seed {seed} moved a frozen tensor"));
            }
        }
    }
    notes.push("frozen groups intact after every run".into());
    outcome(pass, notes.join("; "))
}

fn criterion_5(f: &Fixture) -> Outcome {
    let mut pass = true;
    let mut notes = Vec::new();
    for (i, ck) in f.checkpoints.iter().enumerate() {
        let start = Instant::now();
        let clean = evaluate(&ck.model, &f.stream(i, 0.0).data).unwrap();
        let noisy = evaluate(&ck.model, &f.stream(i, 0.03).data).unwrap();
        let eval_secs = start.elapsed().as_secs_f64();
        let drop = 100.0 * (clean - noisy);
        pass &= clean >= 0.95 && drop >= 15.0 && f.train_secs[i] <= 600.0 && eval_secs <= 60.0;
        notes.push(format!(
            "seed {}: clean {:.2}%, δ=0.03 {:.2}% (drop {drop:.2}), train {:.0} s, eval {eval_secs:.1} s",
            SEEDS[i],
            100.0 * clean,
            100.0 * noisy,
            f.train_secs[i]
        ));
    }
    outcome(pass, notes.join("; "))
}

fn method_means(reports: &[RunReport]) -> BTreeMap<Method, f64> {
    let mut sums: BTreeMap<Method, (f64, usize)> = BTreeMap::new();
    for cell in reports.iter().flat_map(|r| &r.cells) {
        let e = sums.entry(cell.method).or_default();
        e.0 += cell.accuracy;
        e.1 += 1;
    }
    sums.into_iter().map(|(m, (s, n))| (m, 100.0 * s / n as f64)).collect()
}

fn criterion_6(f: &Fixture) -> Outcome {
    let noise: Vec<String> = DELTAS.iter().map(|d| format!("gaussian:{d}")).collect();
    let noise: Vec<&str> = noise.iter().map(String::as_str).collect();
    let methods: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
    let reports: Vec<RunReport> =
        SEEDS.iter().map(|&s| run_experiment(&f.config(&format!("grid{s}.toml"), s, &noise, &methods, &[s])).unwrap()).collect();
    let mean = method_means(&reports);
    let [ada, tent, tbn, un] = [Method::AdaKws, Method::Tent, Method::Tbn, Method::Unadapted].map(|m| mean[&m]);
    let detail = mean.iter().map(|(m, a)| format!("{m} {a:.2}")).collect::<Vec<_>>().join(", ");
    outcome(ada >= tent - 0.5 && ada >= un + 5.0 && tbn >= un, format!("mean accuracy %: {detail}"))
}

fn criterion_7(f: &Fixture) -> Outcome {
    let mut acc = [0.0; 2];
    for (i, ck) in f.checkpoints.iter().enumerate() {
        let stream = f.stream(i, 0.03);
        for (k, bs) in [32, 128].into_iter().enumerate() {
            let config = AdaptConfig { batch_size: bs, seed: SEEDS[i], ..AdaptConfig::for_method(Method::AdaKws) };
            acc[k] += 100.0 * run_stream_on(&ck.model, &stream, &config).unwrap().accuracy / SEEDS.len() as f64;
        }
    }
    outcome(acc[1] > acc[0], format!("AdaKWS at δ=0.03: batch 32 {:.2}%, batch 128 {:.2}%", acc[0], acc[1]))
}

/// Pink noise from white noise through a three-pole 1/f approximation.
fn pink_noise(len: usize, seed: u64) -> AudioClip {
    let mut r = rng::stream(seed);
    let (mut b0, mut b1, mut b2) = (0.0f64, 0.0, 0.0);
    let samples = (0..len)
        .map(|_| {
            let w: f64 = StandardNormal.sample(&mut r);
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            (0.05 * (b0 + b1 + b2 + w * 0.1848)) as f32
        })
        .collect();
    AudioClip::new(samples)
}

fn criterion_8(f: &Fixture) -> Outcome {
    let bank = NoiseBank::from_clips(BTreeMap::from([("pink".to_string(), (0..4).map(|i| pink_noise(40_000, i)).collect())])).unwrap();
    let pink = bank.category("pink").unwrap();
    let order = rng::permutation(f.test.len(), 8);
    let mut r = rng::stream(9);
    let mut worst = 0.0f64;
    let mut clamped = 0usize;
    for &target in &[-10.0, 0.0, 10.0] {
        for &u in order.iter().take(100) {
            let speech = &f.test.clips[u];
            let m = mix_at_snr_detailed(speech, &pink[r.random_range(0..pink.len())], target, r.random()).unwrap();
            // Recover the added noise from the output, falling back to the
            // scaled crop where the mixture hit the clamp.
            let mut noise_energy = 0.0;
            for ((&out, &s), &n) in m.clip.samples.iter().zip(&speech.samples).zip(&m.noise_crop) {
                let added = if out.abs() >= 1.0 {
                    clamped += 1;
                    m.gain * n as f64
                } else {
                    out as f64 - s as f64
                };
                noise_energy += added * added;
            }
            let speech_energy: f64 = speech.samples.iter().map(|&s| (s as f64).powi(2)).sum();
            let measured = 10.0 * (speech_energy / noise_energy).log10();
            worst = worst.max((measured - target).abs());
        }
    }
    outcome(worst <= 0.1, format!("max |SNR error| {worst:.2e} dB over 300 mixtures ({clamped} clamped samples)"))
}

fn criterion_9(f: &Fixture) -> Outcome {
    let config =
        |name: &str| f.config(name, 0, &["gaussian:0.02", "gaussian:0.03"], &["Unadapted", "TBN", "Tent", "ETA", "SAR", "AdaKWS"], &[0, 1]);
    let a = run_experiment(&config("det_a.toml")).unwrap();
    let b = run_experiment(&config("det_b.toml")).unwrap();
    let same = a.deterministic_json() == b.deterministic_json();
    outcome(same && !a.cells.is_empty(), format!("{} cells, deterministic JSON identical: {same}", a.cells.len()))
}

fn criterion_10(f: &Fixture) -> Outcome {
    let cfg = f.config("ablate.toml", 0, &["gaussian:0.03"], &["AdaKWS"], &SEEDS);
    let start = Instant::now();
    let ablation = run_ablation(&cfg).unwrap();
    let sweep = run_batch_sweep(&cfg).unwrap();
    let secs = start.elapsed().as_secs_f64() + f.train_secs[0];
    let mut rows: Vec<Toggles> = ablation.cells.iter().map(|c| c.toggles).collect();
    rows.dedup();
    let rows_ok = rows == ABLATION_ROWS && ablation.cells.len() == 4 * SEEDS.len();
    let sweep_ok = SEEDS.iter().all(|&s| {
        let sizes: Vec<usize> = sweep.cells.iter().filter(|c| c.seed == s).map(|c| c.batch_size).collect();
        sizes == DEFAULT_SWEEP
    }) && sweep.cells.len() == DEFAULT_SWEEP.len() * SEEDS.len();
    outcome(
        rows_ok && sweep_ok && secs <= 900.0,
        format!(
            "{} ablation cells in 4 toggle rows: {rows_ok}; {} sweep cells over {:?}: {sweep_ok}; {secs:.0} s with training",
            ablation.cells.len(),
            sweep.cells.len(),
            DEFAULT_SWEEP
        ),
    )
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
    });
    let verdict = if result.pass { "PASS" } else { "FAIL" };
    println!("criterion {n:>2} {verdict} [{name}] {} ({:.1} s)", result.detail, start.elapsed().as_secs_f64());
    result.pass
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let mut pass = true;
    pass &= run(1, "gradient check", criterion_1);
    pass &= run(2, "analytic values", criterion_2);
    let start = Instant::now();
    let fixture = Fixture::build(tmp.path());
    println!("trained {} checkpoints for {EPOCHS} epochs in {:.0} s", SEEDS.len(), start.elapsed().as_secs_f64());
    pass &= run(3, "method reduction", || criterion_3(&fixture));
    pass &= run(4, "no-op contracts", || criterion_4(&fixture));
    pass &= run(5, "robustness drop", || criterion_5(&fixture));
    pass &= run(6, "method ordering", || criterion_6(&fixture));
    pass &= run(7, "batch size trend", || criterion_7(&fixture));
    pass &= run(8, "SNR mixer", || criterion_8(&fixture));
    pass &= run(9, "determinism", || criterion_9(&fixture));
    pass &= run(10, "ablation harness", || criterion_10(&fixture));
    if !pass {
        std::process::exit(1);
    }
}
