//! Experiment grids described in TOML, their reports, and table rendering.
//!
//! ```toml
//! checkpoint = "model.ckpt"
//! methods = ["Unadapted", "TBN", "Tent", "AdaKWS"]
//! noise = ["gaussian:0.01", "gaussian:0.02", "gaussian:0.03"]
//! seeds = [0, 1, 2]
//!
//! [dataset]
//! kind = "synth"          # or "gsc"
//! dir = "data/synth"
//!
//! [adapt]                 # defaults for every method
//! lr = 0.001
//!
//! [method.AdaKWS]         # per-method overrides
//! tau_pkc = 0.05
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::Mfcc;
use crate::corruption::{load_noise_bank, NoiseBank, NoiseKind, NoiseSpec};
use crate::dataset::{scan_gsc, scan_with_labels, synth_generate, LabeledClips, Manifest, SynthSpec, LABELS_FILE, TEST_LIST, VAL_LIST};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelConfig};
use crate::train::{train_source, TrainConfig, TrainOutcome};
use crate::tta::{run_stream_on, AdaptConfig, Method, TestStream, Toggles};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_SWEEP: [usize; 5] = [32, 64, 128, 256, 512];

/// Entropy sampler, PKC sampler, reweighting.
pub const ABLATION_ROWS: [Toggles; 4] = [
    Toggles { use_entropy_sampler: true, use_pkc_sampler: true, use_reweighting: true },
    Toggles { use_entropy_sampler: true, use_pkc_sampler: true, use_reweighting: false },
    Toggles { use_entropy_sampler: true, use_pkc_sampler: false, use_reweighting: true },
    Toggles { use_entropy_sampler: false, use_pkc_sampler: true, use_reweighting: true },
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Generated on first use when `dir` has no label file.
    Synth,
    Gsc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub dir: PathBuf,
    /// GSC keyword directories to use.
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    #[serde(default)]
    pub noise_dir: Option<PathBuf>,
    /// `path,category` CSV; defaults to `noise_dir/noise.csv`.
    #[serde(default)]
    pub noise_manifest: Option<PathBuf>,
    /// Keep at most this many test utterances per class.
    #[serde(default)]
    pub max_test_per_class: Option<usize>,
}

impl DatasetSpec {
    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.dir);
        if let Some(d) = &mut self.noise_dir {
            join(d);
        }
        if let Some(m) = &mut self.noise_manifest {
            join(m);
        }
    }

    /// Train/val/test manifests, generating the synthetic corpus if needed.
    pub fn splits(&self) -> Result<(Manifest, Manifest, Manifest)> {
        match self.kind {
            DatasetKind::Synth => {
                if self.dir.join(LABELS_FILE).is_file() {
                    scan_with_labels(&self.dir)
                } else {
                    synth_generate(&self.synth.clone().unwrap_or_default(), &self.dir)
                }
            }
            DatasetKind::Gsc if self.keywords.is_empty() => scan_with_labels(&self.dir),
            DatasetKind::Gsc => {
                let (val, test) = (self.dir.join(VAL_LIST), self.dir.join(TEST_LIST));
                scan_gsc(&self.dir, &self.keywords, val.is_file().then_some(val.as_path()), test.is_file().then_some(test.as_path()))
            }
        }
    }

    pub fn noise_bank(&self) -> Result<Option<NoiseBank>> {
        let Some(dir) = &self.noise_dir else { return Ok(None) };
        let manifest = self.noise_manifest.clone().unwrap_or_else(|| dir.join("noise.csv"));
        load_noise_bank(dir, &manifest).map(Some)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    checkpoint: PathBuf,
    dataset: DatasetSpec,
    noise: Vec<String>,
    methods: Vec<String>,
    seeds: Vec<u64>,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    #[serde(default)]
    adapt: toml::Table,
    #[serde(default)]
    method: BTreeMap<String, toml::Table>,
    #[serde(default)]
    sweep: Option<SweepSection>,
    #[serde(default)]
    train: TrainConfig,
}

/// The parts of an experiment file that source training needs. Other
/// sections are ignored, so one file can drive both training and adaptation.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct TrainSetup {
    pub checkpoint: PathBuf,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

impl TrainSetup {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut setup: TrainSetup = toml::from_str(text).map_err(config_err)?;
        setup.dataset.resolve_paths(base_dir);
        if setup.checkpoint.is_relative() {
            setup.checkpoint = base_dir.join(&setup.checkpoint);
        }
        setup.train.validate()?;
        Ok(setup)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Train the default architecture on the spec's train split, selecting
    /// on its validation split.
    pub fn run(&self) -> Result<TrainOutcome> {
        let (train, val, _) = self.dataset.splits()?;
        train_source(&self.train, &ModelConfig::small_kws(train.num_classes()), &train, &val)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepSection {
    batch_sizes: Vec<usize>,
}

/// A fully resolved experiment: every default filled in and every path
/// absolute or relative to the working directory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub checkpoint: PathBuf,
    pub dataset: DatasetSpec,
    pub conditions: Vec<NoiseKind>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Resolved settings for every method, in [`Method::ALL`] order.
    pub adapt: Vec<AdaptConfig>,
    pub sweep_batch_sizes: Vec<usize>,
    pub train: TrainConfig,
    #[serde(skip)]
    pub output_dir: Option<PathBuf>,
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl ExperimentConfig {
    /// Parse TOML; relative paths are taken relative to `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(config_err)?;
        if raw.methods.is_empty() || raw.noise.is_empty() || raw.seeds.is_empty() {
            return Err(Error::Config("need at least one method, one noise condition and one seed".into()));
        }
        let methods = raw.methods.iter().map(|m| m.parse()).collect::<Result<Vec<Method>>>()?;
        let conditions = raw.noise.iter().map(|n| n.parse()).collect::<Result<Vec<NoiseKind>>>()?;
        let mut overrides: BTreeMap<Method, &toml::Table> = BTreeMap::new();
        for (name, table) in &raw.method {
            overrides.insert(name.parse()?, table);
        }
        let adapt = Method::ALL
            .iter()
            .map(|&m| {
                let mut table = raw.adapt.clone();
                if let Some(o) = overrides.get(&m) {
                    merge(&mut table, o);
                }
                table.insert("method".into(), toml::Value::String(m.name().into()));
                let cfg: AdaptConfig = toml::Value::Table(table).try_into().map_err(|e| config_err(format!("[method.{m}]: {e}")))?;
                cfg.validate()?;
                Ok(cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        let sweep_batch_sizes = raw.sweep.map_or(DEFAULT_SWEEP.to_vec(), |s| s.batch_sizes);
        if sweep_batch_sizes.is_empty() || sweep_batch_sizes.contains(&0) {
            return Err(Error::Config("sweep batch sizes must be non-empty and ≥ 1".into()));
        }
        let mut dataset = raw.dataset;
        dataset.resolve_paths(base_dir);
        if conditions.iter().any(|c| matches!(c, NoiseKind::Environmental { .. })) && dataset.noise_dir.is_none() {
            return Err(Error::Config("environmental noise conditions need dataset.noise_dir".into()));
        }
        let resolve = |p: PathBuf| if p.is_relative() { base_dir.join(p) } else { p };
        Ok(ExperimentConfig {
            checkpoint: resolve(raw.checkpoint),
            dataset,
            conditions,
            methods,
            seeds: raw.seeds,
            adapt,
            sweep_batch_sizes,
            train: raw.train,
            output_dir: raw.output_dir.map(resolve),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn adapt_config(&self, method: Method) -> &AdaptConfig {
        &self.adapt[Method::ALL.iter().position(|&m| m == method).expect("every method resolved")]
    }

    /// SHA-256 of the canonical JSON form of the resolved configuration.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Test clips, optional noise bank, and a content digest of the test split.
pub struct ExperimentData {
    pub test: LabeledClips,
    pub bank: Option<NoiseBank>,
    pub digest: String,
}

pub fn load_experiment_data(spec: &DatasetSpec) -> Result<ExperimentData> {
    let (_, _, mut test) = spec.splits()?;
    if let Some(n) = spec.max_test_per_class {
        test = test.take_per_class(n);
    }
    let mut h = Sha256::new();
    for name in &test.labels {
        h.update(name.as_bytes());
        h.update([0]);
    }
    for e in &test.entries {
        let rel = e.path.strip_prefix(&spec.dir).unwrap_or(&e.path);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update((e.label as u64).to_le_bytes());
        h.update(Sha256::digest(fs::read(&e.path).map_err(|err| Error::io(&e.path, err))?));
    }
    Ok(ExperimentData { test: test.load_clips()?, bank: spec.noise_bank()?, digest: hex(&h.finalize()) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Grid,
    Ablation,
    BatchSweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    /// Table row this cell belongs to.
    pub row: String,
    pub method: Method,
    pub toggles: Toggles,
    pub condition: String,
    pub seed: u64,
    pub batch_size: usize,
    pub accuracy: f64,
    pub n_samples: usize,
    pub n_correct: usize,
    pub n_updates: usize,
    pub n_resets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub row: String,
    pub condition: String,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
    pub n_seeds: usize,
}

/// Timings. Excluded from the determinism contract.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub total_secs: f64,
    pub cell_secs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub kind: ReportKind,
    pub config_digest: String,
    pub dataset_digest: String,
    pub cells: Vec<CellSummary>,
    pub aggregates: Vec<Aggregate>,
    pub wall_clock: WallClock,
}

impl RunReport {
    /// JSON without the wall-clock block.
    pub fn deterministic_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        v.as_object_mut().expect("object").remove("wall_clock");
        serde_json::to_string_pretty(&v).expect("value serializes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn aggregate(cells: &[CellSummary]) -> Vec<Aggregate> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for c in cells {
        let key = (c.row.clone(), c.condition.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(c.accuracy);
    }
    order
        .into_iter()
        .map(|key| {
            let v = &groups[&key];
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
            Aggregate { row: key.0, condition: key.1, mean, std, n_seeds: v.len() }
        })
        .collect()
}

struct CellPlan {
    row: String,
    config: AdaptConfig,
    condition: usize,
    seed: u64,
}

fn toggles_row(t: &Toggles) -> String {
    let flag = |b: bool| if b { "on" } else { "off" };
    format!("AdaKWS ent={} pkc={} rw={}", flag(t.use_entropy_sampler), flag(t.use_pkc_sampler), flag(t.use_reweighting))
}

fn execute(
    cfg: &ExperimentConfig,
    kind: ReportKind,
    checkpoint: &Checkpoint,
    data: &ExperimentData,
    plans: Vec<CellPlan>,
) -> Result<RunReport> {
    let start = Instant::now();
    if checkpoint.labels != data.test.label_names {
        return Err(Error::Config(format!(
            "checkpoint labels {:?} do not match dataset labels {:?}",
            checkpoint.labels, data.test.label_names
        )));
    }
    let keys: BTreeSet<(usize, u64)> = plans.iter().map(|p| (p.condition, p.seed)).collect();
    let frontend = Mfcc::default();
    let streams: BTreeMap<(usize, u64), TestStream> = keys
        .into_par_iter()
        .map(|(c, seed)| {
            let noise = NoiseSpec { kind: cfg.conditions[c].clone(), seed };
            let s = TestStream::prepare(&data.test, &noise, data.bank.as_ref(), &frontend, &checkpoint.feature_stats)
                .map_err(|e| Error::Cell { cell: format!("{}, seed {seed}", cfg.conditions[c]), source: Box::new(e) })?;
            Ok(((c, seed), s))
        })
        .collect::<Result<_>>()?;
    let results = plans
        .par_iter()
        .map(|p| {
            let config = AdaptConfig { seed: p.seed, ..p.config.clone() };
            let cell = || format!("{}, {}, seed {}", p.row, cfg.conditions[p.condition], p.seed);
            let r = run_stream_on(&checkpoint.model, &streams[&(p.condition, p.seed)], &config)
                .map_err(|e| Error::Cell { cell: cell(), source: Box::new(e) })?;
            let summary = CellSummary {
                row: p.row.clone(),
                method: config.method,
                toggles: config.toggles,
                condition: cfg.conditions[p.condition].to_string(),
                seed: p.seed,
                batch_size: config.batch_size,
                accuracy: r.accuracy,
                n_samples: r.n_samples,
                n_correct: r.n_correct,
                n_updates: r.n_updates,
                n_resets: r.n_resets,
            };
            Ok((summary, r.wall_clock_secs))
        })
        .collect::<Result<Vec<_>>>()?;
    let (cells, cell_secs): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        kind,
        config_digest: cfg.digest(),
        dataset_digest: data.digest.clone(),
        aggregates: aggregate(&cells),
        cells,
        wall_clock: WallClock { total_secs: start.elapsed().as_secs_f64(), cell_secs },
    })
}

fn grid(cfg: &ExperimentConfig, rows: Vec<(String, AdaptConfig)>) -> Vec<CellPlan> {
    let mut plans = Vec::new();
    for (row, config) in rows {
        for condition in 0..cfg.conditions.len() {
            for &seed in &cfg.seeds {
                plans.push(CellPlan { row: row.clone(), config: config.clone(), condition, seed });
            }
        }
    }
    plans
}

/// Methods × conditions × seeds.
pub fn run_experiment_with(cfg: &ExperimentConfig, checkpoint: &Checkpoint, data: &ExperimentData) -> Result<RunReport> {
    let rows = cfg.methods.iter().map(|&m| (m.name().to_string(), cfg.adapt_config(m).clone())).collect();
    execute(cfg, ReportKind::Grid, checkpoint, data, grid(cfg, rows))
}

/// The four AdaKWS toggle rows × conditions × seeds.
pub fn run_ablation_with(cfg: &ExperimentConfig, checkpoint: &Checkpoint, data: &ExperimentData) -> Result<RunReport> {
    let base = cfg.adapt_config(Method::AdaKws);
    let rows = ABLATION_ROWS.iter().map(|t| (toggles_row(t), AdaptConfig { toggles: *t, ..base.clone() })).collect();
    execute(cfg, ReportKind::Ablation, checkpoint, data, grid(cfg, rows))
}

/// AdaKWS at every sweep batch size × conditions × seeds.
pub fn run_batch_sweep_with(cfg: &ExperimentConfig, checkpoint: &Checkpoint, data: &ExperimentData) -> Result<RunReport> {
    let base = cfg.adapt_config(Method::AdaKws);
    let rows =
        cfg.sweep_batch_sizes.iter().map(|&bs| (format!("AdaKWS bs={bs}"), AdaptConfig { batch_size: bs, ..base.clone() })).collect();
    execute(cfg, ReportKind::BatchSweep, checkpoint, data, grid(cfg, rows))
}

fn load_inputs(cfg: &ExperimentConfig) -> Result<(Checkpoint, ExperimentData)> {
    Ok((Checkpoint::load(&cfg.checkpoint)?, load_experiment_data(&cfg.dataset)?))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let (ck, data) = load_inputs(cfg)?;
    run_experiment_with(cfg, &ck, &data)
}

pub fn run_ablation(cfg: &ExperimentConfig) -> Result<RunReport> {
    let (ck, data) = load_inputs(cfg)?;
    run_ablation_with(cfg, &ck, &data)
}

pub fn run_batch_sweep(cfg: &ExperimentConfig) -> Result<RunReport> {
    let (ck, data) = load_inputs(cfg)?;
    run_batch_sweep_with(cfg, &ck, &data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TableFormat::Csv),
            "markdown" | "md" => Ok(TableFormat::Markdown),
            _ => Err(Error::Config(format!("unknown table format {s:?} (csv or markdown)"))),
        }
    }
}

/// Rows × conditions of seed-mean accuracy in percent, plus an `Average`
/// column over the row's conditions.
pub fn render_report(reports: &[RunReport], format: TableFormat) -> Result<String> {
    let first = reports.first().ok_or_else(|| Error::Config("no reports to render".into()))?;
    if let Some(r) = reports.iter().find(|r| r.dataset_digest != first.dataset_digest) {
        return Err(Error::Config(format!("reports come from different test sets ({} vs {})", first.dataset_digest, r.dataset_digest)));
    }
    let cells: Vec<CellSummary> = reports.iter().flat_map(|r| r.cells.iter().cloned()).collect();
    let aggs = aggregate(&cells);
    let mut rows: Vec<&str> = Vec::new();
    let mut cols: Vec<&str> = Vec::new();
    for a in &aggs {
        if !rows.contains(&a.row.as_str()) {
            rows.push(&a.row);
        }
        if !cols.contains(&a.condition.as_str()) {
            cols.push(&a.condition);
        }
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|&row| {
            let vals: Vec<Option<f64>> =
                cols.iter().map(|&c| aggs.iter().find(|a| a.row == row && a.condition == c).map(|a| 100.0 * a.mean)).collect();
            let present: Vec<f64> = vals.iter().flatten().copied().collect();
            let avg = present.iter().sum::<f64>() / present.len() as f64;
            std::iter::once(row.to_string())
                .chain(vals.iter().map(|v| v.map_or(String::new(), |x| format!("{x:.2}"))))
                .chain(std::iter::once(format!("{avg:.2}")))
                .collect()
        })
        .collect();
    let header: Vec<&str> = std::iter::once("method").chain(cols.iter().copied()).chain(std::iter::once("Average")).collect();
    match format {
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let err = |e: csv::Error| Error::Config(e.to_string());
            w.write_record(&header).map_err(err)?;
            for r in &table {
                w.write_record(r).map_err(err)?;
            }
            Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Config(e.to_string()))?).expect("utf-8"))
        }
        TableFormat::Markdown => {
            let mut out = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
            for r in &table {
                let _ = writeln!(out, "| {} |", r.join(" | "));
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
checkpoint = "m.ckpt"
methods = ["AdaKWS"]
noise = ["gaussian:0.03"]
seeds = [0]
[dataset]
kind = "synth"
dir = "data"
"#;

    fn cell(row: &str, condition: &str, seed: u64, accuracy: f64) -> CellSummary {
        CellSummary {
            row: row.into(),
            method: Method::AdaKws,
            toggles: Toggles::default(),
            condition: condition.into(),
            seed,
            batch_size: 128,
            accuracy,
            n_samples: 100,
            n_correct: (accuracy * 100.0) as usize,
            n_updates: 1,
            n_resets: 0,
        }
    }

    fn report(cells: Vec<CellSummary>, digest: &str) -> RunReport {
        RunReport {
            schema_version: REPORT_SCHEMA_VERSION,
            tool_version: "t".into(),
            kind: ReportKind::Grid,
            config_digest: "c".into(),
            dataset_digest: digest.into(),
            aggregates: aggregate(&cells),
            cells,
            wall_clock: WallClock::default(),
        }
    }

    #[test]
    fn parses_minimal_config_with_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL, Path::new("/base")).unwrap();
        assert_eq!(cfg.checkpoint, PathBuf::from("/base/m.ckpt"));
        assert_eq!(cfg.dataset.dir, PathBuf::from("/base/data"));
        assert_eq!(cfg.sweep_batch_sizes, DEFAULT_SWEEP);
        assert_eq!(cfg.adapt_config(Method::AdaKws), &AdaptConfig::for_method(Method::AdaKws));
    }

    #[test]
    fn overrides_merge_per_method() {
        let text =
            format!("{MINIMAL}\n[adapt]\nlr = 0.01\n[method.AdaKWS]\ntau_pkc = 0.1\n[method.AdaKWS.toggles]\nuse_reweighting = false\n");
        let cfg = ExperimentConfig::from_toml(&text, Path::new(".")).unwrap();
        let a = cfg.adapt_config(Method::AdaKws);
        assert_eq!((a.lr, a.tau_pkc, a.toggles.use_reweighting, a.toggles.use_pkc_sampler), (0.01, 0.1, false, true));
        assert_eq!(cfg.adapt_config(Method::Tent).lr, 0.01);
        assert_eq!(cfg.adapt_config(Method::Tent).tau_pkc, 0.05);
    }

    #[test]
    fn config_errors() {
        let base = Path::new(".");
        for bad in [
            MINIMAL.replace("[\"AdaKWS\"]", "[]"),
            MINIMAL.replace("AdaKWS", "Nope"),
            MINIMAL.replace("gaussian:0.03", "pink"),
            format!("{MINIMAL}\nbogus = 1\n"),
            format!("{MINIMAL}\n[adapt]\nlr = -1.0\n"),
            MINIMAL.replace("gaussian:0.03", "env:babble:5"),
        ] {
            assert!(matches!(ExperimentConfig::from_toml(&bad, base), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn digest_ignores_formatting_and_tracks_values() {
        let base = Path::new(".");
        let a = ExperimentConfig::from_toml(MINIMAL, base).unwrap().digest();
        let reordered = "seeds = [0]\n\n# comment\nnoise = [ \"gaussian:0.03\" ]\nmethods = [\"AdaKWS\"]\ncheckpoint = \"m.ckpt\"\n[dataset]\ndir = \"data\"\nkind = \"synth\"\n";
        assert_eq!(ExperimentConfig::from_toml(reordered, base).unwrap().digest(), a);
        let explicit_default = format!("{MINIMAL}\n[adapt]\ntau_ent = 0.4\n");
        assert_eq!(ExperimentConfig::from_toml(&explicit_default, base).unwrap().digest(), a);
        let changed = format!("{MINIMAL}\n[adapt]\ntau_ent = 0.5\n");
        assert_ne!(ExperimentConfig::from_toml(&changed, base).unwrap().digest(), a);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn render_reproduces_published_cell() {
        let r = report(vec![cell("AdaKWS", "gaussian:0.03", 0, 0.7701)], "d");
        let csv = render_report(std::slice::from_ref(&r), TableFormat::Csv).unwrap();
        assert_eq!(csv, "method,gaussian:0.03,Average\nAdaKWS,77.01,77.01\n");
        let md = render_report(&[r], TableFormat::Markdown).unwrap();
        assert!(md.contains("| AdaKWS | 77.01 | 77.01 |"));
    }

    #[test]
    fn render_averages_seeds_then_conditions() {
        let cells = vec![cell("Tent", "a", 0, 0.5), cell("Tent", "a", 1, 0.7), cell("Tent", "b", 0, 0.9), cell("Tent", "b", 1, 0.9)];
        let csv = render_report(&[report(cells, "d")], TableFormat::Csv).unwrap();
        assert_eq!(csv.lines().nth(1).unwrap(), "Tent,60.00,90.00,75.00");
        let err = render_report(&[report(vec![], "d"), report(vec![], "e")], TableFormat::Csv).unwrap_err();
        assert!(err.to_string().contains("different test sets"));
    }

    #[test]
    fn aggregates_and_deterministic_json() {
        let r = report(vec![cell("X", "a", 0, 0.4), cell("X", "a", 1, 0.6)], "d");
        assert_eq!(r.aggregates.len(), 1);
        assert!((r.aggregates[0].mean - 0.5).abs() < 1e-12);
        assert!((r.aggregates[0].std - 0.02f64.sqrt()).abs() < 1e-12);
        let mut slow = r.clone();
        slow.wall_clock.total_secs = 99.0;
        assert_eq!(slow.deterministic_json(), r.deterministic_json());
        assert!(!r.deterministic_json().contains("wall_clock"));
        assert_eq!(RunReport::from_json(&r.to_json()).unwrap(), r);
    }
}
