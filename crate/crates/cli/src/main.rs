//! `adakws`: train a keyword model, corrupt audio, and run test-time
//! adaptation experiments.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adakws_core::audio::{load_wav, write_feature_file, write_wav_pcm16};
use adakws_core::dataset::{synth_generate, SynthSpec};
use adakws_core::experiment::{render_report, run_ablation, run_batch_sweep, run_experiment, DatasetSpec, TableFormat, TrainSetup};
use adakws_core::{Error, ExperimentConfig, Method, Mfcc, NoiseBank, NoiseKind, NoiseSpec, RunReport, TrainConfig};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adakws", version, about = "Test-time adaptation for keyword spotting")]
struct Cli {
    /// Worker threads for feature extraction and experiment cells
    /// (default: all logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic tone-keyword corpus.
    Synth(SynthArgs),
    /// Train the source model.
    Train(TrainArgs),
    /// Run methods × noise conditions × seeds and write a report.
    Adapt(AdaptArgs),
    /// Run the AdaKWS component ablation and the batch-size sweep.
    Ablate(GridArgs),
    /// Run only the AdaKWS batch-size sweep.
    SweepBatch(GridArgs),
    /// Render one or more JSON reports as a table.
    Report(ReportArgs),
    /// Corrupt a single WAV file.
    Corrupt(CorruptArgs),
    /// Dump the MFCC feature map of a WAV file.
    Mfcc(MfccArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Experiment file; its [dataset] section gives the directory and spec.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    clips_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment file with [dataset], optional [train], and `checkpoint`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory with labels.txt (ignored with --config).
    #[arg(long, required_unless_present = "config")]
    data: Option<PathBuf>,
    /// Checkpoint path (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-epoch metrics JSON (default: next to the checkpoint).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: the config's output_dir, else the current directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    config: PathBuf,
    /// Restrict to one method.
    #[arg(long)]
    method: Option<Method>,
    /// Restrict to one condition: gaussian:<delta> or env:<category>:<snr_db>.
    #[arg(long)]
    noise: Option<NoiseKind>,
    /// Restrict to one seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Report path (default: <output_dir>/report.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long, default_value = "markdown")]
    format: TableFormat,
    /// Refuse reports whose config digest differs from this experiment file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct CorruptArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    noise: NoiseKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Experiment file whose [dataset] names the noise bank for env: noise.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct MfccArgs {
    #[arg(long)]
    input: PathBuf,
    /// Binary feature file; without it only the shape is printed.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Any failure to read or resolve a config file is a configuration error.
fn as_config_error(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

fn load_experiment(path: &Path) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(path).map_err(as_config_error)?)
}

fn load_setup(path: &Path) -> Result<TrainSetup> {
    Ok(TrainSetup::load(path).map_err(as_config_error)?)
}

fn dataset_spec(config: &Path) -> Result<DatasetSpec> {
    Ok(load_setup(config)?.dataset)
}

fn synth(args: SynthArgs) -> Result<()> {
    let (spec, dir) = match &args.config {
        Some(c) => {
            let d = dataset_spec(c)?;
            (d.synth.clone().unwrap_or_default(), d.dir)
        }
        None => (
            SynthSpec { num_classes: args.classes, clips_per_class: args.clips_per_class, seed: args.seed },
            args.out.clone().expect("required by clap"),
        ),
    };
    let (train, val, test) = synth_generate(&spec, &dir)?;
    println!(
        "wrote {} clips to {} (train {}, val {}, test {})",
        train.len() + val.len() + test.len(),
        dir.display(),
        train.len(),
        val.len(),
        test.len()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut setup = match &args.config {
        Some(c) => load_setup(c)?,
        None => TrainSetup {
            checkpoint: args.out.clone().unwrap_or_else(|| PathBuf::from("model.ckpt")),
            dataset: DatasetSpec {
                kind: adakws_core::experiment::DatasetKind::Gsc,
                dir: args.data.clone().expect("required by clap"),
                keywords: Vec::new(),
                synth: None,
                noise_dir: None,
                noise_manifest: None,
                max_test_per_class: None,
            },
            train: TrainConfig::default(),
        },
    };
    if let Some(out) = args.out {
        setup.checkpoint = out;
    }
    if let Some(e) = args.epochs {
        setup.train.epochs = e;
    }
    if let Some(s) = args.seed {
        setup.train.seed = s;
    }
    setup.train.validate()?;
    let outcome = setup.run()?;
    for m in &outcome.metrics {
        println!(
            "epoch {:>3}  loss {:.4}  train {:.2}%  val {:.2}%",
            m.epoch,
            m.train_loss,
            100.0 * m.train_accuracy,
            100.0 * m.val_accuracy
        );
    }
    outcome.checkpoint.save(&setup.checkpoint)?;
    let metrics = args.metrics.unwrap_or_else(|| setup.checkpoint.with_extension("metrics.json"));
    fs::write(&metrics, serde_json::to_string_pretty(&outcome.metrics)?).with_context(|| format!("writing {}", metrics.display()))?;
    println!(
        "saved {} (best epoch {}, val {:.2}%)",
        setup.checkpoint.display(),
        outcome.checkpoint.training.best_epoch,
        100.0 * outcome.checkpoint.training.val_accuracy
    );
    Ok(())
}

fn out_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("."))
}

fn write_report(report: &RunReport, json_path: &Path) -> Result<()> {
    if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(json_path, report.to_json()).with_context(|| format!("writing {}", json_path.display()))?;
    for (format, ext) in [(TableFormat::Csv, "csv"), (TableFormat::Markdown, "md")] {
        let path = json_path.with_extension(ext);
        fs::write(&path, render_report(std::slice::from_ref(report), format)?).with_context(|| format!("writing {}", path.display()))?;
    }
    print!("{}", render_report(std::slice::from_ref(report), TableFormat::Markdown)?);
    println!("wrote {}", json_path.display());
    Ok(())
}

fn adapt(args: AdaptArgs) -> Result<()> {
    let mut cfg = load_experiment(&args.config)?;
    if let Some(m) = args.method {
        cfg.methods = vec![m];
    }
    if let Some(n) = args.noise {
        if matches!(n, NoiseKind::Environmental { .. }) && cfg.dataset.noise_dir.is_none() {
            return Err(Error::Config("environmental noise needs dataset.noise_dir in the config".into()).into());
        }
        cfg.conditions = vec![n];
    }
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    let path = args.out.unwrap_or_else(|| out_dir(&cfg, None).join("report.json"));
    write_report(&run_experiment(&cfg)?, &path)
}

fn ablate(args: GridArgs) -> Result<()> {
    let cfg = load_experiment(&args.config)?;
    let dir = out_dir(&cfg, args.out);
    write_report(&run_ablation(&cfg)?, &dir.join("ablation.json"))?;
    write_report(&run_batch_sweep(&cfg)?, &dir.join("sweep.json"))
}

fn sweep_batch(args: GridArgs) -> Result<()> {
    let cfg = load_experiment(&args.config)?;
    let dir = out_dir(&cfg, args.out);
    write_report(&run_batch_sweep(&cfg)?, &dir.join("sweep.json"))
}

fn report(args: ReportArgs) -> Result<()> {
    let reports = args
        .reports
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunReport::from_json(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(c) = &args.config {
        let digest = load_experiment(c)?.digest();
        if let Some((p, _)) = args.reports.iter().zip(&reports).find(|(_, r)| r.config_digest != digest) {
            bail!(Error::Config(format!("{} was produced by a different configuration than {}", p.display(), c.display())));
        }
    }
    print!("{}", render_report(&reports, args.format)?);
    Ok(())
}

fn corrupt(args: CorruptArgs) -> Result<()> {
    let clip = load_wav(&args.input)?;
    let bank: Option<NoiseBank> = match (&args.noise, &args.config) {
        (NoiseKind::Environmental { .. }, Some(c)) => dataset_spec(c)?.noise_bank()?,
        (NoiseKind::Environmental { .. }, None) => bail!(Error::Config("env: noise needs --config with dataset.noise_dir".into())),
        _ => None,
    };
    let out = NoiseSpec { kind: args.noise, seed: args.seed }.apply(&clip, 0, bank.as_ref())?;
    write_wav_pcm16(&args.out, &out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn mfcc(args: MfccArgs) -> Result<()> {
    let fm = Mfcc::default().compute(&load_wav(&args.input)?)?;
    println!("{} coefficients × {} frames", fm.num_coeffs(), fm.num_frames());
    if let Some(out) = args.out {
        write_feature_file(&out, &fm)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Adapt(a) => adapt(a),
        Command::Ablate(a) => ablate(a),
        Command::SweepBatch(a) => sweep_batch(a),
        Command::Report(a) => report(a),
        Command::Corrupt(a) => corrupt(a),
        Command::Mfcc(a) => mfcc(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
