//! Command-line front end: dataset generation, training, quantization,
//! threshold sweeps and single-stream simulation.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ircascade::cascade::{run, CascadeConfig, ClipRefresh, ClipSource, ModelKind};
use ircascade::cnn::{load_float_model, save_float_model};
use ircascade::energy::{estimate, CostModel};
use ircascade::eval::{fmt_sig, sweep, write_agg_csv, write_rows_csv, SweepConfig};
use ircascade::frameio::{
    load_csv, split_by_session, synth_stream, with_session, write_csv, DatasetVariant, FrameSeq,
    SynthConfig,
};
use ircascade::quant::{calibrate, quantize_model, save_quant_model, QUANT_MAGIC};
use ircascade::train::{train, Hyper};
use ircascade::trigger::TriggerConfig;

#[derive(Parser)]
#[command(
    name = "ircascade",
    about = "Adaptive trigger+CNN inference for 8x8 thermal frames",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset as canonical CSV.
    Gen(GenArgs),
    /// Train one float model per seed on the training session of a dataset.
    Train(TrainArgs),
    /// Post-training-quantize a float model against a calibration dataset.
    Quantize(QuantizeArgs),
    /// Evaluate models over a threshold x variant grid, writing sweep CSVs.
    Sweep(SweepArgs),
    /// Run the cascade over one stream, writing a trace CSV and an energy report.
    RunStream(RunStreamArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Synthetic generator config (JSON with the SynthConfig field names).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sessions to generate, one stream of `length` frames each; stream i
    /// uses seed + session id.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    sessions: Vec<u32>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Labeled dataset CSV.
    #[arg(long)]
    dataset: PathBuf,
    /// Hyperparameter JSON (Hyper field names, all optional).
    #[arg(long)]
    hyper: Option<PathBuf>,
    /// Training seeds, comma separated; defaults to the hyper seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Session used as the training split.
    #[arg(long, default_value_t = 1)]
    train_session: u32,
    /// Output directory for model_seed<N>.json files.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct QuantizeArgs {
    /// Float model JSON.
    #[arg(long)]
    model: PathBuf,
    /// Calibration dataset CSV.
    #[arg(long)]
    calib: PathBuf,
    /// Output IRQ1 file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Model file (float JSON or IRQ1); repeat for one model per seed.
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    /// Test dataset CSV (used as-is; split sessions beforehand).
    #[arg(long)]
    dataset: PathBuf,
    /// Comma-separated thresholds; default 0..=65.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<u32>>,
    /// Comma-separated variants from {default,double,triple}.
    #[arg(long, value_delimiter = ',', default_value = "default,double,triple")]
    variants: Vec<DatasetVariant>,
    /// Cost model JSON overrides.
    #[arg(long)]
    cost: Option<PathBuf>,
    #[arg(long, default_value = "truth")]
    clip_source: ClipSource,
    #[arg(long, default_value_t = 8)]
    trigger_n: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Per-row output CSV.
    #[arg(long)]
    out: PathBuf,
    /// Aggregate CSV; defaults to <out stem>_agg.csv.
    #[arg(long)]
    out_agg: Option<PathBuf>,
}

#[derive(Args)]
struct RunStreamArgs {
    /// Model file (float JSON or IRQ1).
    #[arg(long)]
    model: PathBuf,
    /// Stream dataset CSV.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 1)]
    threshold: u32,
    #[arg(long, default_value = "self")]
    clip_source: ClipSource,
    #[arg(long, default_value_t = 8)]
    trigger_n: usize,
    /// Cost model JSON overrides.
    #[arg(long)]
    cost: Option<PathBuf>,
    /// Trace CSV output path.
    #[arg(long)]
    out: PathBuf,
    /// Energy report JSON output path.
    #[arg(long)]
    report: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {what} from {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {what} from {}", path.display()))
}

fn load_model_any(path: &Path) -> Result<(u64, ModelKind)> {
    let bytes = fs::read(path).with_context(|| format!("reading model {}", path.display()))?;
    if bytes.len() >= 4 && &bytes[0..4] == QUANT_MAGIC {
        let (qm, seed) = ircascade::quant::parse_quant_model(&bytes, &path.display().to_string())?;
        Ok((seed, ModelKind::Quant(qm)))
    } else {
        let (model, seed) = load_float_model(path)?;
        Ok((seed, ModelKind::Float(model)))
    }
}

fn load_dataset(path: &Path) -> Result<FrameSeq> {
    load_csv(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let cfg: SynthConfig = match &args.config {
        Some(path) => read_json(path, "synthetic config")?,
        None => SynthConfig::default(),
    };
    if args.sessions.is_empty() {
        bail!("at least one session is required");
    }
    let mut frames = FrameSeq::new();
    for &session in &args.sessions {
        let stream = synth_stream(&cfg, args.seed.wrapping_add(session as u64))?;
        frames.extend(with_session(&stream, session)?);
    }
    write_csv(&args.out, &frames)?;
    println!("wrote {} frames to {}", frames.len(), args.out.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let hyper: Hyper = match &args.hyper {
        Some(path) => read_json(path, "hyperparameters")?,
        None => Hyper::default(),
    };
    let seeds = args.seeds.clone().unwrap_or_else(|| hyper.seeds.clone());
    if seeds.is_empty() {
        bail!("no training seeds given (use --seeds or the hyper file)");
    }
    let frames = load_dataset(&args.dataset)?;
    let (train_set, _) = split_by_session(&frames, args.train_session)?;
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    for &seed in &seeds {
        let outcome = train(&train_set, &hyper, seed)?;
        let path = args.out_dir.join(format!("model_seed{seed}.json"));
        save_float_model(&path, &outcome.model, seed)?;
        let best = outcome
            .history
            .iter()
            .find(|s| s.epoch == outcome.best_epoch)
            .map(|s| s.val_loss)
            .unwrap_or(outcome.init_val_loss);
        println!(
            "seed {seed}: {} epochs, best epoch {} (val loss {}), wrote {}",
            outcome.history.len(),
            outcome.best_epoch,
            fmt_sig(best),
            path.display()
        );
    }
    Ok(())
}

fn cmd_quantize(args: &QuantizeArgs) -> Result<()> {
    let (model, seed) = load_float_model(&args.model)?;
    let calib = load_dataset(&args.calib)?;
    let stats = calibrate(&model, &calib)?;
    let qm = quantize_model(&model, &stats)?;
    save_quant_model(&args.out, &qm, seed)?;
    println!(
        "quantized {} ({} payload bytes) to {}",
        args.model.display(),
        ircascade::quant::payload_bytes(&qm),
        args.out.display()
    );
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let models: Vec<(u64, ModelKind)> = args
        .models
        .iter()
        .map(|p| load_model_any(p))
        .collect::<Result<_>>()?;
    let test = load_dataset(&args.dataset)?;
    let thresholds: Vec<u32> = match &args.thresholds {
        Some(list) if list.is_empty() => bail!("no thresholds given"),
        Some(list) => list.clone(),
        None => (0..=ircascade::trigger::THRESHOLD_NEVER).collect(),
    };
    let cost: CostModel = match &args.cost {
        Some(path) => read_json(path, "cost model")?,
        None => CostModel::default(),
    };
    let cfg = SweepConfig {
        trigger_window: args.trigger_n,
        strict: false,
        clip_source: args.clip_source,
        refresh: ClipRefresh::Online,
        workers: args.workers,
    };
    let report = sweep(&models, &test, &thresholds, &args.variants, &cost, &cfg)?;
    write_rows_csv(&report, &args.out)?;
    let agg_path = args
        .out_agg
        .clone()
        .unwrap_or_else(|| derived_agg_path(&args.out));
    write_agg_csv(&report, &agg_path)?;
    println!(
        "wrote {} rows to {} and {} aggregates to {}",
        report.rows.len(),
        args.out.display(),
        report.aggregates.len(),
        agg_path.display()
    );
    Ok(())
}

fn derived_agg_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sweep".to_string());
    let mut name = format!("{stem}_agg");
    if let Some(ext) = out.extension() {
        name.push('.');
        name.push_str(&ext.to_string_lossy());
    }
    out.with_file_name(name)
}

fn cmd_run_stream(args: &RunStreamArgs) -> Result<()> {
    let (_, model) = load_model_any(&args.model)?;
    let frames = load_dataset(&args.dataset)?;
    let cost: CostModel = match &args.cost {
        Some(path) => read_json(path, "cost model")?,
        None => CostModel::default(),
    };
    let cfg = CascadeConfig {
        trigger: TriggerConfig::new(args.trigger_n, args.threshold)?,
        clip_source: args.clip_source,
        refresh: ClipRefresh::Online,
        model,
    };
    let trace = run(&frames, &cfg)?;
    trace.write_csv(&args.out)?;
    let report = estimate(&trace, &cost)?;
    let rounded = ircascade::energy::EnergyReport {
        invocation_rate: round_sig(report.invocation_rate),
        avg_energy: round_sig(report.avg_energy),
        avg_latency: round_sig(report.avg_latency),
        savings_vs_static: round_sig(report.savings_vs_static),
    };
    let json = serde_json::to_string_pretty(&rounded).expect("report serializes");
    fs::write(&args.report, json)
        .with_context(|| format!("writing report {}", args.report.display()))?;
    println!(
        "trace: {} frames, invocation rate {}, avg energy {} uJ, savings {}",
        trace.len(),
        fmt_sig(report.invocation_rate),
        fmt_sig(report.avg_energy),
        fmt_sig(report.savings_vs_static)
    );
    Ok(())
}

/// Round to 6 significant digits for stable file output.
fn round_sig(x: f64) -> f64 {
    fmt_sig(x).parse().unwrap_or(x)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Quantize(args) => cmd_quantize(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::RunStream(args) => cmd_run_stream(args),
    }
}
