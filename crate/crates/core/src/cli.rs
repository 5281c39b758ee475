//! Command-line surface: synthetic data, training, evaluation, quantization,
//! sweeps and checkpoint inspection.
//!
//! Every command is a plain function so the pipeline can be driven in-process
//! as well as from the `lacos` binary.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointKind, DType};
use crate::data::{filter_entailment, load_records, synth_corpus, write_jsonl, Format, NliRecord, Pair, StsRecord};
use crate::error::{Error, Result};
use crate::eval::{standardize_losses, sts_eval, with_thread_pool, EvalReport};
use crate::lora::trainable_fraction;
use crate::quant::QuantConfig;
use crate::train::{train, RunConfig, TrainSummary};

/// Parameter-efficient contrastive fine-tuning of small sentence encoders.
#[derive(Debug, Parser)]
#[command(name = "lacos", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic paraphrase corpus (train.jsonl) and STS set (sts.jsonl).
    Synth(SynthArgs),
    /// Train LoRA adapters with the multiple-negatives-ranking objective.
    Train(TrainArgs),
    /// Spearman evaluation of a checkpoint on an STS file.
    Eval(EvalArgs),
    /// Store every frozen weight of a checkpoint as blockwise int8.
    Quantize(QuantizeArgs),
    /// Grid search over adapter rank, batch size and learning rate.
    Sweep(SweepArgs),
    /// Print a checkpoint's tensor manifest and statistics.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub train_pairs: usize,
    #[arg(long, default_value_t = 400)]
    pub eval_pairs: usize,
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// JSON run config.
    #[arg(long)]
    pub config: PathBuf,
    /// NLI file (.jsonl or .tsv); overrides `train_data` in the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct QuantizeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub block_size: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8, 16])]
    pub r: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [32usize, 64])]
    pub batch: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1e-4, 2e-5, 5e-5])]
    pub lr: Vec<f64>,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => {
            let cfg = resolve_train_config(&a)?;
            println!("{}", cfg.to_json());
            train_resolved(&cfg).map(|_| ())
        }
        Command::Eval(a) => {
            let report = cmd_eval(&a)?;
            println!("{}", report_line(&report));
            Ok(())
        }
        Command::Quantize(a) => {
            let ratio = cmd_quantize(&a)?;
            println!("frozen size ratio (q8 / f32): {ratio:.4}");
            Ok(())
        }
        Command::Sweep(a) => {
            let report = cmd_sweep(&a)?;
            if let Some(best) = &report.best {
                println!(
                    "best run {}: r={} batch={} lr={} validation_loss={:.6}",
                    best.index, best.r, best.batch_size, best.lr, best.validation_loss
                );
            }
            Ok(())
        }
        Command::Inspect(a) => {
            print!("{}", cmd_inspect(&a)?);
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let (train, sts) = synth_corpus(args.seed, args.train_pairs, args.eval_pairs, args.vocab)?;
    create_dir(&args.out)?;
    write_jsonl(&args.out.join("train.jsonl"), &train)?;
    write_jsonl(&args.out.join("sts.jsonl"), &sts)?;
    info!("wrote {} train and {} eval pairs to {}", train.len(), sts.len(), args.out.display());
    Ok(())
}

/// Reads and validates a run config; unreadable files are config errors.
pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    RunConfig::from_json(&text)
}

/// Loads NLI records and keeps the entailment pairs.
pub fn read_pairs(path: &Path) -> Result<Vec<Pair>> {
    let records: Vec<NliRecord> = load_records(path, Format::from_path(path)).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", path.display())),
        other => other,
    })?;
    let pairs = filter_entailment(&records);
    info!("{} of {} records are entailment pairs", pairs.len(), records.len());
    Ok(pairs)
}

fn load_checkpoint(path: &Path) -> Result<checkpoint::Checkpoint<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    checkpoint::from_bytes(&bytes)
}

fn resolve(cfg: &RunConfig, data: Option<&PathBuf>, out: Option<&PathBuf>) -> Result<RunConfig> {
    let mut cfg = cfg.clone();
    if let Some(d) = data {
        cfg.train_data = Some(d.clone());
    }
    if let Some(o) = out {
        cfg.output_dir = Some(o.clone());
    }
    if cfg.train_data.is_none() {
        return Err(Error::Config("no training data: pass --data or set train_data".into()));
    }
    if cfg.output_dir.is_none() {
        return Err(Error::Config("no output directory: pass --out or set output_dir".into()));
    }
    Ok(cfg)
}

/// Runs a fully resolved config: writes `config.json`, `metrics.jsonl`,
/// `adapter.lacs` and `summary.json` into its output directory.
pub fn run_training(cfg: &RunConfig, pairs: &[Pair]) -> Result<TrainSummary> {
    let out = cfg.output_dir.as_deref().expect("resolved config");
    create_dir(out)?;
    fs::write(out.join("config.json"), cfg.to_json() + "\n")?;
    let mut metrics = BufWriter::new(fs::File::create(out.join("metrics.jsonl"))?);
    let outcome = train::<f32>(cfg, pairs, |m| {
        serde_json::to_writer(&mut metrics, m)?;
        metrics.write_all(b"\n")?;
        Ok(())
    })?;
    metrics.flush()?;
    checkpoint::save(
        &out.join("adapter.lacs"),
        &outcome.model,
        &outcome.vocab,
        CheckpointKind::Adapter,
        Some(&outcome.optimizer),
    )?;
    let s = &outcome.summary;
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(s)? + "\n")?;
    info!(
        "{} steps, loss {:.4} -> {:.4}, trainable fraction {:.5}",
        s.steps, s.initial_loss, s.final_loss, s.trainable_fraction
    );
    Ok(outcome.summary)
}

/// The config file with the command-line paths applied.
pub fn resolve_train_config(args: &TrainArgs) -> Result<RunConfig> {
    resolve(&read_config(&args.config)?, args.data.as_ref(), args.out.as_ref())
}

fn train_resolved(cfg: &RunConfig) -> Result<TrainSummary> {
    let pairs = read_pairs(cfg.train_data.as_deref().expect("resolved"))?;
    run_training(cfg, &pairs)
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    train_resolved(&resolve_train_config(args)?)
}

pub fn report_line(r: &EvalReport) -> String {
    let fmt = |x: Option<f64>| x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    format!(
        "n={} max_rho={} cosine={} manhattan={} euclidean={} dot={}",
        r.n,
        fmt(r.max),
        fmt(r.spearman.cosine),
        fmt(r.spearman.manhattan),
        fmt(r.spearman.euclidean),
        fmt(r.spearman.dot)
    )
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let ckpt = load_checkpoint(&args.model)?;
    let records: Vec<StsRecord> = load_records(&args.data, Format::from_path(&args.data)).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", args.data.display())),
        other => other,
    })?;
    let report = sts_eval(&ckpt.model, &ckpt.vocab, &records)?;
    if !report.degenerate.is_empty() {
        warn!("undefined correlation for: {}", report.degenerate.join(", "));
    }
    if let Some(parent) = args.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(&args.report, serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

/// Writes a full checkpoint with every frozen weight quantized and returns
/// the frozen-weight size ratio against dense `f32`.
pub fn cmd_quantize(args: &QuantizeArgs) -> Result<f64> {
    let qcfg = QuantConfig::symmetric(args.block_size)?;
    let mut ckpt = load_checkpoint(&args.input)?;
    if ckpt.model.is_quantized() {
        warn!("{} is already quantized; writing it unchanged", args.input.display());
        fs::copy(&args.input, &args.out)?;
    } else {
        ckpt.model.quantize_base(qcfg)?;
        checkpoint::save(&args.out, &ckpt.model, &ckpt.vocab, CheckpointKind::Full, None)?;
    }
    let (stored, dense) = checkpoint::frozen_footprint(&ckpt.model);
    let ratio = stored as f64 / dense as f64;
    if ratio > 1.0 {
        warn!("block size {} inflates the frozen weights (ratio {ratio:.3})", args.block_size);
    }
    Ok(ratio)
}

/// One grid point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub index: usize,
    pub r: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub validation_loss: Option<f64>,
    /// Min-max standardized validation loss among the successful runs.
    pub standardized: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepBest {
    pub index: usize,
    pub r: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub runs: Vec<SweepRun>,
    /// Lowest raw validation loss; ties go to the earliest grid position.
    pub best: Option<SweepBest>,
    /// Why standardized values are absent, if they are.
    pub standardization_note: Option<String>,
}

/// Grid in enumeration order: r, then batch size, then learning rate.
pub fn sweep_grid(r: &[usize], batch: &[usize], lr: &[f64]) -> Vec<(usize, usize, f64)> {
    let mut grid = Vec::with_capacity(r.len() * batch.len() * lr.len());
    for &ri in r {
        for &b in batch {
            for &l in lr {
                grid.push((ri, b, l));
            }
        }
    }
    grid
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<SweepReport> {
    if args.r.is_empty() || args.batch.is_empty() || args.lr.is_empty() {
        return Err(Error::Config("sweep grids must be non-empty".into()));
    }
    let base = resolve(&read_config(&args.config)?, args.data.as_ref(), Some(&args.out))?;
    if base.validation_fraction == 0.0 {
        return Err(Error::Config("sweeps rank runs by validation loss; validation_fraction must be > 0".into()));
    }
    let pairs = read_pairs(base.train_data.as_deref().expect("resolved"))?;
    let grid = sweep_grid(&args.r, &args.batch, &args.lr);
    info!("sweeping {} configurations", grid.len());

    let configs: Vec<RunConfig> = grid
        .iter()
        .enumerate()
        .map(|(i, &(r, b, lr))| {
            let mut cfg = base.clone();
            cfg.encoder.lora_rank = r;
            cfg.batch_size = b;
            cfg.adam.lr = lr;
            cfg.output_dir = Some(args.out.join("runs").join(i.to_string()));
            cfg
        })
        .collect();
    let results: Vec<Result<TrainSummary>> =
        with_thread_pool(|| configs.par_iter().map(|cfg| run_training(cfg, &pairs)).collect());

    let mut runs: Vec<SweepRun> = grid
        .iter()
        .zip(&results)
        .enumerate()
        .map(|(index, (&(r, batch_size, lr), res))| {
            let (validation_loss, error) = match res {
                Ok(s) => (s.validation_loss, None),
                Err(e) => (None, Some(e.to_string())),
            };
            SweepRun {
                index,
                r,
                batch_size,
                lr,
                validation_loss,
                standardized: None,
                error,
            }
        })
        .collect();
    for run in &runs {
        if let Some(e) = &run.error {
            warn!("run {} failed: {e}", run.index);
        }
    }
    if runs.iter().all(|r| r.validation_loss.is_none()) {
        return Err(results
            .into_iter()
            .find_map(|r| r.err())
            .unwrap_or_else(|| Error::Data("no sweep run produced a validation loss".into())));
    }

    let ok: Vec<usize> = runs.iter().filter(|r| r.validation_loss.is_some()).map(|r| r.index).collect();
    let losses: Vec<f64> = ok.iter().map(|&i| runs[i].validation_loss.expect("filtered")).collect();
    let standardization_note = match standardize_losses(&losses) {
        Ok(z) => {
            for (&i, zi) in ok.iter().zip(z) {
                runs[i].standardized = Some(zi);
            }
            None
        }
        Err(e) => Some(e.to_string()),
    };
    let best = ok
        .iter()
        .copied()
        .min_by(|&a, &b| {
            let (la, lb) = (runs[a].validation_loss.expect("ok"), runs[b].validation_loss.expect("ok"));
            la.total_cmp(&lb).then(a.cmp(&b))
        })
        .map(|i| {
            let r = &runs[i];
            SweepBest {
                index: i,
                r: r.r,
                batch_size: r.batch_size,
                lr: r.lr,
                validation_loss: r.validation_loss.expect("ok"),
            }
        });
    let report = SweepReport {
        runs,
        best,
        standardization_note,
    };
    fs::write(
        args.out.join("sweep_report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    Ok(report)
}

/// Human-readable manifest, trainable fraction and quantization statistics.
pub fn cmd_inspect(args: &InspectArgs) -> Result<String> {
    let bytes = fs::read(&args.model).map_err(|e| Error::Checkpoint(format!("{}: {e}", args.model.display())))?;
    let (header, _) = checkpoint::parse_header(&bytes)?;
    let ckpt = checkpoint::from_bytes::<f32>(&bytes)?;
    let mut out = String::new();
    let kind = match header.kind {
        CheckpointKind::Full => "full",
        CheckpointKind::Adapter => "adapter",
    };
    out += &format!("kind: {kind}\n");
    out += &format!("vocab: {} tokens\n", header.vocab.len());
    out += &format!("tensors: {}\n", header.tensors.len());
    let (mut q8_count, mut q8_bytes, mut q8_elems) = (0usize, 0u64, 0usize);
    for (name, e) in &header.tensors {
        let dtype = match e.dtype {
            DType::F32 => "f32",
            DType::Q8 => "q8",
        };
        out += &format!("  {name:<32} {dtype:<3} {:>5} x {:<5} {:>9} bytes\n", e.shape[0], e.shape[1], e.length);
        if e.dtype == DType::Q8 && !name.starts_with("opt.") {
            q8_count += 1;
            q8_bytes += e.length;
            q8_elems += e.shape[0] * e.shape[1];
        }
    }
    out += &format!("trainable fraction: {:.6}\n", trainable_fraction(&ckpt.model));
    match header.base_quantization {
        Some(q) => {
            out += &format!(
                "base quantization: block size {}, {q8_count} q8 tensors, {q8_bytes} bytes ({:.4} of f32)\n",
                q.block_size,
                q8_bytes as f64 / (4 * q8_elems.max(1)) as f64
            );
        }
        None => out += "base quantization: none\n",
    }
    if let Some(opt) = &ckpt.optimizer {
        out += &format!("optimizer state: step {}, {} bytes\n", opt.t, opt.storage_bytes());
    }
    Ok(out)
}
