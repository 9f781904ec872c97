//! Command-line entry point binding the pipeline together: dataset
//! generation, window statistics, three-phase training, evaluation, and
//! memory diagnostics.
//!
//! Machine-readable JSON goes to stdout, human logs to stderr. Exit codes:
//! 0 ok, 1 usage, 2 i/o, 3 missing state/prerequisite, 4 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};

use spotfast_core::config::{config_key_docs, ConfigFile, Preset};
use spotfast_core::data::{
    generate_synthetic_dataset, LrwDataset, Split, SyntheticSpec,
};
use spotfast_core::error::Error;
use spotfast_core::model::{SpotFastModel, Topology};
use spotfast_core::train::{evaluate, prepare_eval_batch, run_phase, TrainOptions};
use spotfast_core::windowing::{boundary_stats, candidate_windows, BoundaryStats};

#[derive(Parser)]
#[command(
    name = "spotfast",
    about = "Two-pathway lipreading model: data, training, evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic dataset in the word/split layout.
    GenData(GenDataArgs),
    /// Word-boundary statistics and candidate window sizes as JSON.
    WindowStats(WindowStatsArgs),
    /// Train one phase (1: front-end, 2: transformers and back-end with the
    /// front-end frozen, 3: end-to-end finetune).
    Train(TrainArgs),
    /// Top-1 accuracy of a checkpoint on one split.
    Eval(EvalArgs),
    /// Product-key memory usage histograms of a checkpoint.
    MemStats(MemStatsArgs),
    /// Reference of every config-file key with its paper-preset default.
    ConfigKeys,
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of word classes.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Train clips per class (val and test each get a fifth, rounded up).
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 29)]
    frames: usize,
    #[arg(long, default_value_t = 36)]
    height: usize,
    #[arg(long, default_value_t = 36)]
    width: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Destination root directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct WindowStatsArgs {
    /// Dataset root; boundary durations are read from the clips.
    #[arg(long, conflicts_with = "mean")]
    data: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    split: Split,
    /// Clip length the windows are clamped to.
    #[arg(long, default_value_t = 29)]
    clip_len: usize,
    /// Direct statistics instead of a dataset: mean duration in frames.
    #[arg(long, requires = "std")]
    mean: Option<f64>,
    /// Direct statistics: standard deviation in frames.
    #[arg(long, requires = "mean")]
    std: Option<f64>,
    /// Sample count to report alongside direct statistics.
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Scale preset when no config file is given.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// TOML config file (preset plus overrides); see `config-keys`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=3))]
    phase: u32,
    /// Dataset root in the word/split layout.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, metrics, and logs.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint to continue from (defaults to the previous phase's final
    /// checkpoint inside --out for phases 2 and 3).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the phase's epoch budget.
    #[arg(long)]
    epochs: Option<usize>,
    /// Log per-clip augmentation parameters as JSON lines.
    #[arg(long)]
    log_augment: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct MemStatsArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: Split,
    /// Clips to sample from the split.
    #[arg(long, default_value_t = 32)]
    limit: usize,
    /// Write the full histograms here; stdout carries a summary.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) | Error::Config(_) | Error::Shape(_) => 1,
        Error::Io { .. } | Error::Format { .. } => 2,
        Error::Prerequisite(_) => 3,
        Error::Numeric(_) => 4,
    }
}

fn emit(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).unwrap());
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), Error> {
    let spec = SyntheticSpec {
        num_classes: args.classes,
        clips_per_class: args.per_class,
        frames: args.frames,
        height: args.height,
        width: args.width,
        channels: args.channels,
        seed: args.seed,
    };
    let (manifest, stats) = generate_synthetic_dataset(&spec, &args.out)?;
    let unchanged = stats.written == 0;
    if unchanged {
        eprintln!("unchanged: regeneration was byte-identical");
    }
    emit(serde_json::json!({
        "root": manifest.root,
        "split": manifest.split,
        "num_classes": manifest.num_classes,
        "clip_count": manifest.clip_count,
        "class_names": manifest.class_names,
        "files_written": stats.written,
        "files_unchanged": stats.unchanged,
        "unchanged": unchanged,
    }));
    Ok(())
}

fn cmd_window_stats(args: WindowStatsArgs) -> Result<(), Error> {
    let stats = match (args.mean, args.std, &args.data) {
        (Some(mean), Some(std), _) => BoundaryStats {
            mean,
            std,
            count: args.count,
        },
        (_, _, Some(root)) => {
            let dataset = LrwDataset::open(root, args.split, None)?;
            let durations = dataset.boundary_durations()?;
            if durations.is_empty() {
                return Err(Error::Prerequisite(format!(
                    "no boundary metadata in {} split {}",
                    root.display(),
                    args.split
                )));
            }
            boundary_stats(&durations)?
        }
        _ => {
            return Err(Error::InvalidArgument(
                "window-stats needs either --data or --mean/--std".into(),
            ))
        }
    };
    let windows = candidate_windows(&stats, args.clip_len);
    emit(serde_json::json!({
        "mean": stats.mean,
        "std": stats.std,
        "count": stats.count,
        "windows": windows,
    }));
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let config_file = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            ConfigFile::parse(&text)?
        }
        None => ConfigFile::default_for(args.preset.parse::<Preset>()?),
    };
    let (model_cfg, plans) = config_file.build()?;
    let plan = plans[(args.phase - 1) as usize].clone();

    let mut model = match args.phase {
        1 => SpotFastModel::new(&model_cfg, Topology::SpotFastOnly, args.seed)?,
        phase => {
            let prev = args
                .resume
                .clone()
                .unwrap_or_else(|| args.out.join(format!("phase{}_final.sfckpt", phase - 1)));
            if !prev.exists() {
                return Err(Error::Prerequisite(format!(
                    "phase {phase} needs the phase-{} checkpoint at {}; train that phase first or pass --resume",
                    phase - 1,
                    prev.display()
                )));
            }
            let mut model = SpotFastModel::new(&model_cfg, Topology::WithTransformers, args.seed)?;
            let report = model.load_values(&prev)?;
            eprintln!(
                "restored {} tensors from {} ({} fresh)",
                report.loaded.len(),
                prev.display(),
                report.fresh.len()
            );
            model
        }
    };

    let opts = TrainOptions {
        data_root: args.data.clone(),
        out_dir: args.out.clone(),
        seed: args.seed,
        log_augment: args.log_augment,
        epochs_override: args.epochs,
    };
    let outcome = run_phase(&mut model, &plan, &opts)?;
    let last = outcome.metrics.last();
    emit(serde_json::json!({
        "phase": plan.phase_id,
        "steps": outcome.metrics.len(),
        "steps_per_epoch": outcome.steps_per_epoch,
        "final_loss": last.map(|m| m.loss),
        "final_batch_acc": last.map(|m| m.acc),
        "val_acc_history": outcome.val_acc_history,
        "val_loss_history": outcome.val_loss_history,
        "checkpoint": outcome.final_checkpoint,
        "metrics": outcome.metrics_path,
    }));
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let (mut model, meta) = SpotFastModel::from_checkpoint(&args.ckpt)?;
    let accuracy = evaluate(&mut model, &args.data, args.split)?;
    emit(serde_json::json!({
        "checkpoint": args.ckpt,
        "phase": meta.phase,
        "split": args.split,
        "accuracy": accuracy,
    }));
    Ok(())
}

fn cmd_mem_stats(args: MemStatsArgs) -> Result<(), Error> {
    let (mut model, _) = SpotFastModel::from_checkpoint(&args.ckpt)?;
    let dataset = LrwDataset::open(&args.data, args.split, Some(model.cfg.data.frames))?;
    let (clips, _) = dataset.load_all()?;
    if clips.is_empty() {
        return Err(Error::Prerequisite("split has no clips".into()));
    }
    let take = args.limit.min(clips.len());
    let refs: Vec<_> = clips.iter().take(take).collect();
    let batch = prepare_eval_batch(&refs, &model.cfg.data.clone(), model.cfg.backbone.window_size)?;
    let (spot_hist, fast_hist) = model.memory_usage(&batch.window, &batch.full)?;
    let summarize = |hist: &[u64]| {
        let total: u64 = hist.iter().sum();
        let nonzero = hist.iter().filter(|&&c| c > 0).count();
        serde_json::json!({
            "value_rows": hist.len(),
            "selections": total,
            "rows_touched": nonzero,
        })
    };
    if let Some(out) = &args.out {
        let full = serde_json::json!({"spot": spot_hist, "fast": fast_hist});
        std::fs::write(out, serde_json::to_string(&full).unwrap())
            .map_err(|e| Error::io(out, e))?;
    }
    emit(serde_json::json!({
        "clips": take,
        "spot": summarize(&spot_hist),
        "fast": summarize(&fast_hist),
        "histograms": args.out,
    }));
    Ok(())
}

fn cmd_config_keys() {
    let docs = config_key_docs();
    let rows: Vec<serde_json::Value> = docs
        .iter()
        .map(|d| {
            serde_json::json!({
                "key": d.key,
                "paper_default": d.paper_default,
                "doc": d.doc,
            })
        })
        .collect();
    emit(serde_json::json!({ "config_keys": rows }));
}

fn config_keys_help() -> &'static str {
    let mut text = String::from("Config-file keys (paper-preset defaults):\n");
    for d in config_key_docs() {
        text.push_str(&format!("  {:<24} {:<28} {}\n", d.key, d.paper_default, d.doc));
    }
    Box::leak(text.into_boxed_str())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    // enrich train --help with the config-key reference
                    if std::env::args().any(|a| a == "train") {
                        let mut cmd = Cli::command();
                        cmd = cmd.mut_subcommand("train", |c| c.after_long_help(config_keys_help()));
                        let _ = cmd
                            .find_subcommand_mut("train")
                            .unwrap()
                            .clone()
                            .print_long_help();
                        return ExitCode::SUCCESS;
                    }
                    let _ = e.print();
                    return ExitCode::SUCCESS;
                }
                _ => 1u8,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::WindowStats(args) => cmd_window_stats(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::MemStats(args) => cmd_mem_stats(args),
        Command::ConfigKeys => {
            cmd_config_keys();
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
