//! Command-line front end. `run` returns the process exit code:
//! 0 success, 1 usage, 2 configuration, 3 runtime.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{channel_major, load_csv, synth_generate, PreparedData, SeriesTable};
use crate::error::{Error, Result};
use crate::eval::{
    load_dataset, naive_baselines, run_ablation, run_benchmark, run_supervised, run_sweep,
    test_metrics, SweepAxis,
};
use crate::model::{HeadKind, Model};
use crate::patching::PatchMode;
use crate::tensor::Tensor;
use crate::training::{
    derive_seed, evaluate_reconstruction, finetune_lp_then_ft, linear_probe, pretrain, transfer,
    TrainConfig, TrainReport, TransferMode,
};

#[derive(Debug, Parser)]
#[command(name = "patchtst", version, about = "Patch Transformer forecaster")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config's `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` config overrides.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Probe,
    LpThenFt,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the configured synthetic series as CSV.
    Synth,
    /// Supervised training.
    Train,
    /// Masked-patch pretraining (non-overlapping patches).
    Pretrain,
    /// Linear probe on a pretrained trunk.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Linear probe followed by end-to-end fine-tuning.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Move a pretrained trunk to the configured dataset.
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "probe")]
        mode: ModeArg,
    },
    /// Score a checkpoint on the test split, or run the horizon benchmark
    /// when no checkpoint is given.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Report metrics on the original data scale.
        #[arg(long)]
        raw_scale: bool,
    },
    /// Forecast the horizon after the last look-back window of a CSV.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// One supervised run per value of an axis.
    Sweep {
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Patching / channel-independence ablation.
    Ablate {
        #[arg(long, default_value = "variant")]
        axis: String,
    },
    /// Attention maps averaged over layers and heads for the last window.
    ExportAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
}

/// Parses `args` (program name first), runs the command, reports errors on
/// stderr and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &g.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    Ok(path)
}

fn save_run(cfg: &RunConfig, stem: &str, ckpt: &Checkpoint, report: &TrainReport) -> Result<()> {
    write(&cfg.out, "config.cfg", cfg.to_text())?;
    ckpt.save(&cfg.out.join(format!("{stem}.ckpt")))?;
    write(&cfg.out, &format!("{stem}_report.csv"), report.to_csv())?;
    write(
        &cfg.out,
        &format!("{stem}_timing.csv"),
        format!("stage,seconds\n{stem},{:.3}\n", report.wall_clock_seconds),
    )?;
    if let Some(m) = report.test {
        println!("test mse {:.6} mae {:.6}", m.mse, m.mae);
    }
    println!("wrote {}", cfg.out.display());
    Ok(())
}

fn prepare(cfg: &RunConfig, table: &SeriesTable) -> Result<PreparedData> {
    PreparedData::new(table, cfg.lookback, cfg.horizon, &cfg.prepare_options())
}

fn pretrain_config(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.patch_mode = PatchMode::NonOverlap;
    c.stride = c.patch_len;
    c
}

/// Last `L` steps of a CSV, mapped through the checkpoint's standardizer,
/// as `[1, M, L]`.
fn last_window(ckpt: &Checkpoint, input: &Path) -> Result<(SeriesTable, Tensor)> {
    let table = load_csv(input)?;
    let l = ckpt.model.config.lookback;
    if table.timesteps() < l {
        return Err(Error::data(format!(
            "{} has {} rows, the model needs a look-back of {l}",
            input.display(),
            table.timesteps()
        )));
    }
    let scaled = match &ckpt.scaler {
        Some(s) => s.apply(&table)?,
        None => table.clone(),
    };
    let m = table.channels();
    let x = channel_major(&scaled, table.timesteps() - l, l);
    Ok((table, Tensor::new(vec![1, m, l], x)?))
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.global)?;
    match cli.command {
        Command::Synth => {
            let table = synth_generate(&cfg.synth_spec())?;
            std::fs::create_dir_all(&cfg.out)?;
            let path = cfg.out.join("synthetic.csv");
            table.write_csv(&path)?;
            println!("wrote {}", path.display());
        }
        Command::Train => {
            let table = load_dataset(&cfg)?;
            let outcome = run_supervised(&cfg, &table)?;
            let ckpt = Checkpoint::new(outcome.model, outcome.data.scaler.clone());
            save_run(&cfg, "model", &ckpt, &outcome.report)?;
        }
        Command::Pretrain => {
            let pcfg = pretrain_config(&cfg);
            let table = load_dataset(&pcfg)?;
            let data = prepare(&pcfg, &table)?;
            let mcfg = pcfg.model_config(data.channels(), HeadKind::Reconstruct);
            let model = Model::new(mcfg, derive_seed(pcfg.seed, "init"))?;
            let tcfg = TrainConfig::from_run(&pcfg);
            let (model, report) = pretrain(model, &data, &tcfg)?;
            if !data.test.is_empty() {
                let scores = evaluate_reconstruction(&model, &data, &data.test, &tcfg)?;
                write(
                    &pcfg.out,
                    "reconstruction.csv",
                    format!(
                        "method,mse,mae\nmodel,{:.6},{:.6}\nmean_imputation,{:.6},{:.6}\n",
                        scores.model.mse,
                        scores.model.mae,
                        scores.mean_imputation.mse,
                        scores.mean_imputation.mae
                    ),
                )?;
            }
            save_run(&pcfg, "pretrained", &Checkpoint::new(model, data.scaler.clone()), &report)?;
        }
        Command::Probe { checkpoint } => {
            let src = Checkpoint::load(&checkpoint)?;
            let table = load_dataset(&cfg)?;
            let data = prepare(&cfg, &table)?;
            let (model, report) = linear_probe(&src.model, &data, &TrainConfig::from_run(&cfg))?;
            save_run(&cfg, "probe", &Checkpoint::new(model, data.scaler.clone()), &report)?;
        }
        Command::Finetune { checkpoint } => {
            let src = Checkpoint::load(&checkpoint)?;
            let table = load_dataset(&cfg)?;
            let data = prepare(&cfg, &table)?;
            let (model, report) = finetune_lp_then_ft(&src.model, &data, &TrainConfig::from_run(&cfg))?;
            save_run(&cfg, "finetune", &Checkpoint::new(model, data.scaler.clone()), &report)?;
        }
        Command::Transfer { checkpoint, mode } => {
            let src = Checkpoint::load(&checkpoint)?;
            let table = load_dataset(&cfg)?;
            let data = prepare(&cfg, &table)?;
            let target = cfg.model_config(data.channels(), HeadKind::Forecast);
            let mode = match mode {
                ModeArg::Probe => TransferMode::Probe,
                ModeArg::LpThenFt => TransferMode::LpThenFt,
            };
            let (model, report) = transfer(&src.model, &target, &data, &TrainConfig::from_run(&cfg), mode)?;
            save_run(&cfg, "transfer", &Checkpoint::new(model, data.scaler.clone()), &report)?;
        }
        Command::Eval { checkpoint, raw_scale } => match checkpoint {
            Some(path) => {
                let ckpt = Checkpoint::load(&path)?;
                let mc = &ckpt.model.config;
                let mut ecfg = cfg.clone();
                ecfg.lookback = mc.lookback;
                ecfg.horizon = mc.horizon;
                let table = load_dataset(&ecfg)?;
                let data = prepare(&ecfg, &table)?;
                let m = test_metrics(&ckpt.model, &data, raw_scale)?;
                let b = naive_baselines(&data)?;
                let scale = if raw_scale { "raw" } else { "standardized" };
                let mut csv = String::from("method,scale,mse,mae\n");
                let _ = writeln!(csv, "model,{scale},{:.6},{:.6}", m.mse, m.mae);
                let _ = writeln!(
                    csv,
                    "repeat_last,standardized,{:.6},{:.6}\nols,standardized,{:.6},{:.6}",
                    b.repeat_last.mse, b.repeat_last.mae, b.ols.mse, b.ols.mae
                );
                let path = write(&cfg.out, "eval.csv", &csv)?;
                print!("{csv}");
                println!("wrote {}", path.display());
            }
            None => {
                let csv = run_benchmark(&cfg)?;
                let path = write(&cfg.out, "benchmark.csv", &csv)?;
                print!("{csv}");
                println!("wrote {}", path.display());
            }
        },
        Command::Predict { checkpoint, input } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let (table, x) = last_window(&ckpt, &input)?;
            let mut pred = ckpt.model.predict(&x)?.into_data();
            let t = ckpt.model.config.horizon;
            if let Some(s) = &ckpt.scaler {
                s.invert_channel_major(&mut pred, t);
            }
            let mut csv = String::from("channel,step,value\n");
            for (c, row) in pred.chunks(t).enumerate() {
                for (k, v) in row.iter().enumerate() {
                    let _ = writeln!(csv, "{},{},{v}", table.channel_names[c], k + 1);
                }
            }
            let path = write(&cfg.out, "predictions.csv", csv)?;
            println!("wrote {}", path.display());
        }
        Command::Sweep { axis, values } => {
            let axis = SweepAxis::parse(&axis)?;
            let out = run_sweep(&cfg, axis, &values)?;
            let stem = format!("sweep_{}", axis.name());
            write(&cfg.out, &format!("{stem}.csv"), &out.results)?;
            write(&cfg.out, &format!("{stem}_timing.csv"), &out.timing)?;
            if let Some(summary) = &out.summary {
                write(&cfg.out, &format!("{stem}_summary.csv"), summary)?;
            }
            print!("{}", out.results);
        }
        Command::Ablate { axis } => {
            if axis != "variant" {
                return Err(Error::config(format!("unknown ablation axis `{axis}` (variant)")));
            }
            let csv = run_ablation(&cfg)?;
            write(&cfg.out, "ablation.csv", &csv)?;
            print!("{csv}");
        }
        Command::ExportAttn { checkpoint, input } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let (table, x) = last_window(&ckpt, &input)?;
            let maps = ckpt.model.export_attention(&x)?;
            let mut csv = String::from("channel,query,key,weight\n");
            for (c, map) in maps.iter().enumerate() {
                let n = map.shape()[0];
                for q in 0..n {
                    for k in 0..n {
                        let _ = writeln!(csv, "{},{q},{k},{}", table.channel_names[c], map.at(&[q, k]));
                    }
                }
            }
            let path = write(&cfg.out, "attention.csv", csv)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
