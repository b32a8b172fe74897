//! Command-line front end of the `wsnn` binary.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use wsnn_core::data::NUM_CLASSES;
use wsnn_core::nn::Sequential;
use wsnn_core::tensor::Element;

use crate::bench::gradcheck_suite;
use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, Precision, KEYS};
use crate::datasets::{dataset_save, load_splits};
use crate::error::{HarnessError, Result};
use crate::eval::{accuracy, ensemble_predict, evaluate, EnsembleMode, PriorCorrection};
use crate::models::build_model;
use crate::saliency::{saliency, write_pgm};
use crate::train::{checkpoint_normalization, run_train, RunFiles};

#[derive(Debug, Parser)]
#[command(
    name = "wsnn",
    version,
    about = "Train and evaluate weakly supervised digit classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config sources shared by every verb. Any config key can also be given as
/// `--key value`.
#[derive(Debug, Args)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the train/test splits and store them under `out`.
    GenData(Common),
    /// Train a model, writing metrics.csv, train.log and best.wsnn under `out`.
    Train(Common),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Combine several checkpoints by vote or by averaged scores.
    Ensemble {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, default_value = "vote")]
        mode: String,
        /// Reweight by uniform target priors over the training class frequencies.
        #[arg(long)]
        prior_correction: bool,
    },
    /// Write the input-gradient saliency map of one test image as a PGM.
    Saliency {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Class to explain (default: the predicted class).
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        pgm: PathBuf,
    },
    /// Finite-difference gradient checks of every component.
    BenchGradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

/// Rewrites `--key value` and `--key=value` for config keys into
/// `--set key=value`, so config keys need not be declared to clap one by one.
/// Dashes in flag names map to underscores.
pub fn rewrite_config_flags(args: Vec<OsString>) -> Vec<OsString> {
    let mut out = Vec::with_capacity(args.len());
    let mut it = args.into_iter().peekable();
    while let Some(a) = it.next() {
        let Some(flag) = a.to_str().and_then(|s| s.strip_prefix("--")) else {
            out.push(a);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.replace('-', "_"), Some(v.to_string())),
            None => (flag.replace('-', "_"), None),
        };
        if !KEYS.contains(&name.as_str()) {
            out.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => Some(v),
            None => it.next_if(|_| true).map(|v| v.to_string_lossy().into_owned()),
        };
        match value {
            Some(v) => {
                out.push("--set".into());
                out.push(format!("{name}={v}").into());
            }
            None => out.push(a),
        }
    }
    out
}

fn resolve(common: &Common, base: Option<ExperimentConfig>) -> Result<ExperimentConfig> {
    let mut cfg = base.unwrap_or_default();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read config file {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn model_from_checkpoint<T: Element>(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<Sequential<T>> {
    let mut model_cfg = ck.config()?;
    // The evaluation split may differ, the architecture may not.
    model_cfg.set("dataset", &cfg.get("dataset").unwrap_or_default())?;
    model_cfg.canvas = cfg.canvas;
    model_cfg.pretrained.clear();
    model_cfg.reset_layers.clear();
    let mut m = build_model::<T>(&model_cfg)?;
    ck.restore(&mut m)?;
    Ok(m)
}

fn eval_typed<T: Element>(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<()> {
    let splits = load_splits(cfg)?;
    let mut m = model_from_checkpoint::<T>(cfg, ck)?;
    let ev = evaluate(
        &mut m,
        &splits.test,
        cfg.eval_batch,
        cfg.loss,
        checkpoint_normalization(ck).as_ref(),
    )?;
    println!("epoch,test_loss,top1,top5,mean_ap");
    println!(
        "{},{:.6},{:.2},{:.2},{:.2}",
        ck.epoch, ev.loss, ev.top1, ev.top5, ev.mean_ap
    );
    Ok(())
}

fn ensemble_typed<T: Element>(
    cfg: &ExperimentConfig,
    cks: &[Checkpoint],
    mode: EnsembleMode,
    prior_correction: bool,
) -> Result<()> {
    let splits = load_splits(cfg)?;
    let mut scores = Vec::new();
    for (i, ck) in cks.iter().enumerate() {
        let mut m = model_from_checkpoint::<T>(cfg, ck)?;
        let ev = evaluate(
            &mut m,
            &splits.test,
            cfg.eval_batch,
            cfg.loss,
            checkpoint_normalization(ck).as_ref(),
        )?;
        println!("member {i}: top1 {:.2}", ev.top1);
        scores.push(ev.scores);
    }
    let priors = prior_correction.then(|| PriorCorrection {
        train: PriorCorrection::frequencies(splits.train.labels(), NUM_CLASSES),
        target: vec![1.0 / NUM_CLASSES as f64; NUM_CLASSES],
    });
    let pred = ensemble_predict(&scores, mode, priors.as_ref())?;
    let labels: Vec<usize> = (0..splits.test.len()).map(|i| splits.test.label(i)).collect();
    println!("ensemble: top1 {:.2}", accuracy(&pred, &labels));
    Ok(())
}

fn saliency_typed<T: Element>(
    cfg: &ExperimentConfig,
    ck: &Checkpoint,
    index: usize,
    class: Option<usize>,
    pgm: &Path,
) -> Result<()> {
    let splits = load_splits(cfg)?;
    let mut m = model_from_checkpoint::<T>(cfg, ck)?;
    let (mut x, y) = splits.test.batch::<T>(&[index])?;
    if let Some(n) = checkpoint_normalization(ck) {
        x = n.normalize(&x);
    }
    let class = match class {
        Some(c) => c,
        None => {
            let ev = evaluate(&mut m, &splits.test.select(&[index])?, 1, cfg.loss, None)?;
            crate::eval::argmax(ev.scores.outer(0))
        }
    };
    let map = saliency(&mut m, &x, class)?;
    write_pgm(pgm, &map)?;
    println!("item {index} (label {}) class {class} -> {}", y[0], pgm.display());
    Ok(())
}

fn load_checkpoints(paths: &[PathBuf]) -> Result<Vec<Checkpoint>> {
    paths.iter().map(|p| Checkpoint::load(p)).collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = resolve(&common, None)?;
            let splits = load_splits(&cfg)?;
            std::fs::create_dir_all(&cfg.out).map_err(|e| HarnessError::io(&cfg.out, e))?;
            dataset_save(&splits.train, &cfg.out.join("train.wsnn"))?;
            dataset_save(&splits.test, &cfg.out.join("test.wsnn"))?;
            println!(
                "wrote {} train and {} test items to {}",
                splits.train.len(),
                splits.test.len(),
                cfg.out.display()
            );
        }
        Command::Train(common) => {
            let cfg = resolve(&common, None)?;
            let report = run_train(&cfg)?;
            let files = RunFiles::new(&cfg.out);
            println!(
                "best top1 {:.2} at epoch {} ({} epochs); metrics in {}",
                report.best_top1,
                report.best_epoch,
                report.rows.len(),
                files.metrics.display()
            );
        }
        Command::Eval { common, checkpoint } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = resolve(&common, Some(ck.config()?))?;
            match cfg.precision {
                Precision::F32 => eval_typed::<f32>(&cfg, &ck)?,
                Precision::F64 => eval_typed::<f64>(&cfg, &ck)?,
            }
        }
        Command::Ensemble {
            common,
            checkpoint,
            mode,
            prior_correction,
        } => {
            let mode: EnsembleMode = mode.parse()?;
            let cks = load_checkpoints(&checkpoint)?;
            let cfg = resolve(&common, Some(cks[0].config()?))?;
            match cfg.precision {
                Precision::F32 => ensemble_typed::<f32>(&cfg, &cks, mode, prior_correction)?,
                Precision::F64 => ensemble_typed::<f64>(&cfg, &cks, mode, prior_correction)?,
            }
        }
        Command::Saliency {
            common,
            checkpoint,
            index,
            class,
            pgm,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = resolve(&common, Some(ck.config()?))?;
            match cfg.precision {
                Precision::F32 => saliency_typed::<f32>(&cfg, &ck, index, class, &pgm)?,
                Precision::F64 => saliency_typed::<f64>(&cfg, &ck, index, class, &pgm)?,
            }
        }
        Command::BenchGradcheck { seeds } => {
            let cases = gradcheck_suite(seeds)?;
            let mut failed = 0;
            for c in &cases {
                let status = if c.passed() { "ok" } else { "FAIL" };
                println!(
                    "{status:>4}  seed {}  {:<36} {:.2e} (< {:.0e})",
                    c.seed, c.name, c.max_rel_err, c.tolerance
                );
                failed += usize::from(!c.passed());
            }
            if failed > 0 {
                return Err(HarnessError::NumericAbort {
                    epoch: 0,
                    batch: 0,
                    lr: 0.0,
                    detail: format!("{failed} gradient checks exceeded tolerance"),
                });
            }
        }
    }
    Ok(())
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn main_with(args: Vec<OsString>) -> i32 {
    let cli = match Cli::try_parse_from(rewrite_config_flags(args)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn config_flags_become_overrides() {
        let got = rewrite_config_flags(os(&[
            "wsnn",
            "train",
            "--model",
            "stn",
            "--stn-mode=6p",
            "--config",
            "a.cfg",
        ]));
        assert_eq!(
            got,
            os(&[
                "wsnn",
                "train",
                "--set",
                "model=stn",
                "--set",
                "stn_mode=6p",
                "--config",
                "a.cfg"
            ])
        );
    }

    #[test]
    fn unknown_flags_are_left_for_clap() {
        assert_eq!(main_with(os(&["wsnn", "train", "--colour", "red"])), 2);
        assert_eq!(main_with(os(&["wsnn", "train", "--batch-size", "0"])), 2);
        assert_eq!(main_with(os(&["wsnn", "train", "--set", "colour=red"])), 2);
    }
}
