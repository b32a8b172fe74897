//! Mini-batch training with per-epoch evaluation and early stopping.

use std::fmt::Write as _;
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wsnn_core::data::{augment, item_seed, retranslate, AugmentPolicy, NormalizationStats};
use wsnn_core::nn::{Layer, Sequential};
use wsnn_core::optim::Optimizer;
use wsnn_core::tensor::Element;
use wsnn_core::Tensor;

use crate::checkpoint::{Checkpoint, Payload};
use crate::config::{ExperimentConfig, Precision};
use crate::datasets::{load_splits, Splits};
use crate::error::{HarnessError, Result};
use crate::eval::{evaluate, objective};
use crate::models::build_for_training;

pub const CSV_HEADER: &str = "epoch,train_loss,test_loss,top1,top5,seconds";

/// One completed epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub seconds: f64,
}

impl EpochRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.2},{:.2},{:.3}",
            self.epoch, self.train_loss, self.test_loss, self.top1, self.top5, self.seconds
        )
    }
}

/// Per-epoch history plus the early-stopping outcome.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<EpochRow>,
    /// Epoch (1-based) whose weights were kept.
    pub best_epoch: usize,
    pub best_top1: f64,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.csv_line());
        }
        s
    }

    /// First epoch whose top-1 reaches `fraction` of the final best top-1.
    pub fn epochs_to_reach(&self, fraction: f64) -> Option<usize> {
        let goal = fraction * self.best_top1;
        self.rows.iter().find(|r| r.top1 >= goal).map(|r| r.epoch)
    }
}

/// Model with the best weights restored, its checkpoint and the history.
pub struct TrainOutcome<T: Element> {
    pub model: Sequential<T>,
    pub checkpoint: Checkpoint,
    pub report: MetricsReport,
    pub normalization: Option<NormalizationStats>,
}

/// Called after each epoch with the new row and, when it improved, the new
/// best checkpoint.
pub type EpochHook<'a> = dyn FnMut(&EpochRow, Option<&Checkpoint>) -> Result<()> + 'a;

fn numeric_abort(epoch: usize, batch: usize, lr: f64, detail: impl Into<String>) -> HarnessError {
    HarnessError::NumericAbort {
        epoch,
        batch,
        lr,
        detail: detail.into(),
    }
}

/// Keeps large activation buffers in the heap instead of handing them back
/// to the kernel after every layer. Without this, glibc maps and unmaps each
/// multi-megabyte tensor and the page faults cost as much as the arithmetic.
fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        });
    }
}

/// Trains on in-memory splits. `pretrained` is only consulted when
/// `cfg.pretrained` is set by the caller; callers pass the loaded checkpoint.
pub fn train_on<T: Element>(
    cfg: &ExperimentConfig,
    splits: &Splits,
    pretrained: Option<&Checkpoint>,
    hook: &mut EpochHook<'_>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    retain_freed_memory();
    if splits.train.is_empty() || splits.test.is_empty() {
        return Err(HarnessError::Config("train and test splits must be non-empty".into()));
    }
    let (mut model, mult) = build_for_training::<T>(cfg, pretrained)?;
    model.set_training(true);
    let mut opt = Optimizer::<T>::new(cfg.optim_config())?.with_multipliers(mult);
    let norm = if cfg.normalize {
        Some(NormalizationStats::compute(&splits.train)?)
    } else {
        None
    };

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, 0x5417_f1e5));
    let n = splits.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = MetricsReport {
        best_top1: f64::NEG_INFINITY,
        ..MetricsReport::default()
    };
    let mut best: Option<Checkpoint> = None;
    let mut since_best = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let online;
        let train = if cfg.online_translate && epoch > 1 {
            online = retranslate(&splits.train, item_seed(cfg.train_seed, epoch as u64))?;
            &online
        } else {
            &splits.train
        };
        order.shuffle(&mut shuffle_rng);
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        if cfg.epoch_batches > 0 {
            batches.truncate(cfg.epoch_batches);
        }

        let (mut loss_sum, mut seen) = (0.0f64, 0usize);
        for (bi, idx) in batches.iter().enumerate() {
            let lr = opt.current_lr();
            let (mut x, y) = train.batch::<T>(idx)?;
            if cfg.augment != AugmentPolicy::None {
                let first = ((epoch - 1) * n + bi * cfg.batch_size) as u64;
                x = augment(&x, cfg.augment, item_seed(cfg.seed, epoch as u64), first)?;
            }
            if let Some(s) = &norm {
                x = s.normalize(&x);
            }
            let out = match model.forward(&x) {
                Err(wsnn_core::Error::NonFinite(layer)) => {
                    return Err(numeric_abort(epoch, bi, lr, format!("non-finite output from {layer}")))
                }
                r => r?,
            };
            let loss = objective(cfg.loss, &out, &y)?;
            let value = loss.value.to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(numeric_abort(epoch, bi, lr, format!("loss is {value}")));
            }
            model.zero_grad();
            model.backward(&loss.grad)?;
            opt.step(&mut model)?;
            loss_sum += value * idx.len() as f64;
            seen += idx.len();
        }

        let ev = evaluate(&mut model, &splits.test, cfg.eval_batch, cfg.loss, norm.as_ref())?;
        let row = EpochRow {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            test_loss: ev.loss,
            top1: ev.top1,
            top5: ev.top5,
            seconds: if cfg.wall_clock {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        let improved = row.top1 > report.best_top1;
        if improved {
            report.best_top1 = row.top1;
            report.best_epoch = epoch;
            since_best = 0;
            let mut ck = Checkpoint::capture(cfg, &model, Some(&opt), epoch as u64, row.top1);
            if let Some(s) = &norm {
                ck.tensors.push((
                    "norm.stats".into(),
                    Payload::F64(Tensor::from_vec(&[2], vec![s.mean, s.std])?),
                ));
            }
            best = Some(ck);
        } else {
            since_best += 1;
        }
        report.rows.push(row.clone());
        hook(&row, if improved { best.as_ref() } else { None })?;
        if since_best >= cfg.patience {
            break;
        }
    }

    let checkpoint = best.ok_or_else(|| HarnessError::Config("max_epochs is 0, nothing was trained".into()))?;
    checkpoint.restore(&mut model)?;
    Ok(TrainOutcome {
        model,
        checkpoint,
        report,
        normalization: norm,
    })
}

/// Normalization statistics stored with a checkpoint, if any.
pub fn checkpoint_normalization(ck: &Checkpoint) -> Option<NormalizationStats> {
    ck.tensors
        .iter()
        .find(|(n, _)| n == "norm.stats")
        .and_then(|(_, p)| match p {
            Payload::F64(t) if t.len() == 2 => Some(NormalizationStats {
                mean: t.as_slice()[0],
                std: t.as_slice()[1],
            }),
            _ => None,
        })
}

/// Files written by [`run_train`].
pub struct RunFiles {
    pub dir: PathBuf,
    pub metrics: PathBuf,
    pub log: PathBuf,
    pub best: PathBuf,
}

impl RunFiles {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            metrics: dir.join("metrics.csv"),
            log: dir.join("train.log"),
            best: dir.join("best.wsnn"),
        }
    }
}

fn load_pretrained(cfg: &ExperimentConfig) -> Result<Option<Checkpoint>> {
    if cfg.pretrained.is_empty() {
        return Ok(None);
    }
    Ok(Some(Checkpoint::load(Path::new(&cfg.pretrained))?))
}

/// Loads data, trains, and writes `metrics.csv`, `train.log` and `best.wsnn`
/// under `cfg.out`. Rows are appended to the CSV as epochs complete.
pub fn run_train(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let splits = load_splits(cfg)?;
    run_train_on(cfg, &splits)
}

/// [`run_train`] with splits supplied by the caller.
pub fn run_train_on(cfg: &ExperimentConfig, splits: &Splits) -> Result<MetricsReport> {
    let files = RunFiles::new(&cfg.out);
    std::fs::create_dir_all(&files.dir).map_err(|e| HarnessError::io(&files.dir, e))?;
    let pretrained = load_pretrained(cfg)?;
    let mut csv = File::create(&files.metrics).map_err(|e| HarnessError::io(&files.metrics, e))?;
    let mut log = File::create(&files.log).map_err(|e| HarnessError::io(&files.log, e))?;
    writeln!(csv, "{CSV_HEADER}").map_err(|e| HarnessError::io(&files.metrics, e))?;
    writeln!(
        log,
        "model {} | train {} items | test {} items | config hash {:016x}",
        cfg.model.name(),
        splits.train.len(),
        splits.test.len(),
        cfg.hash()
    )
    .map_err(|e| HarnessError::io(&files.log, e))?;

    let mut hook = |row: &EpochRow, best: Option<&Checkpoint>| -> Result<()> {
        writeln!(csv, "{}", row.csv_line()).map_err(|e| HarnessError::io(&files.metrics, e))?;
        csv.flush().map_err(|e| HarnessError::io(&files.metrics, e))?;
        let mark = if best.is_some() { "  *best" } else { "" };
        writeln!(
            log,
            "epoch {:>3}  train_loss {:.4}  test_loss {:.4}  top1 {:6.2}  top5 {:6.2}{mark}",
            row.epoch, row.train_loss, row.test_loss, row.top1, row.top5
        )
        .map_err(|e| HarnessError::io(&files.log, e))?;
        if let Some(ck) = best {
            ck.save(&files.best)?;
        }
        Ok(())
    };
    let report = match cfg.precision {
        Precision::F32 => train_on::<f32>(cfg, splits, pretrained.as_ref(), &mut hook)?.report,
        Precision::F64 => train_on::<f64>(cfg, splits, pretrained.as_ref(), &mut hook)?.report,
    };
    writeln!(
        log,
        "stopped after {} epochs; best top1 {:.2} at epoch {}",
        report.rows.len(),
        report.best_top1,
        report.best_epoch
    )
    .map_err(|e| HarnessError::io(&files.log, e))?;
    Ok(report)
}
