//! Experiment configuration.
//!
//! The on-disk format is a flat list of `key = value` lines; `#` starts a
//! comment and blank lines are ignored. Every key has a default, unknown keys
//! are rejected, and [`ExperimentConfig::to_text`] renders the canonical form
//! that checkpoints store and hash.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use wsnn_core::data::{AugmentPolicy, NUM_CLASSES};
use wsnn_core::losses::LossKind;
use wsnn_core::nn::InitScheme;
use wsnn_core::optim::{OptimConfig, OptimizerKind};
use wsnn_core::stn::AffineMode;

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    /// Official MNIST padded to 32×32.
    Mnist32,
    /// Digits placed on a `canvas×canvas` black background.
    Translated,
    /// Translated digits plus distractor fragments.
    Cluttered,
    /// `train.wsnn` / `test.wsnn` written by `gen-data` under `data_dir`.
    Cache,
}

impl DatasetKind {
    fn name(self) -> &'static str {
        match self {
            Self::Mnist32 => "mnist32",
            Self::Translated => "translated",
            Self::Cluttered => "cluttered",
            Self::Cache => "cache",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mnist32" => Self::Mnist32,
            "translated" => Self::Translated,
            "cluttered" => Self::Cluttered,
            "cache" => Self::Cache,
            other => return Err(HarnessError::Config(format!("unknown dataset '{other}'"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelName {
    Lenet32,
    /// Bilinear 32×32 downsampling in front of `lenet32`.
    Lenet32Down,
    /// Two hidden layers of 128 on the downsampled 32×32 image.
    Mlp32Down,
    Convnet100,
    MilFcn,
    WeldonFcn,
    Stn,
}

impl ModelName {
    pub fn name(self) -> &'static str {
        match self {
            Self::Lenet32 => "lenet32",
            Self::Lenet32Down => "lenet32_down",
            Self::Mlp32Down => "mlp32_down",
            Self::Convnet100 => "convnet100",
            Self::MilFcn => "mil_fcn",
            Self::WeldonFcn => "weldon_fcn",
            Self::Stn => "stn",
        }
    }
}

impl FromStr for ModelName {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "lenet32" => Self::Lenet32,
            "lenet32_down" => Self::Lenet32Down,
            "mlp32_down" => Self::Mlp32Down,
            "convnet100" => Self::Convnet100,
            "mil_fcn" => Self::MilFcn,
            "weldon_fcn" => Self::WeldonFcn,
            "stn" => Self::Stn,
            other => return Err(HarnessError::Config(format!("unknown model '{other}'"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalizerView {
    /// The localizer sees the input resized to 32×32.
    Downsampled,
    /// The localizer sees the full-resolution input.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    // data
    pub dataset: DatasetKind,
    pub canvas: usize,
    /// Empty means `$WSNN_MNIST_DIR`, falling back to `data/mnist` in the workspace.
    pub data_dir: String,
    pub train_seed: u64,
    pub test_seed: u64,
    /// Train on the first `subset` items only (0 = all).
    pub subset: usize,
    pub test_subset: usize,
    pub augment: AugmentPolicy,
    pub online_translate: bool,
    pub train_class_keep: [f64; NUM_CLASSES],
    /// Train on a bootstrap resample of the training split drawn with this
    /// seed (0 = off).
    pub bootstrap_seed: u64,
    pub normalize: bool,
    // model
    pub model: ModelName,
    pub stn_mode: AffineMode,
    pub stn_scale: f64,
    pub stn_localizer: LocalizerView,
    pub weldon_k: usize,
    pub init: InitScheme,
    // optimization
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub loss: LossKind,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Cap on mini-batches per epoch (0 = a full pass).
    pub epoch_batches: usize,
    pub eval_batch: usize,
    // fine-tuning
    pub pretrained: String,
    pub finetune_multiplier: f64,
    pub reset_layers: Vec<String>,
    pub frozen: bool,
    // output
    pub out: PathBuf,
    pub precision: Precision,
    /// Record elapsed seconds in the metrics CSV (off gives byte-stable reports).
    pub wall_clock: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Translated,
            canvas: 100,
            data_dir: String::new(),
            train_seed: 1,
            test_seed: 2,
            subset: 0,
            test_subset: 0,
            augment: AugmentPolicy::None,
            online_translate: false,
            train_class_keep: [1.0; NUM_CLASSES],
            bootstrap_seed: 0,
            normalize: false,
            model: ModelName::Lenet32,
            stn_mode: AffineMode::TranslationScale,
            stn_scale: 0.32,
            stn_localizer: LocalizerView::Downsampled,
            weldon_k: 1,
            init: InitScheme::FanInSqrt,
            seed: 1,
            optimizer: OptimizerKind::Adam,
            lr: 3e-4,
            lr_decay: 0.0,
            momentum: 0.9,
            nesterov: false,
            weight_decay: 0.0,
            loss: LossKind::CrossEntropy,
            batch_size: 256,
            max_epochs: 100,
            patience: 10,
            epoch_batches: 0,
            eval_batch: 500,
            pretrained: String::new(),
            finetune_multiplier: 0.1,
            reset_layers: Vec::new(),
            frozen: false,
            out: PathBuf::from("runs/default"),
            precision: Precision::F32,
            wall_clock: true,
        }
    }
}

/// Every recognised key, in canonical order.
pub const KEYS: &[&str] = &[
    "dataset",
    "canvas",
    "data_dir",
    "train_seed",
    "test_seed",
    "subset",
    "test_subset",
    "augment",
    "online_translate",
    "train_class_keep",
    "bootstrap_seed",
    "normalize",
    "model",
    "stn_mode",
    "stn_scale",
    "stn_localizer",
    "weldon_k",
    "init",
    "seed",
    "optimizer",
    "lr",
    "lr_decay",
    "momentum",
    "nesterov",
    "weight_decay",
    "loss",
    "batch_size",
    "max_epochs",
    "patience",
    "epoch_batches",
    "eval_batch",
    "pretrained",
    "finetune_multiplier",
    "reset_layers",
    "frozen",
    "out",
    "precision",
    "wall_clock",
];

fn bad(key: &str, value: &str, what: &str) -> HarnessError {
    HarnessError::Config(format!("{key} = '{value}': expected {what}"))
}

fn parse_num<N: FromStr>(key: &str, value: &str, what: &str) -> Result<N> {
    value.parse().map_err(|_| bad(key, value, what))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    let v: f64 = parse_num(key, value, "a number")?;
    if !v.is_finite() {
        return Err(bad(key, value, "a finite number"));
    }
    Ok(v)
}

fn augment_text(p: AugmentPolicy) -> String {
    match p {
        AugmentPolicy::None => "none".into(),
        AugmentPolicy::Shift(n) => format!("shift:{n}"),
        AugmentPolicy::HFlip(p) => format!("hflip:{p}"),
        AugmentPolicy::CropRescale { lo, hi, out } => format!("crop_rescale:{lo}:{hi}:{out}"),
    }
}

impl ExperimentConfig {
    /// Parses config text on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies the assignments in config text on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected 'key = value'", lineno + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_text(&text)
    }

    /// Assigns one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = value.parse()?,
            "canvas" => self.canvas = parse_num(key, value, "an integer")?,
            "data_dir" => self.data_dir = value.to_string(),
            "train_seed" => self.train_seed = parse_num(key, value, "an unsigned integer")?,
            "test_seed" => self.test_seed = parse_num(key, value, "an unsigned integer")?,
            "subset" => self.subset = parse_num(key, value, "an integer")?,
            "test_subset" => self.test_subset = parse_num(key, value, "an integer")?,
            "augment" => {
                self.augment = value
                    .parse()
                    .map_err(|e: wsnn_core::Error| bad(key, value, &e.to_string()))?
            }
            "online_translate" => self.online_translate = parse_bool(key, value)?,
            "train_class_keep" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != NUM_CLASSES {
                    return Err(bad(key, value, "10 comma-separated fractions"));
                }
                for (slot, p) in self.train_class_keep.iter_mut().zip(parts) {
                    *slot = parse_f64(key, p)?;
                }
            }
            "bootstrap_seed" => self.bootstrap_seed = parse_num(key, value, "an unsigned integer")?,
            "normalize" => self.normalize = parse_bool(key, value)?,
            "model" => self.model = value.parse()?,
            "stn_mode" => self.stn_mode = value.parse().map_err(|_| bad(key, value, "2p, 3p, 4p or 6p"))?,
            "stn_scale" => self.stn_scale = parse_f64(key, value)?,
            "stn_localizer" => {
                self.stn_localizer = match value {
                    "downsampled" => LocalizerView::Downsampled,
                    "full" => LocalizerView::Full,
                    _ => return Err(bad(key, value, "downsampled or full")),
                }
            }
            "weldon_k" => self.weldon_k = parse_num(key, value, "an integer")?,
            "init" => {
                self.init = match value {
                    "inverse_fan_in" => InitScheme::InverseFanIn,
                    "fan_in_sqrt" => InitScheme::FanInSqrt,
                    _ => return Err(bad(key, value, "inverse_fan_in or fan_in_sqrt")),
                }
            }
            "seed" => self.seed = parse_num(key, value, "an unsigned integer")?,
            "optimizer" => self.optimizer = value.parse().map_err(|_| bad(key, value, "sgd or adam"))?,
            "lr" => self.lr = parse_f64(key, value)?,
            "lr_decay" => self.lr_decay = parse_f64(key, value)?,
            "momentum" => self.momentum = parse_f64(key, value)?,
            "nesterov" => self.nesterov = parse_bool(key, value)?,
            "weight_decay" => self.weight_decay = parse_f64(key, value)?,
            "loss" => {
                self.loss = match value.parse().map_err(|_| bad(key, value, "cross_entropy or mse"))? {
                    LossKind::MultilabelEntropy => {
                        return Err(bad(key, value, "a single-label loss (cross_entropy or mse)"))
                    }
                    k => k,
                }
            }
            "batch_size" => self.batch_size = parse_num(key, value, "an integer")?,
            "max_epochs" => self.max_epochs = parse_num(key, value, "an integer")?,
            "patience" => self.patience = parse_num(key, value, "an integer")?,
            "epoch_batches" => self.epoch_batches = parse_num(key, value, "an integer")?,
            "eval_batch" => self.eval_batch = parse_num(key, value, "an integer")?,
            "pretrained" => self.pretrained = value.to_string(),
            "finetune_multiplier" => self.finetune_multiplier = parse_f64(key, value)?,
            "reset_layers" => {
                self.reset_layers = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "frozen" => self.frozen = parse_bool(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(bad(key, value, "f32 or f64")),
                }
            }
            "wall_clock" => self.wall_clock = parse_bool(key, value)?,
            other => return Err(HarnessError::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Canonical textual value of `key`.
    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key {
            "dataset" => self.dataset.name().to_string(),
            "canvas" => self.canvas.to_string(),
            "data_dir" => self.data_dir.clone(),
            "train_seed" => self.train_seed.to_string(),
            "test_seed" => self.test_seed.to_string(),
            "subset" => self.subset.to_string(),
            "test_subset" => self.test_subset.to_string(),
            "augment" => augment_text(self.augment),
            "online_translate" => self.online_translate.to_string(),
            "train_class_keep" => self
                .train_class_keep
                .iter()
                .map(|k| k.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "bootstrap_seed" => self.bootstrap_seed.to_string(),
            "normalize" => self.normalize.to_string(),
            "model" => self.model.name().to_string(),
            "stn_mode" => self.stn_mode.name().to_string(),
            "stn_scale" => self.stn_scale.to_string(),
            "stn_localizer" => match self.stn_localizer {
                LocalizerView::Downsampled => "downsampled".into(),
                LocalizerView::Full => "full".into(),
            },
            "weldon_k" => self.weldon_k.to_string(),
            "init" => match self.init {
                InitScheme::InverseFanIn => "inverse_fan_in".into(),
                InitScheme::FanInSqrt => "fan_in_sqrt".into(),
            },
            "seed" => self.seed.to_string(),
            "optimizer" => match self.optimizer {
                OptimizerKind::Sgd => "sgd".into(),
                OptimizerKind::Adam => "adam".into(),
            },
            "lr" => self.lr.to_string(),
            "lr_decay" => self.lr_decay.to_string(),
            "momentum" => self.momentum.to_string(),
            "nesterov" => self.nesterov.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "loss" => match self.loss {
                LossKind::Mse => "mse".into(),
                _ => "cross_entropy".into(),
            },
            "batch_size" => self.batch_size.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "patience" => self.patience.to_string(),
            "epoch_batches" => self.epoch_batches.to_string(),
            "eval_batch" => self.eval_batch.to_string(),
            "pretrained" => self.pretrained.clone(),
            "finetune_multiplier" => self.finetune_multiplier.to_string(),
            "reset_layers" => self.reset_layers.join(","),
            "frozen" => self.frozen.to_string(),
            "out" => self.out.display().to_string(),
            "precision" => match self.precision {
                Precision::F32 => "f32".into(),
                Precision::F64 => "f64".into(),
            },
            "wall_clock" => self.wall_clock.to_string(),
            _ => return None,
        };
        Some(v)
    }

    /// Canonical `key = value` rendering of every key.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    /// First 8 bytes of the SHA-256 of [`Self::to_text`], little-endian.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_text().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }

    /// Cross-field checks run before any work starts.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HarnessError::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if self.eval_batch == 0 {
            return fail("eval_batch must be at least 1".into());
        }
        if self.canvas < 32 && self.dataset != DatasetKind::Mnist32 {
            return fail(format!("canvas {} is smaller than a padded digit (32)", self.canvas));
        }
        if self.train_class_keep.iter().any(|k| !(0.0..=1.0).contains(k)) {
            return fail("train_class_keep fractions must lie in [0, 1]".into());
        }
        if self.stn_scale <= 0.0 {
            return fail("stn_scale must be positive".into());
        }
        if self.weldon_k == 0 {
            return fail("weldon_k must be at least 1".into());
        }
        if self.finetune_multiplier < 0.0 {
            return fail("finetune_multiplier must be non-negative".into());
        }
        if !self.reset_layers.is_empty() && self.pretrained.is_empty() {
            return fail("reset_layers needs a pretrained checkpoint".into());
        }
        if self.online_translate && self.dataset != DatasetKind::Translated {
            return fail("online_translate only applies to the translated dataset".into());
        }
        self.optim_config().validate()?;
        Ok(())
    }

    pub fn optim_config(&self) -> OptimConfig {
        OptimConfig {
            kind: self.optimizer,
            lr: self.lr,
            lr_decay: self.lr_decay,
            momentum: self.momentum,
            nesterov: self.nesterov,
            weight_decay: self.weight_decay,
            ..OptimConfig::default()
        }
    }

    /// Directory holding the MNIST IDX files.
    pub fn mnist_dir(&self) -> PathBuf {
        if !self.data_dir.is_empty() {
            return PathBuf::from(&self.data_dir);
        }
        default_mnist_dir()
    }

    /// Image side the model sees before any internal resizing.
    pub fn input_side(&self) -> usize {
        match self.dataset {
            DatasetKind::Mnist32 => 32,
            _ => self.canvas,
        }
    }
}

/// `$WSNN_MNIST_DIR`, or `data/mnist` at the workspace root.
pub fn default_mnist_dir() -> PathBuf {
    match std::env::var_os("WSNN_MNIST_DIR") {
        Some(d) if !d.is_empty() => PathBuf::from(d),
        _ => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_training_setup() {
        let c = ExperimentConfig::default();
        assert_eq!(c.batch_size, 256);
        assert_eq!(c.optimizer, OptimizerKind::Adam);
        assert_eq!(c.lr, 3e-4);
        assert_eq!((c.lr_decay, c.weight_decay), (0.0, 0.0));
        assert_eq!((c.max_epochs, c.patience), (100, 10));
    }

    #[test]
    fn parses_comments_and_blank_lines() {
        let c = ExperimentConfig::from_text("# run\n\nmodel = mil_fcn  # fcn\nlr=0.001\n").unwrap();
        assert_eq!(c.model, ModelName::MilFcn);
        assert_eq!(c.lr, 0.001);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for text in [
            "colour = red",
            "batch_size = many",
            "model = vgg",
            "loss = multilabel",
            "missing equals",
        ] {
            let e = ExperimentConfig::from_text(text).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{text}");
        }
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut c = ExperimentConfig::default();
        c.set("augment", "shift:3").unwrap();
        c.set("train_class_keep", "1,1,1,1,1,0.5,0.2,0.2,0.2,0.2").unwrap();
        c.set("reset_layers", "fc2, fc1").unwrap();
        c.set("stn_mode", "6p").unwrap();
        let back = ExperimentConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn hash_changes_with_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.set("seed", "2").unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn validation_rejects_degenerate_values() {
        for (k, v) in [("batch_size", "0"), ("patience", "0"), ("lr", "-1"), ("weldon_k", "0")] {
            let mut c = ExperimentConfig::default();
            c.set(k, v).unwrap();
            assert_eq!(c.validate().unwrap_err().exit_code(), 2, "{k}");
        }
    }
}
