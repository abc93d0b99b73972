//! Line-oriented `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys, malformed values
//! and inconsistent combinations are errors. Short aliases are accepted for
//! the geometry keys (`L`, `T`, `P`, `S`, `D`, `H`, `F`). An empty file
//! yields the 42-patch supervised preset.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{PrepareOptions, SplitSpec, SynthSpec};
use crate::error::{Error, Result};
use crate::model::{ChannelMode, HeadKind, ModelConfig};
use crate::patching::PatchMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Supervised,
    Pretrain,
    LinearProbe,
    LpThenFt,
}

impl Schedule {
    fn as_str(self) -> &'static str {
        match self {
            Schedule::Supervised => "supervised",
            Schedule::Pretrain => "pretrain",
            Schedule::LinearProbe => "linear_probe",
            Schedule::LpThenFt => "lp_then_ft",
        }
    }
}

/// Whether the supervised loss compares de-normalized predictions with the
/// targets, or instance-normalized predictions with instance-normalized
/// targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSpace {
    Data,
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Fractions,
    /// 12/4/4 months of `steps_per_day` observations.
    Ett,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // data
    pub dataset: Option<PathBuf>,
    pub name: String,
    pub split: SplitKind,
    pub train_split: f64,
    pub val_split: f64,
    pub test_split: f64,
    pub steps_per_day: usize,
    pub standardize: bool,
    pub train_fraction: f64,
    pub train_stride: usize,
    // synthetic data, used when no dataset is given
    pub synth_channels: usize,
    pub synth_timesteps: usize,
    pub synth_periods: Vec<f64>,
    pub synth_noise: f64,
    pub synth_coupling: f64,
    pub synth_seed: u64,
    // geometry and model
    pub lookback: usize,
    pub horizon: usize,
    pub horizons: Vec<usize>,
    pub patch_len: usize,
    pub stride: usize,
    pub patch_mode: PatchMode,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub dropout: f64,
    pub channel_mode: ChannelMode,
    pub instance_norm: bool,
    // training
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Caps optimizer steps per epoch; 0 means a full pass.
    pub max_steps_per_epoch: usize,
    pub seed: u64,
    pub mask_ratio: f64,
    /// Pretraining loss over all patches instead of masked ones only.
    pub loss_all_patches: bool,
    pub loss_space: LossSpace,
    pub probe_epochs: usize,
    pub lp_epochs: usize,
    pub ft_epochs: usize,
    // drivers
    pub memory_budget_mb: usize,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            dataset: None,
            name: "synthetic".into(),
            split: SplitKind::Fractions,
            train_split: 0.7,
            val_split: 0.1,
            test_split: 0.2,
            steps_per_day: 24,
            standardize: true,
            train_fraction: 1.0,
            train_stride: 1,
            synth_channels: 4,
            synth_timesteps: 5000,
            synth_periods: vec![24.0, 168.0],
            synth_noise: 0.1,
            synth_coupling: 0.0,
            synth_seed: 7,
            lookback: m.lookback,
            horizon: m.horizon,
            horizons: vec![96, 192, 336, 720],
            patch_len: m.patch_len,
            stride: m.stride,
            patch_mode: m.patch_mode,
            d_model: m.d_model,
            heads: m.heads,
            d_ff: m.d_ff,
            layers: m.layers,
            dropout: m.dropout,
            channel_mode: m.channel_mode,
            instance_norm: m.instance_norm,
            schedule: Schedule::Supervised,
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patience: 5,
            max_steps_per_epoch: 0,
            seed: 2021,
            mask_ratio: 0.4,
            loss_all_patches: false,
            loss_space: LossSpace::Data,
            probe_epochs: 20,
            lp_epochs: 10,
            ft_epochs: 20,
            memory_budget_mb: 2048,
            out: PathBuf::from("out"),
        }
    }
}

fn canonical_key(key: &str) -> &str {
    match key {
        "L" => "lookback",
        "T" => "horizon",
        "P" => "patch_len",
        "S" => "stride",
        "D" => "d_model",
        "H" => "heads",
        "F" => "d_ff",
        other => other,
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, kind: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("`{key}` expects {kind}, got `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::config(format!("`{key}` expects true or false, got `{value}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str, kind: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| parse_num(key, v.trim(), kind))
        .collect()
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn bad_choice(key: &str, value: &str, choices: &str) -> Error {
    Error::config(format!("`{key}` must be one of {choices}, got `{value}`"))
}

impl RunConfig {
    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parses config text over the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`, got `{line}`", i + 1))
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(msg) => Error::config(format!("line {}: {msg}", i + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from its textual value (also used for CLI overrides).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = canonical_key(key);
        const INT: &str = "a non-negative integer";
        const NUM: &str = "a number";
        match key {
            "dataset" => self.dataset = (!value.is_empty()).then(|| PathBuf::from(value)),
            "name" => self.name = value.to_string(),
            "split" => {
                self.split = match value {
                    "fractions" => SplitKind::Fractions,
                    "ett" => SplitKind::Ett,
                    _ => return Err(bad_choice(key, value, "fractions, ett")),
                }
            }
            "train_split" => self.train_split = parse_num(key, value, NUM)?,
            "val_split" => self.val_split = parse_num(key, value, NUM)?,
            "test_split" => self.test_split = parse_num(key, value, NUM)?,
            "steps_per_day" => self.steps_per_day = parse_num(key, value, INT)?,
            "standardize" => self.standardize = parse_bool(key, value)?,
            "train_fraction" => self.train_fraction = parse_num(key, value, NUM)?,
            "train_stride" => self.train_stride = parse_num(key, value, INT)?,
            "synth_channels" => self.synth_channels = parse_num(key, value, INT)?,
            "synth_timesteps" => self.synth_timesteps = parse_num(key, value, INT)?,
            "synth_periods" => self.synth_periods = parse_list(key, value, "numbers")?,
            "synth_noise" => self.synth_noise = parse_num(key, value, NUM)?,
            "synth_coupling" => self.synth_coupling = parse_num(key, value, NUM)?,
            "synth_seed" => self.synth_seed = parse_num(key, value, INT)?,
            "lookback" => self.lookback = parse_num(key, value, INT)?,
            "horizon" => self.horizon = parse_num(key, value, INT)?,
            "horizons" => self.horizons = parse_list(key, value, "integers")?,
            "patch_len" => self.patch_len = parse_num(key, value, INT)?,
            "stride" => self.stride = parse_num(key, value, INT)?,
            "patch_mode" => {
                self.patch_mode = match value {
                    "overlap" => PatchMode::PaddedOverlap,
                    "nonoverlap" => PatchMode::NonOverlap,
                    _ => return Err(bad_choice(key, value, "overlap, nonoverlap")),
                }
            }
            "d_model" => self.d_model = parse_num(key, value, INT)?,
            "heads" => self.heads = parse_num(key, value, INT)?,
            "d_ff" => self.d_ff = parse_num(key, value, INT)?,
            "layers" => self.layers = parse_num(key, value, INT)?,
            "dropout" => self.dropout = parse_num(key, value, NUM)?,
            "channel_mode" => {
                self.channel_mode = match value {
                    "independent" => ChannelMode::Independent,
                    "mixing" => ChannelMode::Mixing,
                    _ => return Err(bad_choice(key, value, "independent, mixing")),
                }
            }
            "instance_norm" => self.instance_norm = parse_bool(key, value)?,
            "schedule" => {
                self.schedule = match value {
                    "supervised" => Schedule::Supervised,
                    "pretrain" => Schedule::Pretrain,
                    "linear_probe" => Schedule::LinearProbe,
                    "lp_then_ft" => Schedule::LpThenFt,
                    _ => {
                        return Err(bad_choice(
                            key,
                            value,
                            "supervised, pretrain, linear_probe, lp_then_ft",
                        ))
                    }
                }
            }
            "epochs" => self.epochs = parse_num(key, value, INT)?,
            "batch_size" => self.batch_size = parse_num(key, value, INT)?,
            "learning_rate" => self.learning_rate = parse_num(key, value, NUM)?,
            "beta1" => self.beta1 = parse_num(key, value, NUM)?,
            "beta2" => self.beta2 = parse_num(key, value, NUM)?,
            "adam_eps" => self.adam_eps = parse_num(key, value, NUM)?,
            "patience" => self.patience = parse_num(key, value, INT)?,
            "max_steps_per_epoch" => self.max_steps_per_epoch = parse_num(key, value, INT)?,
            "seed" => self.seed = parse_num(key, value, INT)?,
            "mask_ratio" => self.mask_ratio = parse_num(key, value, NUM)?,
            "loss_all_patches" => self.loss_all_patches = parse_bool(key, value)?,
            "loss_space" => {
                self.loss_space = match value {
                    "data" => LossSpace::Data,
                    "normalized" => LossSpace::Normalized,
                    _ => return Err(bad_choice(key, value, "data, normalized")),
                }
            }
            "probe_epochs" => self.probe_epochs = parse_num(key, value, INT)?,
            "lp_epochs" => self.lp_epochs = parse_num(key, value, INT)?,
            "ft_epochs" => self.ft_epochs = parse_num(key, value, INT)?,
            "memory_budget_mb" => self.memory_budget_mb = parse_num(key, value, INT)?,
            "out" => self.out = PathBuf::from(value),
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.lookback < self.patch_len {
            return Err(Error::config(format!(
                "look-back L = {} is shorter than patch length P = {}",
                self.lookback, self.patch_len
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be ≥ 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be ≥ 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::config("train_fraction must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config("mask_ratio must lie in [0, 1)"));
        }
        if self.train_stride == 0 {
            return Err(Error::config("train_stride must be ≥ 1"));
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(Error::config("horizons must be a non-empty list of positive integers"));
        }
        if self.split == SplitKind::Fractions {
            let parts = [self.train_split, self.val_split, self.test_split];
            if parts.iter().any(|f| !(*f > 0.0)) || parts.iter().sum::<f64>() > 1.0 + 1e-9 {
                return Err(Error::config("split fractions must be positive and sum to ≤ 1"));
            }
        }
        self.model_config(self.synth_channels.max(1), HeadKind::Forecast)
            .validate()
    }

    /// Model configuration for `channels` input channels.
    pub fn model_config(&self, channels: usize, head_kind: HeadKind) -> ModelConfig {
        ModelConfig {
            lookback: self.lookback,
            horizon: self.horizon,
            patch_len: self.patch_len,
            stride: if self.patch_mode == PatchMode::NonOverlap {
                self.patch_len
            } else {
                self.stride
            },
            patch_mode: self.patch_mode,
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            layers: self.layers,
            dropout: self.dropout,
            channel_mode: self.channel_mode,
            channels,
            instance_norm: self.instance_norm,
            head_kind,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        match self.split {
            SplitKind::Fractions => SplitSpec::Fractions {
                train: self.train_split,
                val: self.val_split,
                test: self.test_split,
            },
            SplitKind::Ett => SplitSpec::ett(self.steps_per_day),
        }
    }

    pub fn prepare_options(&self) -> PrepareOptions {
        PrepareOptions {
            split: self.split_spec(),
            standardize: self.standardize,
            train_fraction: self.train_fraction,
            train_stride: self.train_stride,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        let mut spec = SynthSpec::suite(
            self.synth_channels,
            self.synth_timesteps,
            self.synth_seed,
            &self.synth_periods,
            self.synth_noise,
        );
        spec.coupling = self.synth_coupling;
        spec
    }

    /// Every field as `key = value` lines; parsing the output gives back an
    /// equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv(
            "dataset",
            self.dataset
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        kv("name", self.name.clone());
        kv(
            "split",
            match self.split {
                SplitKind::Fractions => "fractions",
                SplitKind::Ett => "ett",
            }
            .into(),
        );
        kv("train_split", self.train_split.to_string());
        kv("val_split", self.val_split.to_string());
        kv("test_split", self.test_split.to_string());
        kv("steps_per_day", self.steps_per_day.to_string());
        kv("standardize", self.standardize.to_string());
        kv("train_fraction", self.train_fraction.to_string());
        kv("train_stride", self.train_stride.to_string());
        kv("synth_channels", self.synth_channels.to_string());
        kv("synth_timesteps", self.synth_timesteps.to_string());
        kv("synth_periods", join(&self.synth_periods));
        kv("synth_noise", self.synth_noise.to_string());
        kv("synth_coupling", self.synth_coupling.to_string());
        kv("synth_seed", self.synth_seed.to_string());
        kv("lookback", self.lookback.to_string());
        kv("horizon", self.horizon.to_string());
        kv("horizons", join(&self.horizons));
        kv("patch_len", self.patch_len.to_string());
        kv("stride", self.stride.to_string());
        kv(
            "patch_mode",
            match self.patch_mode {
                PatchMode::PaddedOverlap => "overlap",
                PatchMode::NonOverlap => "nonoverlap",
            }
            .into(),
        );
        kv("d_model", self.d_model.to_string());
        kv("heads", self.heads.to_string());
        kv("d_ff", self.d_ff.to_string());
        kv("layers", self.layers.to_string());
        kv("dropout", self.dropout.to_string());
        kv(
            "channel_mode",
            match self.channel_mode {
                ChannelMode::Independent => "independent",
                ChannelMode::Mixing => "mixing",
            }
            .into(),
        );
        kv("instance_norm", self.instance_norm.to_string());
        kv("schedule", self.schedule.as_str().into());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("patience", self.patience.to_string());
        kv("max_steps_per_epoch", self.max_steps_per_epoch.to_string());
        kv("seed", self.seed.to_string());
        kv("mask_ratio", self.mask_ratio.to_string());
        kv("loss_all_patches", self.loss_all_patches.to_string());
        kv(
            "loss_space",
            match self.loss_space {
                LossSpace::Data => "data",
                LossSpace::Normalized => "normalized",
            }
            .into(),
        );
        kv("probe_epochs", self.probe_epochs.to_string());
        kv("lp_epochs", self.lp_epochs.to_string());
        kv("ft_epochs", self.ft_epochs.to_string());
        kv("memory_budget_mb", self.memory_budget_mb.to_string());
        kv("out", self.out.display().to_string());
        s
    }
}
