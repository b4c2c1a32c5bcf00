//! Run configuration: one flat `key = value` text file covering the model,
//! the optimizer and schedule, data locations, and augmentation, with `#`
//! comments. Keys carry section prefixes (`model.`, `train.`, `data.`,
//! `aug.`, `out.`).
//!
//! Serialization round-trips exactly: floats print in shortest form that
//! parses back to the same bits, and parsing starts from the defaults so
//! files only need the keys they override.

use std::path::{Path, PathBuf};

use ukanep_core::error::{Error, Result};
use ukanep_core::loss::LossMode;
use ukanep_core::model::{ModelConfig, Variant};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub warmup_epochs: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
    /// Checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub manifest: PathBuf,
    pub val_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub augment: bool,
    /// Training crop extents; `None` keeps each volume at full size.
    pub crop: Option<[usize; 3]>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 50,
            batch_size: 2,
            weight_decay: 1e-4,
            lr_start: 0.005,
            lr_peak: 0.01,
            warmup_epochs: 30,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            loss_mode: LossMode::Dynamic,
            checkpoint_every: 10,
            manifest: PathBuf::new(),
            val_manifest: None,
            out_dir: PathBuf::from("out"),
            augment: true,
            crop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        for (name, v) in [
            ("lr_start", self.lr_start),
            ("lr_peak", self.lr_peak),
            ("eps", self.eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        for (name, b) in [("beta1", self.betas.0), ("beta2", self.betas.1)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        Ok(())
    }

    /// Applies `--seed`: both the model init seed and the data-order seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.seed = seed;
    }

    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", ln + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let fail = |what: &str| {
                Error::Config(format!("line {}: bad {what} value {value:?} for {key}", ln + 1))
            };
            match key {
                "model.variant" => {
                    cfg.model.variant = value.parse::<Variant>().map_err(|_| fail("variant"))?;
                }
                "model.in_channels" => cfg.model.in_channels = parse_num(value, fail)?,
                "model.num_classes" => cfg.model.num_classes = parse_num(value, fail)?,
                "model.encoder_channels" => {
                    cfg.model.encoder_channels = parse_list::<3>(value, fail)?;
                }
                "model.token_dims" => cfg.model.token_dims = parse_list::<2>(value, fail)?,
                "model.grid_size" => cfg.model.grid_size = parse_num(value, fail)?,
                "model.spline_order" => cfg.model.spline_order = parse_num(value, fail)?,
                "model.seed" => cfg.model.seed = parse_num(value, fail)?,
                "train.epochs" => cfg.epochs = parse_num(value, fail)?,
                "train.batch_size" => cfg.batch_size = parse_num(value, fail)?,
                "train.weight_decay" => cfg.weight_decay = parse_num(value, fail)?,
                "train.lr_start" => cfg.lr_start = parse_num(value, fail)?,
                "train.lr_peak" => cfg.lr_peak = parse_num(value, fail)?,
                "train.warmup_epochs" => cfg.warmup_epochs = parse_num(value, fail)?,
                "train.beta1" => cfg.betas.0 = parse_num(value, fail)?,
                "train.beta2" => cfg.betas.1 = parse_num(value, fail)?,
                "train.eps" => cfg.eps = parse_num(value, fail)?,
                "train.seed" => cfg.seed = parse_num(value, fail)?,
                "train.loss_mode" => {
                    cfg.loss_mode = match value {
                        "dynamic" => LossMode::Dynamic,
                        "fixed_half" => LossMode::FixedHalf,
                        _ => return Err(fail("loss_mode")),
                    };
                }
                "train.checkpoint_every" => cfg.checkpoint_every = parse_num(value, fail)?,
                "data.manifest" => cfg.manifest = PathBuf::from(value),
                "data.val_manifest" => cfg.val_manifest = Some(PathBuf::from(value)),
                "aug.enabled" => {
                    cfg.augment = match value {
                        "true" => true,
                        "false" => false,
                        _ => return Err(fail("bool")),
                    };
                }
                "aug.crop" => cfg.crop = Some(parse_list::<3>(value, fail)?),
                "out.dir" => cfg.out_dir = PathBuf::from(value),
                other => {
                    return Err(Error::Config(format!("line {}: unknown key {other:?}", ln + 1)))
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg = Self::parse(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full key set in a fixed order; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("model.variant", m.variant.to_string());
        kv("model.in_channels", m.in_channels.to_string());
        kv("model.num_classes", m.num_classes.to_string());
        kv(
            "model.encoder_channels",
            format!("{},{},{}", m.encoder_channels[0], m.encoder_channels[1], m.encoder_channels[2]),
        );
        kv("model.token_dims", format!("{},{}", m.token_dims[0], m.token_dims[1]));
        kv("model.grid_size", m.grid_size.to_string());
        kv("model.spline_order", m.spline_order.to_string());
        kv("model.seed", m.seed.to_string());
        kv("train.epochs", self.epochs.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        kv("train.weight_decay", self.weight_decay.to_string());
        kv("train.lr_start", self.lr_start.to_string());
        kv("train.lr_peak", self.lr_peak.to_string());
        kv("train.warmup_epochs", self.warmup_epochs.to_string());
        kv("train.beta1", self.betas.0.to_string());
        kv("train.beta2", self.betas.1.to_string());
        kv("train.eps", self.eps.to_string());
        kv("train.seed", self.seed.to_string());
        kv(
            "train.loss_mode",
            match self.loss_mode {
                LossMode::Dynamic => "dynamic".into(),
                LossMode::FixedHalf => "fixed_half".into(),
            },
        );
        kv("train.checkpoint_every", self.checkpoint_every.to_string());
        kv("data.manifest", self.manifest.display().to_string());
        if let Some(v) = &self.val_manifest {
            kv("data.val_manifest", v.display().to_string());
        }
        kv("aug.enabled", self.augment.to_string());
        if let Some(c) = self.crop {
            kv("aug.crop", format!("{},{},{}", c[0], c[1], c[2]));
        }
        kv("out.dir", self.out_dir.display().to_string());
        out
    }
}

fn parse_num<T: std::str::FromStr>(value: &str, fail: impl Fn(&str) -> Error) -> Result<T> {
    value.parse::<T>().map_err(|_| fail("number"))
}

fn parse_list<const N: usize>(value: &str, fail: impl Fn(&str) -> Error) -> Result<[usize; N]> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| fail("list"))?;
    parts
        .try_into()
        .map_err(|_| fail(&format!("{N}-element list")))
}
