//! Plain `key = value` run configuration with a closed schema.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::snn::OutputDecoding;

/// Splits `key=value` lines; `#` starts a comment, blank lines are skipped.
/// Duplicate keys are an error.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", no + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", no + 1)));
        }
        if out.iter().any(|(e, _)| e == k) {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", no + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub loss: LossKind,
    /// Adam learning rate for ANN training.
    pub lr: f64,
    /// Adam learning rate for SNN fine-tuning and direct training.
    pub snn_lr: f64,
    pub batch_size: usize,
    /// Simulation steps for conversion and evaluation of converted models.
    pub time_steps: usize,
    /// Steps per forward pass during spike-based training.
    pub train_time_steps: usize,
    pub balance_time_steps: usize,
    pub ann_epochs: usize,
    pub snn_epochs: usize,
    pub direct_epochs: usize,
    pub alpha: f64,
    pub folds: usize,
    pub n_subjects: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub dropout: f64,
    pub percentile: f64,
    pub calib_samples: usize,
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    pub val_fraction: f64,
    /// Cap on training slices per epoch (0 = all).
    pub max_train_slices: usize,
    pub decode: OutputDecoding,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            loss: LossKind::Dice,
            lr: 1e-3,
            snn_lr: 1e-3,
            batch_size: 26,
            time_steps: 200,
            train_time_steps: 200,
            balance_time_steps: 200,
            ann_epochs: 100,
            snn_epochs: 35,
            direct_epochs: 100,
            alpha: 0.3,
            folds: 5,
            n_subjects: 110,
            base_channels: 16,
            depth: 3,
            dropout: 0.2,
            percentile: 100.0,
            calib_samples: 26,
            patience: 5,
            factor: 0.5,
            min_lr: 1e-6,
            val_fraction: 0.1,
            max_train_slices: 0,
            decode: OutputDecoding::Mean,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

impl RunConfig {
    pub const KEYS: [&'static str; 27] = [
        "seed",
        "loss",
        "lr",
        "snn_lr",
        "batch_size",
        "T",
        "T_train",
        "T_balance",
        "ann_epochs",
        "snn_epochs",
        "direct_epochs",
        "alpha",
        "folds",
        "n_subjects",
        "base_channels",
        "depth",
        "dropout",
        "percentile",
        "calib_samples",
        "patience",
        "factor",
        "min_lr",
        "val_fraction",
        "max_train_slices",
        "decode",
        "data_dir",
        "out_dir",
    ];

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "loss" => self.loss = v.parse()?,
            "lr" => self.lr = parse(key, v)?,
            "snn_lr" => self.snn_lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "T" => self.time_steps = parse(key, v)?,
            "T_train" => self.train_time_steps = parse(key, v)?,
            "T_balance" => self.balance_time_steps = parse(key, v)?,
            "ann_epochs" => self.ann_epochs = parse(key, v)?,
            "snn_epochs" => self.snn_epochs = parse(key, v)?,
            "direct_epochs" => self.direct_epochs = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "folds" => self.folds = parse(key, v)?,
            "n_subjects" => self.n_subjects = parse(key, v)?,
            "base_channels" => self.base_channels = parse(key, v)?,
            "depth" => self.depth = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "percentile" => self.percentile = parse(key, v)?,
            "calib_samples" => self.calib_samples = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "factor" => self.factor = parse(key, v)?,
            "min_lr" => self.min_lr = parse(key, v)?,
            "val_fraction" => self.val_fraction = parse(key, v)?,
            "max_train_slices" => self.max_train_slices = parse(key, v)?,
            "decode" => self.decode = v.parse()?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => {
                return Err(Error::Config(format!(
                    "unknown config key `{other}` (known: {})",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.time_steps == 0 || self.train_time_steps == 0 || self.balance_time_steps == 0 {
            return fail("time step budgets must be positive");
        }
        if !(self.lr > 0.0 && self.snn_lr > 0.0) {
            return fail("learning rates must be positive");
        }
        if !(self.alpha >= 0.0) {
            return fail("alpha must be non-negative");
        }
        if self.folds < 2 {
            return fail("folds must be at least 2");
        }
        if self.n_subjects == 0 || !self.n_subjects.is_multiple_of(self.folds) {
            return fail("folds must divide n_subjects");
        }
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return fail("percentile must lie in (0, 100]");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return fail("factor must lie in (0, 1)");
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            return fail("val_fraction must lie in [0, 0.5)");
        }
        if self.calib_samples == 0 {
            return fail("calib_samples must be positive");
        }
        Ok(())
    }

    /// Canonical text form; parses back to the same config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("loss", self.loss.to_string());
        put("lr", self.lr.to_string());
        put("snn_lr", self.snn_lr.to_string());
        put("batch_size", self.batch_size.to_string());
        put("T", self.time_steps.to_string());
        put("T_train", self.train_time_steps.to_string());
        put("T_balance", self.balance_time_steps.to_string());
        put("ann_epochs", self.ann_epochs.to_string());
        put("snn_epochs", self.snn_epochs.to_string());
        put("direct_epochs", self.direct_epochs.to_string());
        put("alpha", self.alpha.to_string());
        put("folds", self.folds.to_string());
        put("n_subjects", self.n_subjects.to_string());
        put("base_channels", self.base_channels.to_string());
        put("depth", self.depth.to_string());
        put("dropout", self.dropout.to_string());
        put("percentile", self.percentile.to_string());
        put("calib_samples", self.calib_samples.to_string());
        put("patience", self.patience.to_string());
        put("factor", self.factor.to_string());
        put("min_lr", self.min_lr.to_string());
        put("val_fraction", self.val_fraction.to_string());
        put("max_train_slices", self.max_train_slices.to_string());
        put("decode", self.decode.to_string());
        put("data_dir", self.data_dir.display().to_string());
        put("out_dir", self.out_dir.display().to_string());
        s
    }
}
