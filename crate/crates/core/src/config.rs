//! Training configuration and its plain-text `key=value` form.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored.
//! The same text is written into every checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::DType;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::LossWeights;
use crate::optim::AdamWConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub embed_dim: usize,
    pub blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn: usize,
    pub patch_maps: usize,
    pub patch_kernel: usize,
    pub patch_pool: usize,
    pub head_dropout: f64,
    pub bridge_heads: usize,
    pub bridge_dropout: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2_max: f64,
    /// Also keep a snapshot every this many epochs; 0 keeps only the last.
    pub checkpoint_every: usize,
    pub precision: DType,
    pub data: PathBuf,
    pub ckpt: PathBuf,
}

impl Default for TrainConfig {
    /// Optimizer values are the reference settings; model and batch sizes are
    /// desk-scale.
    fn default() -> Self {
        let opt = AdamWConfig::default();
        let model = ModelConfig::desk();
        let w = LossWeights::default();
        Self {
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            weight_decay: opt.weight_decay,
            eps: opt.eps,
            batch_size: 64,
            epochs: 40,
            seed: 7,
            embed_dim: model.embed_dim,
            blocks: model.blocks,
            d_model: model.d_model,
            heads: model.heads,
            ffn: model.ffn,
            patch_maps: model.patch_maps,
            patch_kernel: model.patch_kernel,
            patch_pool: model.patch_pool,
            head_dropout: model.head_dropout,
            bridge_heads: model.bridge_heads,
            bridge_dropout: model.bridge_dropout,
            lambda0: w.lambda0,
            lambda1: w.lambda1,
            lambda2_max: w.lambda2_max,
            checkpoint_every: 0,
            precision: DType::F64,
            data: PathBuf::from("data"),
            ckpt: PathBuf::from("ckpt"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, expected: &'static str) -> Result<T> {
    value.parse().map_err(|_| Error::ConfigValue {
        key: key.to_string(),
        expected,
        value: value.to_string(),
    })
}

impl TrainConfig {
    pub const KEYS: [&'static str; 26] = [
        "lr",
        "beta1",
        "beta2",
        "weight_decay",
        "eps",
        "batch_size",
        "epochs",
        "seed",
        "embed_dim",
        "blocks",
        "d_model",
        "heads",
        "ffn",
        "patch_maps",
        "patch_kernel",
        "patch_pool",
        "head_dropout",
        "bridge_heads",
        "bridge_dropout",
        "lambda0",
        "lambda1",
        "lambda2_max",
        "checkpoint_every",
        "precision",
        "data",
        "ckpt",
    ];

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        const F: &str = "a number";
        const U: &str = "a non-negative integer";
        match key {
            "lr" => self.lr = parse(key, value, F)?,
            "beta1" => self.beta1 = parse(key, value, F)?,
            "beta2" => self.beta2 = parse(key, value, F)?,
            "weight_decay" => self.weight_decay = parse(key, value, F)?,
            "eps" => self.eps = parse(key, value, F)?,
            "batch_size" => self.batch_size = parse(key, value, U)?,
            "epochs" => self.epochs = parse(key, value, U)?,
            "seed" => self.seed = parse(key, value, U)?,
            "embed_dim" => self.embed_dim = parse(key, value, U)?,
            "blocks" => self.blocks = parse(key, value, U)?,
            "d_model" => self.d_model = parse(key, value, U)?,
            "heads" => self.heads = parse(key, value, U)?,
            "ffn" => self.ffn = parse(key, value, U)?,
            "patch_maps" => self.patch_maps = parse(key, value, U)?,
            "patch_kernel" => self.patch_kernel = parse(key, value, U)?,
            "patch_pool" => self.patch_pool = parse(key, value, U)?,
            "head_dropout" => self.head_dropout = parse(key, value, F)?,
            "bridge_heads" => self.bridge_heads = parse(key, value, U)?,
            "bridge_dropout" => self.bridge_dropout = parse(key, value, F)?,
            "lambda0" => self.lambda0 = parse(key, value, F)?,
            "lambda1" => self.lambda1 = parse(key, value, F)?,
            "lambda2_max" => self.lambda2_max = parse(key, value, F)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value, U)?,
            "precision" => {
                self.precision = value.parse().map_err(|_| Error::ConfigValue {
                    key: key.into(),
                    expected: "f32 or f64",
                    value: value.into(),
                })?
            }
            "data" => self.data = PathBuf::from(value),
            "ckpt" => self.ckpt = PathBuf::from(value),
            other => {
                return Err(Error::Config(format!(
                    "unknown configuration key `{other}`"
                )))
            }
        }
        Ok(())
    }

    /// Applies `key=value` text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                reason: format!("expected key=value, got `{line}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    reason: "empty key".into(),
                });
            }
            if !Self::KEYS.contains(&k) {
                return Err(Error::Parse {
                    line: i + 1,
                    reason: format!("unknown key `{k}`"),
                });
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults, then `file` if given, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(&str, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            let v = match k {
                "lr" => self.lr.to_string(),
                "beta1" => self.beta1.to_string(),
                "beta2" => self.beta2.to_string(),
                "weight_decay" => self.weight_decay.to_string(),
                "eps" => self.eps.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "epochs" => self.epochs.to_string(),
                "seed" => self.seed.to_string(),
                "embed_dim" => self.embed_dim.to_string(),
                "blocks" => self.blocks.to_string(),
                "d_model" => self.d_model.to_string(),
                "heads" => self.heads.to_string(),
                "ffn" => self.ffn.to_string(),
                "patch_maps" => self.patch_maps.to_string(),
                "patch_kernel" => self.patch_kernel.to_string(),
                "patch_pool" => self.patch_pool.to_string(),
                "head_dropout" => self.head_dropout.to_string(),
                "bridge_heads" => self.bridge_heads.to_string(),
                "bridge_dropout" => self.bridge_dropout.to_string(),
                "lambda0" => self.lambda0.to_string(),
                "lambda1" => self.lambda1.to_string(),
                "lambda2_max" => self.lambda2_max.to_string(),
                "checkpoint_every" => self.checkpoint_every.to_string(),
                "precision" => self.precision.to_string(),
                "data" => self.data.display().to_string(),
                "ckpt" => self.ckpt.display().to_string(),
                _ => unreachable!(),
            };
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda0: self.lambda0,
            lambda1: self.lambda1,
            lambda2_max: self.lambda2_max,
        }
    }

    /// Model shapes for trials of `channels × time` from `n_subjects`.
    pub fn model(&self, channels: usize, time: usize, n_subjects: usize) -> ModelConfig {
        ModelConfig {
            channels,
            time,
            n_subjects,
            embed_dim: self.embed_dim,
            blocks: self.blocks,
            d_model: self.d_model,
            heads: self.heads,
            ffn: self.ffn,
            patch_maps: self.patch_maps,
            patch_kernel: self.patch_kernel,
            patch_pool: self.patch_pool,
            head_dropout: self.head_dropout,
            bridge_heads: self.bridge_heads,
            bridge_dropout: self.bridge_dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer().validate()?;
        self.loss_weights().validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "contrastive batches need at least 2 trials, got batch size {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cfg = TrainConfig {
            lr: 1.25e-3,
            precision: DType::F32,
            ..TrainConfig::default()
        };
        let mut back = TrainConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let mut cfg = TrainConfig::default();
        let err = cfg
            .apply_text("# header\nlr=0.1\nnot a pair\n")
            .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let mut cfg = TrainConfig::default();
        cfg.apply_text("\n  # c\nepochs = 3 # trailing\n\n")
            .unwrap();
        assert_eq!(cfg.epochs, 3);
    }
}
