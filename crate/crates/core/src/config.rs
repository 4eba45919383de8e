//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored. Later
//! lines and command-line overrides replace earlier values. `seq_len` also
//! fixes the vocabulary (`seq_len + 1` ids, 0 reserved for padding) and the
//! positional table size; `lambda` is an alias for `density_weight`.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::duplicate_task::TaskConfig;
use crate::encoder::{ModelConfig, Pooling};
use crate::error::{Error, Result};

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::InvalidValue { key: key.into(), value: value.into() })
}

impl ModelConfig {
    pub const KEYS: [&'static str; 14] = [
        "n_layers",
        "n_heads",
        "d_model",
        "d_ff",
        "clusters",
        "vocab_size",
        "max_seq_len",
        "dropout",
        "attn_dropout",
        "exploration",
        "density_weight",
        "self_loops",
        "pooling",
        "seed",
    ];

    /// `(key, value)` pairs in [`ModelConfig::KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let values = [
            self.n_layers.to_string(),
            self.n_heads.to_string(),
            self.d_model.to_string(),
            self.d_ff.to_string(),
            self.clusters.to_string(),
            self.vocab_size.to_string(),
            self.max_seq_len.to_string(),
            self.dropout.to_string(),
            self.attn_dropout.to_string(),
            self.exploration.to_string(),
            self.density_weight.to_string(),
            self.self_loops.to_string(),
            self.pooling.to_string(),
            self.seed.to_string(),
        ];
        Self::KEYS.into_iter().zip(values).collect()
    }

    /// Sets one field from text. Does not validate cross-field constraints.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "n_layers" => self.n_layers = parse_value(key, value)?,
            "n_heads" => self.n_heads = parse_value(key, value)?,
            "d_model" => self.d_model = parse_value(key, value)?,
            "d_ff" => self.d_ff = parse_value(key, value)?,
            "clusters" => self.clusters = parse_value(key, value)?,
            "vocab_size" => self.vocab_size = parse_value(key, value)?,
            "max_seq_len" => self.max_seq_len = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "attn_dropout" => self.attn_dropout = parse_value(key, value)?,
            "exploration" => self.exploration = parse_value(key, value)?,
            "density_weight" | "lambda" => self.density_weight = parse_value(key, value)?,
            "self_loops" => self.self_loops = parse_value(key, value)?,
            "pooling" => self.pooling = value.trim().parse::<Pooling>()?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(Error::UnknownKey(key.into())),
        }
        Ok(())
    }
}

/// Everything a training run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub seq_len: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: u64,
    pub eval_batches: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    /// Synthetic task at full scale: N = 256, batch 256, lr 1e-3, 2000 steps.
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            seq_len: 256,
            batch_size: 256,
            learning_rate: 1e-3,
            steps: 2000,
            eval_batches: 4,
            checkpoint_every: 500,
        }
    }
}

impl RunConfig {
    const RUN_KEYS: [&'static str; 6] =
        ["seq_len", "batch_size", "learning_rate", "steps", "eval_batches", "checkpoint_every"];

    pub fn seed(&self) -> u64 {
        self.model.seed
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        match key {
            "seq_len" => {
                self.seq_len = parse_value(key, value)?;
                self.model.vocab_size = self.seq_len + 1;
                self.model.max_seq_len = self.seq_len;
            }
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "learning_rate" | "lr" => self.learning_rate = parse_value(key, value)?,
            "steps" => self.steps = parse_value(key, value)?,
            "eval_batches" => self.eval_batches = parse_value(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            _ => self.model.set(key, value)?,
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Format {
                what: "config",
                detail: format!("line {}: expected key = value, got `{raw}`", no + 1),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.seq_len > self.model.max_seq_len || self.seq_len + 1 > self.model.vocab_size {
            return Err(Error::InvalidValue {
                key: "seq_len".into(),
                value: format!("{} exceeds the model's vocabulary or positional table", self.seq_len),
            });
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidValue { key: "learning_rate".into(), value: self.learning_rate.to_string() });
        }
        self.task_config().map(|_| ())
    }

    pub fn task_config(&self) -> Result<TaskConfig> {
        TaskConfig::new(self.seq_len, self.batch_size, self.model.seed)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let run = [
            self.seq_len.to_string(),
            self.batch_size.to_string(),
            self.learning_rate.to_string(),
            self.steps.to_string(),
            self.eval_batches.to_string(),
            self.checkpoint_every.to_string(),
        ];
        Self::RUN_KEYS.into_iter().zip(run).chain(self.model.to_pairs()).collect()
    }

    /// Canonical text: one `key = value` line per setting in a fixed order.
    /// Parsing it back yields an equal config.
    pub fn to_canonical_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
