//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! seed = 42
//! tau = 0.5
//! learning_rate = 0.001
//! ```

use std::path::Path;

use vstream_core::estimator::TrainConfig;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value {value:?} for {key}")]
    BadValue { line: usize, key: String, value: String },
    #[error("line {line}: {key} given twice")]
    Duplicate { line: usize, key: String },
}

/// Every tunable the subcommands share.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Cosine merge threshold for agglomerative unitization.
    pub tau: f64,
    /// Region count for the fixed-K partition methods.
    pub k: usize,
    pub top_k: usize,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            tau: 0.5,
            k: 8,
            top_k: 5,
            train: TrainConfig::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "tau",
    "k",
    "top_k",
    "learning_rate",
    "weight_decay",
    "iterations",
    "batch_size",
    "masks_per_sample",
    "min_learning_rate",
    "warmup_iterations",
    "beta1",
    "beta2",
    "epsilon",
];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(ConfigError::Duplicate { line, key: key.into() });
            }
            cfg.set(key, value).map_err(|e| match e {
                SetError::Unknown => ConfigError::UnknownKey { line, key: key.into() },
                SetError::Value => ConfigError::BadValue {
                    line,
                    key: key.into(),
                    value: value.into(),
                },
            })?;
            seen.push(key);
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Result<Self, ConfigError>> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), SetError> {
        fn p<T: std::str::FromStr>(v: &str) -> Result<T, SetError> {
            v.parse().map_err(|_| SetError::Value)
        }
        let t = &mut self.train;
        match key {
            "seed" => {
                self.seed = p(value)?;
                t.seed = self.seed;
            }
            "tau" => self.tau = p(value)?,
            "k" => self.k = p(value)?,
            "top_k" => self.top_k = p(value)?,
            "learning_rate" => t.learning_rate = p(value)?,
            "weight_decay" => t.weight_decay = p(value)?,
            "iterations" => t.iterations = p(value)?,
            "batch_size" => t.batch_size = p(value)?,
            "masks_per_sample" => t.masks_per_sample = p(value)?,
            "min_learning_rate" => t.min_learning_rate = p(value)?,
            "warmup_iterations" => t.warmup_iterations = p(value)?,
            "beta1" => t.beta1 = p(value)?,
            "beta2" => t.beta2 = p(value)?,
            "epsilon" => t.epsilon = p(value)?,
            _ => return Err(SetError::Unknown),
        }
        Ok(())
    }

    /// The configuration in the same text form `parse` reads.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let values: [String; 14] = [
            self.seed.to_string(),
            self.tau.to_string(),
            self.k.to_string(),
            self.top_k.to_string(),
            t.learning_rate.to_string(),
            t.weight_decay.to_string(),
            t.iterations.to_string(),
            t.batch_size.to_string(),
            t.masks_per_sample.to_string(),
            t.min_learning_rate.to_string(),
            t.warmup_iterations.to_string(),
            t.beta1.to_string(),
            t.beta2.to_string(),
            t.epsilon.to_string(),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

enum SetError {
    Unknown,
    Value,
}
