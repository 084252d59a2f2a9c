//! Training hyperparameters and their `key = value` file format.

use crate::nn::AdamConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_epochs: usize,
    pub base_batch_size: usize,
    pub meta_epochs: usize,
    pub meta_batch_size: usize,
    pub adam: AdamConfig,
    /// Weight positives by `#neg / #pos` in each one-vs-all view.
    pub positive_weighting: bool,
    pub positive_weight_cap: f64,
    pub meta_hidden: Vec<usize>,
    pub meta_dropout: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_epochs: 20,
            base_batch_size: 128,
            meta_epochs: 30,
            meta_batch_size: 128,
            adam: AdamConfig::default(),
            positive_weighting: true,
            positive_weight_cap: 100.0,
            meta_hidden: vec![128, 64],
            meta_dropout: 0.2,
            bn_momentum: 0.99,
            bn_epsilon: 1e-3,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for {key}: {value:?}")]
    BadValue { line: usize, key: String, value: String },
}

impl TrainConfig {
    /// Overrides defaults from `key = value` lines. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = || ConfigError::BadValue { line, key: key.to_string(), value: value.to_string() };
            let count = || value.parse::<usize>().ok().filter(|&v| v > 0).ok_or_else(bad);
            let real = || value.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(bad);
            match key {
                "base_epochs" => cfg.base_epochs = count()?,
                "base_batch_size" => cfg.base_batch_size = count()?,
                "meta_epochs" => cfg.meta_epochs = count()?,
                "meta_batch_size" => cfg.meta_batch_size = count()?,
                "learning_rate" => cfg.adam.learning_rate = real()?,
                "beta1" => cfg.adam.beta1 = real()?,
                "beta2" => cfg.adam.beta2 = real()?,
                "adam_epsilon" => cfg.adam.epsilon = real()?,
                "positive_weighting" => cfg.positive_weighting = value.parse().map_err(|_| bad())?,
                "positive_weight_cap" => cfg.positive_weight_cap = real()?,
                "meta_hidden" => {
                    cfg.meta_hidden = value
                        .split(',')
                        .map(|v| v.trim().parse::<usize>().ok().filter(|&u| u > 0))
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(bad)?
                }
                "meta_dropout" => cfg.meta_dropout = real()?,
                "bn_momentum" => cfg.bn_momentum = real()?,
                "bn_epsilon" => cfg.bn_epsilon = real()?,
                _ => return Err(ConfigError::UnknownKey { line, key: key.to_string() }),
            }
        }
        Ok(cfg)
    }
}
