//! Training configuration and its `key=value` file format.

use std::fmt::Write as _;

use crate::data::parse_key_values;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, INIT_STD};
use crate::objectives::DEFAULT_TEMPERATURE;

use super::optim::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    /// Queries per optimizer step.
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub warmup_ratio: f64,
    pub temperature: f64,
    /// Candidates sampled per training record each time it is visited.
    pub n_per_record: usize,
    pub seed: u64,
    pub orthogonal_weight: f64,
    pub init_std: f64,
    /// Cutoff of the per-epoch validation nDCG.
    pub eval_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 1,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            warmup_ratio: 0.05,
            temperature: DEFAULT_TEMPERATURE,
            n_per_record: 5,
            seed: 0,
            orthogonal_weight: 1.0,
            init_std: INIT_STD,
            eval_k: 10,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "epochs",
        "batch_size",
        "lr",
        "beta1",
        "beta2",
        "eps",
        "warmup_ratio",
        "temperature",
        "n_per_record",
        "seed",
        "orthogonal_weight",
        "init_std",
        "eval_k",
    ];

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("lr", self.optimizer.lr),
            ("eps", self.optimizer.eps),
            ("temperature", self.temperature),
            ("n_per_record", self.n_per_record as f64),
            ("eval_k", self.eval_k as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.optimizer.beta1), ("beta2", self.optimizer.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup_ratio must lie in [0, 1], got {}",
                self.warmup_ratio
            )));
        }
        for (name, v) in [
            ("orthogonal_weight", self.orthogonal_weight),
            ("init_std", self.init_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.n_per_record < 2 {
            return Err(Error::Config("n_per_record must be at least 2".into()));
        }
        Ok(())
    }

    /// Applies one setting, model keys included. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? {
            return Ok(());
        }
        let float = || -> Result<f64> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: expected a number, got {value:?}")))
        };
        let int = || -> Result<usize> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: expected an integer, got {value:?}")))
        };
        match key {
            "epochs" => self.epochs = int()?,
            "batch_size" => self.batch_size = int()?,
            "lr" => self.optimizer.lr = float()?,
            "beta1" => self.optimizer.beta1 = float()?,
            "beta2" => self.optimizer.beta2 = float()?,
            "eps" => self.optimizer.eps = float()?,
            "warmup_ratio" => self.warmup_ratio = float()?,
            "temperature" => self.temperature = float()?,
            "n_per_record" => self.n_per_record = int()?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| Error::Config(format!("seed: expected an integer, got {value:?}")))?
            }
            "orthogonal_weight" => self.orthogonal_weight = float()?,
            "init_std" => self.init_std = float()?,
            "eval_k" => self.eval_k = int()?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, value) in parse_key_values(text, |line, message| Error::Parse { line, message })? {
            cfg.set(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serializes every key; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.model.to_pairs() {
            let _ = writeln!(out, "{k}={v}");
        }
        let o = &self.optimizer;
        let rows: [(&str, String); 13] = [
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", format!("{:?}", o.lr)),
            ("beta1", format!("{:?}", o.beta1)),
            ("beta2", format!("{:?}", o.beta2)),
            ("eps", format!("{:?}", o.eps)),
            ("warmup_ratio", format!("{:?}", self.warmup_ratio)),
            ("temperature", format!("{:?}", self.temperature)),
            ("n_per_record", self.n_per_record.to_string()),
            ("seed", self.seed.to_string()),
            ("orthogonal_weight", format!("{:?}", self.orthogonal_weight)),
            ("init_std", format!("{:?}", self.init_std)),
            ("eval_k", self.eval_k.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}
