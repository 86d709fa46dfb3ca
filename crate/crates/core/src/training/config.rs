use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::optim::AdamConfig;
use crate::error::{Error, Result};
use crate::model::{parse, ModelConfig, NoiseConfig};

/// Everything a training run needs besides data. Defaults are the
/// full-scale values; desk-scale runs override them from a config file.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub label_smoothing: f64,
    /// Weight of the post-editing loss; `1 − lambda` goes to de-noising.
    pub lambda: f64,
    pub noise: NoiseConfig,
    pub adam: AdamConfig,
    pub warmup_steps: u64,
    /// Multiplier on the schedule; 1 keeps the plain formula.
    pub lr_scale: f64,
    pub save_interval: u64,
    pub keep_last: usize,
    pub average_window: usize,
    pub epochs: usize,
    pub batch_pe_tokens: usize,
    /// Stop after this many updates; 0 means run all epochs.
    pub max_steps: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::base(0),
            label_smoothing: 0.1,
            lambda: 0.5,
            noise: NoiseConfig::default(),
            adam: AdamConfig::default(),
            warmup_steps: 8000,
            lr_scale: 1.0,
            save_interval: 1500,
            keep_last: 20,
            average_window: 5,
            epochs: 8,
            batch_pe_tokens: 25000,
            max_steps: 0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        let counts = [
            ("warmup_steps", self.warmup_steps as usize),
            ("save_interval", self.save_interval as usize),
            ("keep_last", self.keep_last),
            ("average_window", self.average_window),
            ("epochs", self.epochs),
            ("batch_pe_tokens", self.batch_pe_tokens),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            return Err(Error::Config(format!("lr_scale {} must be positive", self.lr_scale)));
        }
        let b = &self.adam;
        if !((0.0..1.0).contains(&b.beta1) && (0.0..1.0).contains(&b.beta2) && b.eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }

    /// Sets one field by name, model keys included.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "label_smoothing" => self.label_smoothing = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "noise_strength" => self.noise.strength = parse(key, value)?,
            "noise_distribution" => self.noise.distribution = value.parse()?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "lr_scale" => self.lr_scale = parse(key, value)?,
            "save_interval" => self.save_interval = parse(key, value)?,
            "keep_last" => self.keep_last = parse(key, value)?,
            "average_window" => self.average_window = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_pe_tokens" => self.batch_pe_tokens = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => {
                if !self.model.set(key, value)? {
                    return Err(Error::Config(format!("unknown config key '{key}'")));
                }
            }
        }
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got '{line}'")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        Self::from_kv(&text)
    }

    pub fn to_kv(&self) -> String {
        let mut s = self.model.to_kv();
        let fields: [(&str, String); 16] = [
            ("label_smoothing", self.label_smoothing.to_string()),
            ("lambda", self.lambda.to_string()),
            ("noise_strength", self.noise.strength.to_string()),
            ("noise_distribution", self.noise.distribution.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("lr_scale", self.lr_scale.to_string()),
            ("save_interval", self.save_interval.to_string()),
            ("keep_last", self.keep_last.to_string()),
            ("average_window", self.average_window.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_pe_tokens", self.batch_pe_tokens.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("seed", self.seed.to_string()),
        ];
        for (k, v) in fields {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    pub fn digest(&self) -> String {
        config_digest(&self.to_kv())
    }
}

/// Hex SHA-256 of a config text.
pub fn config_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NoiseDistribution;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let mut c = TrainConfig::default();
        c.model.vocab_size = 50;
        c.validate().unwrap();
        let back = TrainConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
    }

    #[test]
    fn parsing_and_errors() {
        let c = TrainConfig::from_kv("lambda = 1\n# comment\nnoise_distribution=uniform\nd_model=16 # inline\n").unwrap();
        assert_eq!(c.lambda, 1.0);
        assert_eq!(c.noise.distribution, NoiseDistribution::Uniform);
        assert_eq!(c.model.d_model, 16);
        assert!(TrainConfig::from_kv("bogus=1").is_err());
        assert!(TrainConfig::from_kv("lambda").is_err());
        let bad = TrainConfig {
            lambda: 1.5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
