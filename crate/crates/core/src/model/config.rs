use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    /// Transformer-base dimensions (6 layers, 512/2048, 8 heads).
    pub fn base(vocab_size: usize) -> Self {
        Self {
            n_layers: 6,
            d_model: 512,
            d_ffn: 2048,
            n_heads: 8,
            dropout: 0.1,
            max_positions: 1024,
            vocab_size,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `n_layers == 0` is accepted as an ablation (embeddings only).
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("n_heads", self.n_heads),
            ("max_positions", self.max_positions),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// `key=value` lines, the form stored in checkpoints.
    pub fn to_kv(&self) -> String {
        format!(
            "n_layers={}\nd_model={}\nd_ffn={}\nn_heads={}\ndropout={}\nmax_positions={}\nvocab_size={}\n",
            self.n_layers, self.d_model, self.d_ffn, self.n_heads, self.dropout, self.max_positions, self.vocab_size
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::base(0);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got '{line}'")))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Sets one field by name. Returns `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "n_layers" => self.n_layers = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "d_ffn" => self.d_ffn = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "max_positions" => self.max_positions = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

pub(crate) fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseDistribution {
    /// Standard normal.
    Gaussian,
    /// Uniform on [-1, 1].
    Uniform,
}

impl fmt::Display for NoiseDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseDistribution::Gaussian => "gaussian",
            NoiseDistribution::Uniform => "uniform",
        })
    }
}

impl FromStr for NoiseDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(Self::Gaussian),
            "uniform" => Ok(Self::Uniform),
            _ => Err(Error::Config(format!("unknown noise distribution '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseConfig {
    pub strength: f64,
    pub distribution: NoiseDistribution,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            strength: 0.2,
            distribution: NoiseDistribution::Gaussian,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.strength >= 0.0 && self.strength.is_finite()) {
            return Err(Error::Config(format!(
                "noise strength must be a finite value >= 0, got {}",
                self.strength
            )));
        }
        Ok(())
    }
}
