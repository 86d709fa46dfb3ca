use std::collections::BTreeMap;

use rand::Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Bias given to classifier entries the decoder must never emit.
pub const MASKED_BIAS: f64 = -1e32;
/// Anything at or below this is considered masked when reading a bias back.
const MASK_DETECT: f64 = -1e31;

/// Shared token embedding; also the classifier weight.
pub const EMBEDDING: &str = "embedding";
pub const CLASSIFIER_BIAS: &str = "classifier.bias";

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params(BTreeMap<String, Tensor>);

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.0.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_key_value(&self, name: &str) -> Option<(&String, &Tensor)> {
        self.0.get_key_value(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Dimension(format!("missing parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    /// Same names and shapes.
    pub fn same_layout(&self, other: &Params) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }
}

impl FromIterator<(String, Tensor)> for Params {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

fn attention<R: Rng + ?Sized>(p: &mut Params, prefix: &str, d: usize, rng: &mut R) {
    for w in ["q", "k", "v", "o"] {
        p.insert(format!("{prefix}.w{w}"), glorot(d, d, rng));
        p.insert(format!("{prefix}.b{w}"), Tensor::zeros(&[d]));
    }
}

fn ffn<R: Rng + ?Sized>(p: &mut Params, prefix: &str, d: usize, f: usize, rng: &mut R) {
    p.insert(format!("{prefix}.w1"), glorot(d, f, rng));
    p.insert(format!("{prefix}.b1"), Tensor::zeros(&[f]));
    p.insert(format!("{prefix}.w2"), glorot(f, d, rng));
    p.insert(format!("{prefix}.b2"), Tensor::zeros(&[d]));
}

fn norm(p: &mut Params, prefix: &str, d: usize) {
    p.insert(format!("{prefix}.gain"), Tensor::ones(&[d]));
    p.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]));
}

/// Fresh parameters for the source encoder, MT encoder and decoder.
///
/// Layer names: `src.{i}.*` (self_attn, ln1, ffn, ln2), `mt.{i}.*`
/// (self_attn, ln1, cross_attn, ln2, ffn, ln3) and `dec.{i}.*` (self_attn,
/// ln1, src_attn, ln2, mt_attn, ln3, ffn, ln4).
pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Params> {
    cfg.validate()?;
    let (d, f) = (cfg.d_model, cfg.d_ffn);
    let mut p = Params::new();
    p.insert(EMBEDDING, glorot(cfg.vocab_size, d, rng));
    p.insert(CLASSIFIER_BIAS, Tensor::zeros(&[cfg.vocab_size]));
    for i in 0..cfg.n_layers {
        let l = format!("src.{i}");
        attention(&mut p, &format!("{l}.self_attn"), d, rng);
        norm(&mut p, &format!("{l}.ln1"), d);
        ffn(&mut p, &format!("{l}.ffn"), d, f, rng);
        norm(&mut p, &format!("{l}.ln2"), d);
    }
    for i in 0..cfg.n_layers {
        let l = format!("mt.{i}");
        attention(&mut p, &format!("{l}.self_attn"), d, rng);
        norm(&mut p, &format!("{l}.ln1"), d);
        attention(&mut p, &format!("{l}.cross_attn"), d, rng);
        norm(&mut p, &format!("{l}.ln2"), d);
        ffn(&mut p, &format!("{l}.ffn"), d, f, rng);
        norm(&mut p, &format!("{l}.ln3"), d);
    }
    for i in 0..cfg.n_layers {
        let l = format!("dec.{i}");
        attention(&mut p, &format!("{l}.self_attn"), d, rng);
        norm(&mut p, &format!("{l}.ln1"), d);
        attention(&mut p, &format!("{l}.src_attn"), d, rng);
        norm(&mut p, &format!("{l}.ln2"), d);
        attention(&mut p, &format!("{l}.mt_attn"), d, rng);
        norm(&mut p, &format!("{l}.ln3"), d);
        ffn(&mut p, &format!("{l}.ffn"), d, f, rng);
        norm(&mut p, &format!("{l}.ln4"), d);
    }
    Ok(p)
}

/// Set every disallowed classifier bias to [`MASKED_BIAS`].
pub fn apply_bias_mask(params: &mut Params, pe_allowed: &[bool]) -> Result<()> {
    let bias = params
        .get_mut(CLASSIFIER_BIAS)
        .ok_or_else(|| Error::Dimension(format!("missing parameter '{CLASSIFIER_BIAS}'")))?;
    if bias.len() != pe_allowed.len() {
        return Err(Error::Vocabulary(format!(
            "classifier has {} entries but the allowed-token mask has {}",
            bias.len(),
            pe_allowed.len()
        )));
    }
    for (b, &ok) in bias.data_mut().iter_mut().zip(pe_allowed) {
        if !ok {
            *b = MASKED_BIAS;
        }
    }
    Ok(())
}

/// Allowed-token mask recovered from the classifier bias.
pub fn allowed_from_bias(params: &Params) -> Result<Vec<bool>> {
    Ok(params
        .require(CLASSIFIER_BIAS)?
        .data()
        .iter()
        .map(|&b| b > MASK_DETECT)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            d_ffn: 16,
            n_heads: 2,
            dropout: 0.1,
            max_positions: 32,
            vocab_size: 20,
        }
    }

    #[test]
    fn init_ranges_and_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = init_params(&toy(), &mut rng).unwrap();
        let e = p.get(EMBEDDING).unwrap();
        let limit = (6.0f64 / 28.0).sqrt();
        assert!(e.data().iter().all(|v| v.abs() < limit));
        assert!(p.get("dec.1.ln4.gain").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(p.get("mt.0.cross_attn.bo").unwrap().data().iter().all(|&v| v == 0.0));
        // 2 + 2*(8+2+4+2) + 2*(8+2+8+2+4+2) + 2*(8+2+8+2+8+2+4+2)
        assert_eq!(p.len(), 2 + 32 + 52 + 72);
    }

    #[test]
    fn bias_mask_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = init_params(&toy(), &mut rng).unwrap();
        let mut allowed = vec![true; 20];
        allowed[7] = false;
        allowed[19] = false;
        apply_bias_mask(&mut p, &allowed).unwrap();
        assert_eq!(p.get(CLASSIFIER_BIAS).unwrap().data()[7], MASKED_BIAS);
        assert_eq!(allowed_from_bias(&p).unwrap(), allowed);
        assert!(apply_bias_mask(&mut p, &[true; 3]).is_err());
    }
}
