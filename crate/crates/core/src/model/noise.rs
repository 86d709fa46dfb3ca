//! Adaptive embedding noise: `out = emb + strength · mean(|emb|) · N`.
//!
//! The scale `mean(|emb|)` is taken over every element of the combined
//! (token + position) embedding of the current batch and is treated as a
//! constant, so no gradient flows through it.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::config::{NoiseConfig, NoiseDistribution};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// The adaptive scale: mean absolute value over all elements.
pub fn adaptive_scale(emb: &Tensor) -> f64 {
    emb.mean_abs()
}

pub fn sample_noise<R: Rng + ?Sized>(shape: &[usize], dist: NoiseDistribution, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = match dist {
        NoiseDistribution::Gaussian => (0..n).map(|_| StandardNormal.sample(rng)).collect(),
        NoiseDistribution::Uniform => {
            let u = Uniform::new_inclusive(-1.0, 1.0).expect("valid bounds");
            (0..n).map(|_| u.sample(rng)).collect()
        }
    };
    Tensor::from_parts(shape.to_vec(), data)
}

/// Perturb `emb` with a caller-supplied noise tensor.
pub fn inject_noise_with(emb: &Tensor, strength: f64, noise: &Tensor) -> Result<Tensor> {
    if strength < 0.0 {
        return Err(Error::Config(format!("noise strength {strength} < 0")));
    }
    if noise.shape() != emb.shape() {
        return Err(Error::Dimension(format!(
            "noise {:?} does not match embedding {:?}",
            noise.shape(),
            emb.shape()
        )));
    }
    if strength == 0.0 {
        return Ok(emb.clone());
    }
    let scale = strength * adaptive_scale(emb);
    let data = emb.data().iter().zip(noise.data()).map(|(e, n)| e + scale * n).collect();
    Tensor::new(emb.shape().to_vec(), data)
}

pub fn inject_noise<R: Rng + ?Sized>(emb: &Tensor, cfg: &NoiseConfig, rng: &mut R) -> Result<Tensor> {
    cfg.validate()?;
    if cfg.strength == 0.0 {
        return Ok(emb.clone());
    }
    let n = sample_noise(emb.shape(), cfg.distribution, rng);
    inject_noise_with(emb, cfg.strength, &n)
}

/// Graph form: the perturbation enters as a constant addend.
pub fn inject_noise_var<R: Rng + ?Sized>(g: &mut Graph, emb: Var, cfg: &NoiseConfig, rng: &mut R) -> Result<Var> {
    cfg.validate()?;
    if cfg.strength == 0.0 {
        return Ok(emb);
    }
    let value = g.value(emb);
    let scale = cfg.strength * adaptive_scale(value);
    let noise = sample_noise(value.shape(), cfg.distribution, rng).map(|n| scale * n);
    let noise = g.constant(noise);
    g.add(emb, noise)
}
