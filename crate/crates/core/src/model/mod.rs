mod config;
mod noise;
mod params;
mod transformer;

pub use config::{ModelConfig, NoiseConfig, NoiseDistribution};
pub(crate) use config::parse;
pub use noise::{adaptive_scale, inject_noise, inject_noise_var, inject_noise_with, sample_noise};
pub use params::{allowed_from_bias, apply_bias_mask, init_params, Params, CLASSIFIER_BIAS, EMBEDDING, MASKED_BIAS};
pub use transformer::{positional_encoding, shift_targets, Encoded, Forward, Model};
