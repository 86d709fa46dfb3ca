//! Multi-source transformer for automatic post-editing, trained jointly with
//! a de-noising task on adaptively perturbed post-edit embeddings.

pub mod data;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod par;
pub mod toy;
pub mod training;

pub use error::{Error, Result};
