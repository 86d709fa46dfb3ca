//! Beam-search generation with probability-averaging ensembles.

mod beam;
mod scorer;

pub use beam::{beam_search, ensemble_step, greedy, Hypothesis, StepScorer};
pub use scorer::{decode_corpus, decode_corpus_seq, decode_pair, DecodeConfig, TransformerScorer};
