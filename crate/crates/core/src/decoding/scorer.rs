use super::beam::{beam_search, Hypothesis, StepScorer};
use crate::data::{SideBatch, BOS_ID, EOS_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::model::{Forward, Model};
use crate::numerics::Tensor;
use crate::par;

/// One model conditioned on one (source, MT) pair. Encoder outputs are
/// computed once; each step re-runs the decoder over the full prefixes.
pub struct TransformerScorer<'m> {
    model: &'m Model,
    src: (Tensor, Tensor),
    mt: (Tensor, Tensor),
}

impl<'m> TransformerScorer<'m> {
    /// `src` and `mt` are BOS/EOS-delimited id sequences.
    pub fn new(model: &'m Model, src: &[u32], mt: &[u32]) -> Result<Self> {
        let mut fwd = Forward::inference(model);
        let s = fwd.encode_source(&SideBatch::from_sequences(&[src]))?;
        let m = fwd.encode_mt(&SideBatch::from_sequences(&[mt]), &s, None)?;
        let g = fwd.graph();
        let take = |v| g.value(v).clone();
        Ok(Self {
            model,
            src: (take(s.repr), take(s.mask)),
            mt: (take(m.repr), take(m.mask)),
        })
    }
}

impl StepScorer for TransformerScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn next_probs(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        let side = SideBatch::from_sequences(prefixes);
        if side.lens.iter().any(|&l| l != side.len) {
            return Err(Error::Dimension("prefixes in one step must share a length".into()));
        }
        let mut fwd = Forward::inference(self.model);
        let s = fwd.constant_encoding(&self.src.0, &self.src.1);
        let m = fwd.constant_encoding(&self.mt.0, &self.mt.1);
        let dec = fwd.decode_states(&side, &s, &m)?;
        let z = fwd.logits(dec)?;
        let p = fwd.graph_mut().softmax(z, 2)?;
        let v = self.vocab_size();
        let data = fwd.graph().value(p).data();
        Ok((0..side.batch)
            .map(|r| {
                let at = (r * side.len + side.len - 1) * v;
                data[at..at + v].to_vec()
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Generation budget beyond the MT length (EOS included).
    pub extra_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam: 4, extra_len: 50 }
    }
}

fn content_len(ids: &[u32]) -> usize {
    ids.iter().filter(|&&i| !matches!(i, PAD_ID | BOS_ID | EOS_ID)).count()
}

/// Beam-decodes one pair with an ensemble of models.
pub fn decode_pair(models: &[Model], src: &[u32], mt: &[u32], cfg: DecodeConfig) -> Result<Hypothesis> {
    if content_len(src) == 0 || content_len(mt) == 0 {
        return Err(Error::Input("source and MT must both be non-empty".into()));
    }
    let v = models
        .first()
        .ok_or_else(|| Error::Ensemble("no models given".into()))?
        .config
        .vocab_size;
    if models.iter().any(|m| m.config.vocab_size != v) {
        return Err(Error::Ensemble("models disagree on vocabulary size".into()));
    }
    let scorers = models
        .iter()
        .map(|m| TransformerScorer::new(m, src, mt))
        .collect::<Result<Vec<_>>>()?;
    beam_search(&scorers, cfg.beam, content_len(mt) + cfg.extra_len)
}

/// Decodes every pair; sentences run in parallel when the feature is on.
pub fn decode_corpus(models: &[Model], pairs: &[(Vec<u32>, Vec<u32>)], cfg: DecodeConfig) -> Result<Vec<Hypothesis>> {
    par::map_ordered(pairs, |(s, m)| decode_pair(models, s, m, cfg))
        .into_iter()
        .collect()
}

/// Sequential twin of [`decode_corpus`].
pub fn decode_corpus_seq(models: &[Model], pairs: &[(Vec<u32>, Vec<u32>)], cfg: DecodeConfig) -> Result<Vec<Hypothesis>> {
    par::map_ordered_seq(pairs, |(s, m)| decode_pair(models, s, m, cfg))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model(seed: u64) -> Model {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            d_ffn: 16,
            n_heads: 2,
            dropout: 0.1,
            max_positions: 64,
            vocab_size: 12,
        };
        let mut allowed = [true; 12];
        allowed[10] = false;
        allowed[11] = false;
        Model::new(cfg, &allowed, seed).unwrap()
    }

    #[test]
    fn scorer_matches_full_forward() {
        let m = model(2);
        let (src, mt) = (vec![1, 4, 5, 2], vec![1, 6, 2]);
        let sc = TransformerScorer::new(&m, &src, &mt).unwrap();
        let p = sc.next_probs(&[&[1, 7], &[1, 8]]).unwrap();
        assert_eq!(p.len(), 2);
        for row in &p {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(row[10], 0.0);
        }
        let single = sc.next_probs(&[&[1, 8]]).unwrap();
        for (a, b) in single[0].iter().zip(&p[1]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn corpus_decoding_is_deterministic_and_masked() {
        let models = [model(1), model(2)];
        let pairs: Vec<(Vec<u32>, Vec<u32>)> = (0..6u32).map(|i| (vec![1, 4 + i, 2], vec![1, 5 + i % 3, 6, 2])).collect();
        let cfg = DecodeConfig { beam: 3, extra_len: 4 };
        let a = decode_corpus(&models, &pairs, cfg).unwrap();
        let b = decode_corpus_seq(&models, &pairs, cfg).unwrap();
        assert_eq!(a, b);
        for h in &a {
            assert!(h.tokens.iter().all(|&t| t != 10 && t != 11 && t != PAD_ID));
            assert!(h.tokens.iter().filter(|&&t| t == EOS_ID).count() <= 1);
        }
    }

    #[test]
    fn empty_input_rejected() {
        let m = [model(1)];
        let r = decode_pair(&m, &[1, 2], &[1, 4, 2], DecodeConfig::default());
        assert!(matches!(r, Err(Error::Input(_))));
    }
}
