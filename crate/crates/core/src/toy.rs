//! Synthetic post-editing task for desk-scale experiments.
//!
//! Post-edits are random word strings. The source is a word-by-word
//! translation of the post-edit through a fixed bijection, and the MT is the
//! post-edit with a share of words substituted or deleted.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::path::Path;
use std::time::Instant;

use crate::data::{build_vocab, encode_triples, TextTriple, Triple, Vocabulary};
use crate::decoding::{decode_corpus, DecodeConfig};
use crate::error::{Error, Result};
use crate::evaluation::bleu;
use crate::model::Model;
use crate::training::{average_checkpoints, Checkpoint, CheckpointStore, TrainConfig, Trainer};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyConfig {
    /// Distinct post-edit words (and source words).
    pub words: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Per-word probability of an MT error; half substitutions, half deletions.
    pub error_rate: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            words: 16,
            min_len: 4,
            max_len: 9,
            error_rate: 0.15,
        }
    }
}

/// A fixed task: the source bijection is drawn once from `seed`.
#[derive(Clone, Debug)]
pub struct ToyTask {
    cfg: ToyConfig,
    mapping: Vec<usize>,
}

impl ToyTask {
    pub fn new(cfg: ToyConfig, seed: u64) -> Result<Self> {
        if cfg.words < 2 || cfg.min_len == 0 || cfg.min_len > cfg.max_len {
            return Err(Error::Config(
                "toy task needs at least 2 words and 1 <= min_len <= max_len".into(),
            ));
        }
        if !(0.0..=1.0).contains(&cfg.error_rate) {
            return Err(Error::Config(format!("error rate {} outside [0, 1]", cfg.error_rate)));
        }
        let mut mapping: Vec<usize> = (0..cfg.words).collect();
        mapping.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { cfg, mapping })
    }

    pub fn pe_word(k: usize) -> String {
        format!("w{k}")
    }

    pub fn src_word(&self, k: usize) -> String {
        format!("s{}", self.mapping[k])
    }

    /// `n` triples drawn with `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<TextTriple> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.one(&mut rng)).collect()
    }

    fn one<R: Rng>(&self, rng: &mut R) -> TextTriple {
        let c = &self.cfg;
        let len = rng.random_range(c.min_len..=c.max_len);
        let pe: Vec<usize> = (0..len).map(|_| rng.random_range(0..c.words)).collect();
        let mut mt = Vec::with_capacity(len);
        for &w in &pe {
            if rng.random::<f64>() < c.error_rate {
                if rng.random::<bool>() {
                    let other = (w + rng.random_range(1..c.words)) % c.words;
                    mt.push(Self::pe_word(other));
                }
            } else {
                mt.push(Self::pe_word(w));
            }
        }
        if mt.is_empty() {
            mt.push(Self::pe_word(pe[0]));
        }
        TextTriple {
            src: pe.iter().map(|&w| self.src_word(w)).collect(),
            mt,
            pe: pe.iter().map(|&w| Self::pe_word(w)).collect(),
        }
    }
}

/// Space-joined lines of one side.
pub fn side_lines(triples: &[TextTriple], side: impl Fn(&TextTriple) -> &Vec<String>) -> Vec<String> {
    triples.iter().map(|t| side(t).join(" ")).collect()
}

/// Settings of one end-to-end toy run.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub task: ToyConfig,
    pub task_seed: u64,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

/// What a toy run measured.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    /// BLEU of the MT itself against the post-edits of the test set.
    pub baseline_bleu: f64,
    /// Test BLEU of the averaged models plus the best-perplexity model.
    pub ensemble_bleu: f64,
    /// Dev BLEU of each averaged model.
    pub averaged_dev_bleu: Vec<f64>,
    pub steps: u64,
    pub dev_perplexity: Vec<f64>,
    pub seconds: f64,
}

impl ExperimentOutcome {
    /// Max minus min dev BLEU across the averaged models.
    pub fn spread(&self) -> f64 {
        let max = self.averaged_dev_bleu.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = self.averaged_dev_bleu.iter().cloned().fold(f64::INFINITY, f64::min);
        max - min
    }
}

fn decode_bleu(models: &[Model], data: &[Triple], refs: &[String], vocab: &Vocabulary, cfg: DecodeConfig) -> Result<f64> {
    let pairs: Vec<(Vec<u32>, Vec<u32>)> = data.iter().map(|t| (t.src.clone(), t.mt.clone())).collect();
    let hyps: Vec<String> = decode_corpus(models, &pairs, cfg)?
        .iter()
        .map(|h| vocab.decode(h.content()).join(" "))
        .collect();
    Ok(bleu(&hyps, refs)?.score)
}

/// Generates the task, trains with checkpoints under `dir`, averages,
/// decodes and scores.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<ExperimentOutcome> {
    let start = Instant::now();
    let task = ToyTask::new(cfg.task, cfg.task_seed)?;
    let train = task.sample(cfg.train_size, cfg.task_seed.wrapping_add(1));
    let dev = task.sample(cfg.dev_size, cfg.task_seed.wrapping_add(2));
    let test = task.sample(cfg.test_size, cfg.task_seed.wrapping_add(3));

    let side = |ts: &[TextTriple], f: fn(&TextTriple) -> &Vec<String>| ts.iter().map(f).cloned().collect::<Vec<_>>();
    let vocab = build_vocab(&side(&train, |t| &t.src), &side(&train, |t| &t.mt), &side(&train, |t| &t.pe));
    let (train_ids, dev_ids, test_ids) = (
        encode_triples(&train, &vocab),
        encode_triples(&dev, &vocab),
        encode_triples(&test, &vocab),
    );

    let mut store = CheckpointStore::new(dir, cfg.train.keep_last)?;
    let mut trainer = Trainer::new(cfg.train.clone(), vocab.pe_allowed())?;
    let summary = trainer.run(&train_ids, &dev_ids, Some(&mut store), &mut std::io::sink())?;

    let ckpts = store.load_all()?;
    let averaged: Vec<Model> = average_checkpoints(&ckpts, cfg.train.average_window)?
        .into_iter()
        .map(Checkpoint::into_model)
        .collect();
    let dev_refs = side_lines(&dev, |t| &t.pe);
    let averaged_dev_bleu = averaged
        .iter()
        .map(|m| decode_bleu(std::slice::from_ref(m), &dev_ids, &dev_refs, &vocab, cfg.decode))
        .collect::<Result<Vec<_>>>()?;

    let mut members = averaged;
    members.push(Checkpoint::load(&store.best_path())?.into_model());
    let test_refs = side_lines(&test, |t| &t.pe);
    let ensemble_bleu = decode_bleu(&members, &test_ids, &test_refs, &vocab, cfg.decode)?;
    let baseline_bleu = bleu(&side_lines(&test, |t| &t.mt), &test_refs)?.score;
    Ok(ExperimentOutcome {
        baseline_bleu,
        ensemble_bleu,
        averaged_dev_bleu,
        steps: summary.steps,
        dev_perplexity: summary.dev_perplexity,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn source_is_a_bijection_of_the_post_edit() {
        let task = ToyTask::new(ToyConfig::default(), 3).unwrap();
        for t in task.sample(50, 1) {
            assert_eq!(t.src.len(), t.pe.len());
            for (s, p) in t.src.iter().zip(&t.pe) {
                let k: usize = p[1..].parse().unwrap();
                assert_eq!(s, &task.src_word(k));
            }
            assert!(!t.mt.is_empty() && t.mt.len() <= t.pe.len());
        }
    }

    #[test]
    fn error_rate_is_respected() {
        let task = ToyTask::new(ToyConfig::default(), 3).unwrap();
        let data = task.sample(4000, 2);
        let pe: usize = data.iter().map(|t| t.pe.len()).sum();
        let mt: usize = data.iter().map(|t| t.mt.len()).sum();
        let deleted = (pe - mt) as f64 / pe as f64;
        assert!((deleted - 0.075).abs() < 0.01, "{deleted}");
    }

    #[test]
    fn zero_error_rate_copies() {
        let cfg = ToyConfig { error_rate: 0.0, ..ToyConfig::default() };
        let task = ToyTask::new(cfg, 1).unwrap();
        assert!(task.sample(20, 5).iter().all(|t| t.mt == t.pe));
    }
}
