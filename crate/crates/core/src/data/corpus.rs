use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{Vocabulary, PAD_ID};
use crate::error::{Error, Result};

/// One (source, MT, post-edit) example as subword tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TextTriple {
    pub src: Vec<String>,
    pub mt: Vec<String>,
    pub pe: Vec<String>,
}

/// One example as BOS/EOS-delimited token ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub src: Vec<u32>,
    pub mt: Vec<u32>,
    pub pe: Vec<u32>,
}

impl Triple {
    /// Number of decoder targets (post-edit tokens plus EOS).
    pub fn pe_tokens(&self) -> usize {
        self.pe.len().saturating_sub(1)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PrepareConfig {
    pub max_len: usize,
    pub upsample_real: usize,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            max_len: 256,
            upsample_real: 20,
        }
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(String::from).collect()
}

/// Reads three parallel files into triples.
pub fn read_triples(src: &Path, mt: &Path, pe: &Path) -> Result<Vec<TextTriple>> {
    let (s, m, p) = (read_lines(src)?, read_lines(mt)?, read_lines(pe)?);
    for (other, lines) in [(mt, &m), (pe, &p)] {
        if lines.len() != s.len() {
            return Err(Error::Alignment {
                left: src.display().to_string(),
                left_lines: s.len(),
                right: other.display().to_string(),
                right_lines: lines.len(),
            });
        }
    }
    Ok(s.iter()
        .zip(&m)
        .zip(&p)
        .map(|((s, m), p)| TextTriple {
            src: tokenize(s),
            mt: tokenize(m),
            pe: tokenize(p),
        })
        .collect())
}

fn keep(t: &TextTriple, max_len: usize) -> bool {
    [&t.src, &t.mt, &t.pe].iter().all(|side| !side.is_empty() && side.len() <= max_len)
}

/// Drops empty or over-long triples, repeats the real data `upsample_real`
/// times and appends the synthetic data once.
pub fn prepare_triples(real: &[TextTriple], synthetic: &[TextTriple], cfg: PrepareConfig) -> Vec<TextTriple> {
    let real: Vec<&TextTriple> = real.iter().filter(|t| keep(t, cfg.max_len)).collect();
    let mut out = Vec::with_capacity(real.len() * cfg.upsample_real + synthetic.len());
    for _ in 0..cfg.upsample_real {
        out.extend(real.iter().map(|t| (*t).clone()));
    }
    out.extend(synthetic.iter().filter(|t| keep(t, cfg.max_len)).cloned());
    out
}

pub fn encode_triples(triples: &[TextTriple], vocab: &Vocabulary) -> Vec<Triple> {
    triples
        .iter()
        .map(|t| Triple {
            src: vocab.encode(&t.src),
            mt: vocab.encode(&t.mt),
            pe: vocab.encode(&t.pe),
        })
        .collect()
}

/// Padded id matrix for one side of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SideBatch {
    /// Row-major `[batch, len]`.
    pub ids: Vec<u32>,
    pub lens: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

impl SideBatch {
    pub fn from_sequences(seqs: &[&[u32]]) -> Self {
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
        let mut ids = vec![PAD_ID; seqs.len() * len];
        for (r, s) in seqs.iter().enumerate() {
            ids[r * len..r * len + s.len()].copy_from_slice(s);
        }
        Self {
            ids,
            lens: seqs.iter().map(|s| s.len()).collect(),
            batch: seqs.len(),
            len,
        }
    }

    /// True exactly at PAD positions.
    pub fn padding_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&i| i == PAD_ID).collect()
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.ids[r * self.len..r * self.len + self.lens[r]]
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub triples: Vec<Triple>,
    pub src: SideBatch,
    pub mt: SideBatch,
    pub pe: SideBatch,
}

impl Batch {
    pub fn new(triples: Vec<Triple>) -> Self {
        let side = |f: fn(&Triple) -> &[u32]| SideBatch::from_sequences(&triples.iter().map(f).collect::<Vec<_>>());
        let src = side(|t| &t.src);
        let mt = side(|t| &t.mt);
        let pe = side(|t| &t.pe);
        Self { triples, src, mt, pe }
    }

    pub fn pe_tokens(&self) -> usize {
        self.triples.iter().map(Triple::pe_tokens).sum()
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

/// Shuffles with `seed`, then greedily fills each batch until it holds at
/// least `min_pe_tokens` decoder targets. Only the last batch may fall short.
pub fn make_batches(triples: &[Triple], min_pe_tokens: usize, seed: u64) -> Result<Vec<Batch>> {
    if triples.is_empty() {
        return Err(Error::Data("no triples to batch".into()));
    }
    if min_pe_tokens == 0 {
        return Err(Error::Config("batch token threshold must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..triples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(batch_in_order(triples, &order, min_pe_tokens))
}

pub(crate) fn batch_in_order(triples: &[Triple], order: &[usize], min_pe_tokens: usize) -> Vec<Batch> {
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut tokens = 0;
    for &i in order {
        tokens += triples[i].pe_tokens();
        current.push(triples[i].clone());
        if tokens >= min_pe_tokens {
            batches.push(Batch::new(std::mem::take(&mut current)));
            tokens = 0;
        }
    }
    if !current.is_empty() {
        batches.push(Batch::new(current));
    }
    batches
}
