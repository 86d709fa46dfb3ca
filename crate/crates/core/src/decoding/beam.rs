use std::cmp::Ordering;

use crate::data::{BOS_ID, EOS_ID, PAD_ID};
use crate::error::{Error, Result};

/// Next-token distributions for a batch of equal-length prefixes. Every
/// prefix starts with BOS.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn next_probs(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>>;
}

impl<S: StepScorer + ?Sized> StepScorer for &S {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn next_probs(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        (**self).next_probs(prefixes)
    }
}

/// Log of the arithmetic mean of the members' probabilities.
pub fn ensemble_step<S: StepScorer>(members: &[S], prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
    let first = members
        .first()
        .ok_or_else(|| Error::Ensemble("ensemble has no members".into()))?;
    let v = first.vocab_size();
    if let Some(m) = members.iter().find(|m| m.vocab_size() != v) {
        return Err(Error::Ensemble(format!(
            "member vocabulary of {} differs from {v}",
            m.vocab_size()
        )));
    }
    let mut sum = vec![vec![0.0; v]; prefixes.len()];
    for m in members {
        let probs = m.next_probs(prefixes)?;
        if probs.len() != prefixes.len() || probs.iter().any(|p| p.len() != v) {
            return Err(Error::Ensemble("member returned a malformed distribution".into()));
        }
        for (acc, p) in sum.iter_mut().zip(&probs) {
            for (a, b) in acc.iter_mut().zip(p) {
                *a += b;
            }
        }
    }
    let k = members.len() as f64;
    Ok(sum
        .into_iter()
        .map(|row| row.into_iter().map(|p| (p / k).ln()).collect())
        .collect())
}

/// A decoded prefix without the leading BOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    /// Sum of per-step log-probabilities, no length normalisation.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens without the terminal EOS.
    pub fn content(&self) -> &[u32] {
        match self.tokens.split_last() {
            Some((&EOS_ID, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

fn better(a: (f64, &[u32]), b: (f64, &[u32])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Beam search over the ensemble distribution.
///
/// Each live hypothesis proposes its `beam` best continuations; the `beam`
/// best candidates overall survive, finished ones (ending in EOS) are set
/// aside. Stops once `beam` hypotheses are finished or `max_len` tokens
/// (EOS included) are generated. PAD and BOS are never proposed.
pub fn beam_search<S: StepScorer>(members: &[S], beam: usize, max_len: usize) -> Result<Hypothesis> {
    if beam == 0 || max_len == 0 {
        return Err(Error::Config("beam size and max_len must be at least 1".into()));
    }
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let prefixes: Vec<Vec<u32>> = live
            .iter()
            .map(|h| std::iter::once(BOS_ID).chain(h.tokens.iter().copied()).collect())
            .collect();
        let refs: Vec<&[u32]> = prefixes.iter().map(Vec::as_slice).collect();
        let logp = ensemble_step(members, &refs)?;

        let mut candidates: Vec<Hypothesis> = Vec::new();
        for (h, lp) in live.iter().zip(&logp) {
            let mut ids: Vec<u32> = (0..lp.len() as u32)
                .filter(|&t| t != PAD_ID && t != BOS_ID && lp[t as usize] > f64::NEG_INFINITY)
                .collect();
            ids.sort_by(|&a, &b| lp[b as usize].total_cmp(&lp[a as usize]).then(a.cmp(&b)));
            for &t in ids.iter().take(beam) {
                let mut tokens = h.tokens.clone();
                tokens.push(t);
                candidates.push(Hypothesis {
                    tokens,
                    score: h.score + lp[t as usize],
                    finished: t == EOS_ID,
                });
            }
        }
        if candidates.is_empty() {
            break;
        }
        candidates.sort_by(|a, b| better((a.score, &a.tokens), (b.score, &b.tokens)));
        candidates.truncate(beam);
        live.clear();
        for c in candidates {
            if c.finished {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        if finished.len() >= beam || live.is_empty() {
            break;
        }
    }
    let pool = if finished.is_empty() { &mut live } else { &mut finished };
    pool.sort_by(|a, b| better((a.score, &a.tokens), (b.score, &b.tokens)));
    pool.first()
        .cloned()
        .ok_or_else(|| Error::Input("no token could be generated".into()))
}

/// Argmax decoding, lowest id on ties.
pub fn greedy<S: StepScorer>(members: &[S], max_len: usize) -> Result<Hypothesis> {
    let mut h = Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
    };
    while h.tokens.len() < max_len && !h.finished {
        let prefix: Vec<u32> = std::iter::once(BOS_ID).chain(h.tokens.iter().copied()).collect();
        let lp = ensemble_step(members, &[&prefix])?.remove(0);
        let best = (0..lp.len() as u32)
            .filter(|&t| t != PAD_ID && t != BOS_ID && lp[t as usize] > f64::NEG_INFINITY)
            .max_by(|&a, &b| lp[a as usize].total_cmp(&lp[b as usize]).then(b.cmp(&a)));
        let Some(t) = best else { break };
        h.tokens.push(t);
        h.score += lp[t as usize];
        h.finished = t == EOS_ID;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Distribution picked by prefix length and last token.
    struct Table(Vec<Vec<f64>>);

    impl StepScorer for Table {
        fn vocab_size(&self) -> usize {
            self.0[0].len()
        }

        fn next_probs(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
            Ok(prefixes
                .iter()
                .map(|p| self.0[(p.len() - 1 + *p.last().unwrap() as usize) % self.0.len()].clone())
                .collect())
        }
    }

    #[test]
    fn ensemble_arithmetic() {
        let a = Table(vec![vec![1.0, 0.0]]);
        let b = Table(vec![vec![0.0, 1.0]]);
        let lp = ensemble_step(&[a, b], &[&[1]]).unwrap();
        assert_eq!(lp[0], vec![0.5f64.ln(), 0.5f64.ln()]);
    }

    #[test]
    fn ensemble_of_identical_members() {
        let row = vec![0.1, 0.2, 0.3, 0.4];
        let one = ensemble_step(&[Table(vec![row.clone()])], &[&[1]]).unwrap();
        let three = ensemble_step(&[Table(vec![row.clone()]), Table(vec![row.clone()]), Table(vec![row])], &[&[1]]).unwrap();
        for (a, b) in one[0].iter().zip(&three[0]) {
            assert!((a - b).abs() < 1e-6);
        }
        let total: f64 = three[0].iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn vocabulary_disagreement() {
        let err = ensemble_step(&[Table(vec![vec![1.0]]), Table(vec![vec![0.5, 0.5]])], &[&[1]]);
        assert!(matches!(err, Err(Error::Ensemble(_))));
    }

    #[test]
    fn greedy_trap_is_escaped_by_wider_beam() {
        // ids: 0 PAD, 1 BOS, 2 EOS, 3, 4. From BOS: 3 looks best but every
        // continuation after 3 is poor, while 4 leads to a sure EOS.
        struct Trap;
        impl StepScorer for Trap {
            fn vocab_size(&self) -> usize {
                5
            }
            fn next_probs(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
                Ok(prefixes
                    .iter()
                    .map(|p| match p {
                        [1] => vec![0.0, 0.0, 0.0, 0.6, 0.4],
                        [1, 3, ..] => vec![0.0, 0.0, 0.34, 0.33, 0.33],
                        _ => vec![0.0, 0.0, 1.0, 0.0, 0.0],
                    })
                    .collect())
            }
        }
        let g = greedy(&[Trap], 4).unwrap();
        let b = beam_search(&[Trap], 2, 4).unwrap();
        assert_eq!(g.tokens, vec![3, 2]);
        assert_eq!(b.tokens, vec![4, 2]);
        assert!(b.score > g.score);
        assert_eq!(beam_search(&[Trap], 1, 4).unwrap(), g);
    }

    #[test]
    fn unfinished_fallback_and_masking() {
        let t = Table(vec![vec![0.5, 0.5, 0.0, 0.0, 1.0]]);
        let h = beam_search(&[t], 3, 3).unwrap();
        assert!(!h.finished);
        assert_eq!(h.tokens, vec![4, 4, 4]);
        assert!(h.tokens.iter().all(|&t| t != PAD_ID && t != BOS_ID));
    }

    #[test]
    fn bad_arguments() {
        let t = Table(vec![vec![0.0, 0.0, 1.0]]);
        assert!(beam_search(&[&t], 0, 3).is_err());
        assert!(beam_search(&[&t], 2, 0).is_err());
    }
}
