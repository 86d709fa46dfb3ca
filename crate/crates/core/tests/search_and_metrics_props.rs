use std::hash::{DefaultHasher, Hash, Hasher};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use postedit::data::{BOS_ID, EOS_ID, PAD_ID};
use postedit::decoding::{beam_search, greedy, StepScorer};
use postedit::evaluation::{bleu, edit_distance, sentence_edits, sentence_stats, ter, ter_with};
use postedit::Result;

/// Pseudo-random distribution for every prefix, fixed by `seed`.
struct Random {
    seed: u64,
    vocab: usize,
}

impl StepScorer for Random {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_probs(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes
            .iter()
            .map(|p| {
                let mut h = DefaultHasher::new();
                (self.seed, p).hash(&mut h);
                let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
                let w: Vec<f64> = (0..self.vocab).map(|_| rng.random_range(0.01..1.0)).collect();
                let z: f64 = w.iter().sum();
                w.into_iter().map(|x| x / z).collect()
            })
            .collect())
    }
}

/// Explicit per-prefix distributions, EOS-certain elsewhere.
struct Table(Vec<(Vec<u32>, Vec<f64>)>);

impl StepScorer for Table {
    fn vocab_size(&self) -> usize {
        7
    }

    fn next_probs(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes
            .iter()
            .map(|p| {
                self.0.iter().find(|(k, _)| k.as_slice() == &p[1..]).map(|(_, d)| d.clone()).unwrap_or_else(|| {
                    let mut d = vec![0.0; 7];
                    d[EOS_ID as usize] = 1.0;
                    d
                })
            })
            .collect())
    }
}

/// Log-probability of `tokens` under the ensemble, step by step.
fn path_scores(members: &[Random], tokens: &[u32]) -> Vec<f64> {
    let mut prefix = vec![BOS_ID];
    let mut acc = 0.0;
    let mut out = vec![0.0];
    for &t in tokens {
        let mean: f64 = members.iter().map(|m| m.next_probs(&[&prefix]).unwrap()[0][t as usize]).sum::<f64>()
            / members.len() as f64;
        acc += mean.ln();
        out.push(acc);
        prefix.push(t);
    }
    out
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec("[a-e]", 1..9).prop_map(|w| w.join(" "))
}

fn corpus() -> impl Strategy<Value = Vec<(String, String)>> {
    prop::collection::vec((sentence(), sentence()), 1..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn beam_output_is_well_formed(seeds in prop::collection::vec(any::<u64>(), 1..3), beam in 1usize..5, max_len in 1usize..7) {
        let members: Vec<Random> = seeds.iter().map(|&seed| Random { seed, vocab: 6 }).collect();
        let h = beam_search(&members, beam, max_len).unwrap();
        prop_assert!(!h.tokens.is_empty() && h.tokens.len() <= max_len);
        prop_assert!(!h.tokens.contains(&PAD_ID) && !h.tokens.contains(&BOS_ID));
        let eos = h.tokens.iter().filter(|&&t| t == EOS_ID).count();
        prop_assert!(eos <= 1);
        prop_assert_eq!(h.finished, h.tokens.last() == Some(&EOS_ID));
        // Every extension lowers the score, and the reported total matches.
        let scores = path_scores(&members, &h.tokens);
        prop_assert!(scores.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!((scores.last().unwrap() - h.score).abs() < 1e-9);
    }

    #[test]
    fn exhaustive_beam_is_never_worse_than_greedy(seed in any::<u64>(), max_len in 1usize..4) {
        // Four proposable tokens, so 4^3 covers every path.
        let members = [Random { seed, vocab: 6 }];
        let g = greedy(&members, max_len).unwrap();
        prop_assume!(g.finished);
        let b = beam_search(&members, 64, max_len).unwrap();
        prop_assert!(b.score >= g.score - 1e-12, "beam {} greedy {}", b.score, g.score);
        let narrow = beam_search(&members, 1, max_len).unwrap();
        prop_assert_eq!(narrow, g);
    }

    #[test]
    fn bleu_ignores_sentence_order(pairs in corpus(), rotate in any::<prop::sample::Index>()) {
        let (h, r): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
        let k = rotate.index(pairs.len());
        let mut shuffled = pairs.clone();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let (h2, r2): (Vec<String>, Vec<String>) = shuffled.into_iter().unzip();
        let a = bleu(&h, &r).unwrap();
        let b = bleu(&h2, &r2).unwrap();
        prop_assert!((a.score - b.score).abs() < 1e-9);
        // Without a single 4-gram the precision is 0/0 and multi-bleu scores 0.
        let identity = bleu(&h, &h).unwrap();
        let expected = if identity.totals[3] > 0 { 100.0 } else { 0.0 };
        prop_assert!((identity.score - expected).abs() < 1e-9);
        prop_assert_eq!(ter(&h, &h).unwrap().score, 0.0);
    }

    #[test]
    fn ter_edits_are_bounded_by_plain_edit_distance(h in sentence(), r in sentence()) {
        let hw: Vec<&str> = h.split_whitespace().collect();
        let rw: Vec<&str> = r.split_whitespace().collect();
        let plain = edit_distance(&hw, &rw);
        prop_assert_eq!(sentence_edits(&hw, &rw, false), plain);
        prop_assert!(sentence_edits(&hw, &rw, true) <= plain);
        let no_shift = ter_with(&[&h], &[&r], false, false).unwrap().score;
        let with_shift = ter_with(&[&h], &[&r], true, true).unwrap().score;
        prop_assert!(with_shift <= no_shift);
        prop_assert!((no_shift - 100.0 * plain as f64 / rw.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn removing_a_correct_token_never_adds_unigram_matches(h in sentence(), r in sentence(), pick in any::<prop::sample::Index>()) {
        let hw: Vec<&str> = h.split_whitespace().collect();
        let correct: Vec<usize> = (0..hw.len()).filter(|&i| r.split_whitespace().any(|w| w == hw[i])).collect();
        prop_assume!(!correct.is_empty());
        let i = correct[pick.index(correct.len())];
        let shorter: Vec<&str> = hw.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, w)| *w).collect();
        let (before, ..) = sentence_stats(&h, &r);
        let (after, ..) = sentence_stats(&shorter.join(" "), &r);
        prop_assert!(after[0] <= before[0]);
    }
}

#[test]
fn removing_a_token_can_add_a_bigram_match() {
    // Dropping "b" joins "a c", which the reference contains.
    let (before, ..) = sentence_stats("a b c", "a c b");
    let (after, ..) = sentence_stats("a c", "a c b");
    assert_eq!((before[1], after[1]), (0, 1));
}

#[test]
fn beam_can_lose_to_greedy_when_pruning() {
    let (a, b, c, g, h, i) = (3, 4, 5, 6, 3, 4);
    let dist = |pairs: &[(u32, f64)]| {
        let mut d = vec![0.0; 7];
        for &(t, p) in pairs {
            d[t as usize] = p;
        }
        d
    };
    let table = Table(vec![
        (vec![], dist(&[(a, 0.34), (b, 0.33), (c, 0.33)])),
        // Greedy's path: a, then g at 0.4, then EOS.
        (vec![a], dist(&[(g, 0.4), (3, 0.0), (4, 0.3), (5, 0.3)])),
        // b splits evenly, so both children outrank a-g and push it out of a beam of two.
        (vec![b], dist(&[(h, 0.5), (i, 0.5)])),
        (vec![b, h], dist(&[(EOS_ID, 0.25), (5, 0.75)])),
        (vec![b, i], dist(&[(EOS_ID, 0.25), (5, 0.75)])),
        (vec![b, h, 5], dist(&[(EOS_ID, 0.1), (6, 0.9)])),
        (vec![b, i, 5], dist(&[(EOS_ID, 0.1), (6, 0.9)])),
        (vec![c], dist(&[(EOS_ID, 0.01), (6, 0.99)])),
    ]);
    let members = [table];
    let gr = greedy(&members, 6).unwrap();
    let bm = beam_search(&members, 2, 6).unwrap();
    assert_eq!(gr.tokens, vec![a, g, EOS_ID]);
    assert!(bm.score < gr.score, "beam {} greedy {}", bm.score, gr.score);
    let wide = beam_search(&members, 8, 6).unwrap();
    assert!(wide.score >= gr.score);
}
