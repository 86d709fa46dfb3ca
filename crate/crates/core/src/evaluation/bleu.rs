use std::collections::HashMap;
use std::fmt;

use crate::error::Result;

/// Corpus BLEU in the multi-bleu convention: case-sensitive, clipped
/// n-gram counts summed over the corpus, no smoothing.
#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    /// Percent.
    pub score: f64,
    /// Modified precisions for n = 1..4, as fractions.
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub ratio: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub matches: [usize; 4],
    pub totals: [usize; 4],
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.precisions.map(|p| format!("{:.1}", 100.0 * p));
        write!(
            f,
            "BLEU = {:.2}, {} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.score,
            p.join("/"),
            self.brevity_penalty,
            self.ratio,
            self.hyp_len,
            self.ref_len
        )
    }
}

fn ngrams<'t>(tokens: &'t [&str], n: usize) -> HashMap<&'t [&'t str], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Clipped matches and candidate n-gram totals for one sentence pair.
pub fn sentence_stats(hyp: &str, reference: &str) -> ([usize; 4], [usize; 4], usize, usize) {
    let h: Vec<&str> = hyp.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    let mut matches = [0; 4];
    let mut totals = [0; 4];
    for n in 1..=4 {
        let hc = ngrams(&h, n);
        let rc = ngrams(&r, n);
        totals[n - 1] = h.len().saturating_sub(n - 1);
        matches[n - 1] = hc
            .iter()
            .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
            .sum();
    }
    (matches, totals, h.len(), r.len())
}

pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<BleuReport> {
    super::check_aligned(hyps.len(), refs.len())?;
    let mut matches = [0; 4];
    let mut totals = [0; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let (m, t, hl, rl) = sentence_stats(h.as_ref(), r.as_ref());
        for n in 0..4 {
            matches[n] += m[n];
            totals[n] += t[n];
        }
        hyp_len += hl;
        ref_len += rl;
    }
    Ok(report(matches, totals, hyp_len, ref_len))
}

fn report(matches: [usize; 4], totals: [usize; 4], hyp_len: usize, ref_len: usize) -> BleuReport {
    let precisions: [f64; 4] =
        std::array::from_fn(|n| if totals[n] == 0 { 0.0 } else { matches[n] as f64 / totals[n] as f64 });
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        100.0 * brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp()
    };
    BleuReport {
        score,
        precisions,
        brevity_penalty,
        ratio: if ref_len == 0 { 0.0 } else { hyp_len as f64 / ref_len as f64 },
        hyp_len,
        ref_len,
        matches,
        totals,
    }
}
