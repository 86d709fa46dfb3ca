use std::collections::HashSet;
use std::fmt;

use crate::error::{Error, Result};
use crate::par;

/// Longest block that may be shifted.
pub const MAX_SHIFT_LEN: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct TerReport {
    /// Percent.
    pub score: f64,
    pub edits: usize,
    pub ref_len: usize,
}

impl fmt::Display for TerReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TER = {:.2}", self.score)
    }
}

/// Word-level Levenshtein distance.
pub fn edit_distance(hyp: &[&str], reference: &[&str]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

fn shifted<'a>(hyp: &[&'a str], start: usize, len: usize, dest: usize) -> Vec<&'a str> {
    let mut rest: Vec<&str> = hyp[..start].iter().chain(&hyp[start + len..]).copied().collect();
    let block = &hyp[start..start + len];
    rest.splice(dest..dest, block.iter().copied());
    rest
}

/// Edits for one sentence: block shifts plus the remaining edit distance.
///
/// Shifts are chosen greedily: among every block of up to
/// [`MAX_SHIFT_LEN`] words that also occurs in the reference, moved to any
/// other position, take the one leaving the smallest edit distance. A shift
/// is applied only if it lowers the distance by more than its own cost of 1.
pub fn sentence_edits(hyp: &[&str], reference: &[&str], allow_shifts: bool) -> usize {
    let mut cur: Vec<&str> = hyp.to_vec();
    let mut dist = edit_distance(&cur, reference);
    let mut shifts = 0;
    if allow_shifts {
        let ref_blocks: HashSet<&[&str]> = (1..=MAX_SHIFT_LEN)
            .flat_map(|n| reference.windows(n))
            .collect();
        while dist > 1 {
            let mut best: Option<(usize, Vec<&str>)> = None;
            for start in 0..cur.len() {
                for len in 1..=MAX_SHIFT_LEN.min(cur.len() - start) {
                    if !ref_blocks.contains(&cur[start..start + len]) {
                        continue;
                    }
                    for dest in 0..=cur.len() - len {
                        if dest == start {
                            continue;
                        }
                        let cand = shifted(&cur, start, len, dest);
                        let d = edit_distance(&cand, reference);
                        if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                            best = Some((d, cand));
                        }
                    }
                }
            }
            match best {
                Some((d, cand)) if d + 1 < dist => {
                    cur = cand;
                    dist = d;
                    shifts += 1;
                }
                _ => break,
            }
        }
    }
    shifts + dist
}

fn corpus_ter<H, R>(hyps: &[H], refs: &[R], allow_shifts: bool, parallel: bool) -> Result<TerReport>
where
    H: AsRef<str> + Sync,
    R: AsRef<str> + Sync,
{
    super::check_aligned(hyps.len(), refs.len())?;
    if let Some(i) = refs.iter().position(|r| r.as_ref().split_whitespace().next().is_none()) {
        return Err(Error::Data(format!("reference line {} is empty", i + 1)));
    }
    let pairs: Vec<(&str, &str)> = hyps.iter().map(AsRef::as_ref).zip(refs.iter().map(AsRef::as_ref)).collect();
    let one = |&(h, r): &(&str, &str)| {
        let h: Vec<&str> = h.split_whitespace().collect();
        let r: Vec<&str> = r.split_whitespace().collect();
        (sentence_edits(&h, &r, allow_shifts), r.len())
    };
    let per = if parallel {
        par::map_ordered(&pairs, one)
    } else {
        par::map_ordered_seq(&pairs, one)
    };
    let edits: usize = per.iter().map(|p| p.0).sum();
    let ref_len: usize = per.iter().map(|p| p.1).sum();
    Ok(TerReport {
        score: 100.0 * edits as f64 / ref_len as f64,
        edits,
        ref_len,
    })
}

/// Corpus TER with shifts: total edits over total reference words.
pub fn ter<H: AsRef<str> + Sync, R: AsRef<str> + Sync>(hyps: &[H], refs: &[R]) -> Result<TerReport> {
    corpus_ter(hyps, refs, true, true)
}

/// TER with a choice of shift search and parallelism.
pub fn ter_with<H: AsRef<str> + Sync, R: AsRef<str> + Sync>(hyps: &[H], refs: &[R], allow_shifts: bool, parallel: bool) -> Result<TerReport> {
    corpus_ter(hyps, refs, allow_shifts, parallel)
}
