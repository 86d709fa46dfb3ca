//! Corpus BLEU and TER.

mod bleu;
mod ter;

use std::fmt;
use std::path::Path;

pub use bleu::{bleu, sentence_stats, BleuReport};
pub use ter::{edit_distance, sentence_edits, ter, ter_with, TerReport, MAX_SHIFT_LEN};

use crate::data::read_lines;
use crate::error::{Error, Result};

pub(crate) fn check_aligned(hyps: usize, refs: usize) -> Result<()> {
    if hyps != refs {
        return Err(Error::Alignment {
            left: "hypothesis".into(),
            left_lines: hyps,
            right: "reference".into(),
            right_lines: refs,
        });
    }
    Ok(())
}

/// Which metrics to compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Bleu,
    Ter,
    Both,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bleu" => Ok(Self::Bleu),
            "ter" => Ok(Self::Ter),
            "both" => Ok(Self::Both),
            _ => Err(Error::Config(format!("unknown metric '{s}' (expected bleu, ter or both)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub bleu: Option<BleuReport>,
    pub ter: Option<TerReport>,
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(b) = &self.bleu {
            writeln!(f, "{b}")?;
        }
        if let Some(t) = &self.ter {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }
}

pub fn score<H, R>(hyps: &[H], refs: &[R], metric: Metric) -> Result<ScoreReport>
where
    H: AsRef<str> + Sync,
    R: AsRef<str> + Sync,
{
    let want_bleu = matches!(metric, Metric::Bleu | Metric::Both);
    let want_ter = matches!(metric, Metric::Ter | Metric::Both);
    Ok(ScoreReport {
        bleu: want_bleu.then(|| bleu(hyps, refs)).transpose()?,
        ter: want_ter.then(|| ter(hyps, refs)).transpose()?,
    })
}

fn read_pair(hyp: &Path, reference: &Path) -> Result<(Vec<String>, Vec<String>)> {
    let (h, r) = (read_lines(hyp)?, read_lines(reference)?);
    if h.len() != r.len() {
        return Err(Error::Alignment {
            left: hyp.display().to_string(),
            left_lines: h.len(),
            right: reference.display().to_string(),
            right_lines: r.len(),
        });
    }
    Ok((h, r))
}

pub fn score_files(hyp: &Path, reference: &Path, metric: Metric) -> Result<ScoreReport> {
    let (h, r) = read_pair(hyp, reference)?;
    score(&h, &r, metric)
}

/// BLEU and TER of the MT file scored against the post-edit file: how far
/// the raw translations already are from their corrections.
pub fn compare_corpora(mt: &Path, pe: &Path) -> Result<ScoreReport> {
    score_files(mt, pe, Metric::Both)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        std::fs::write(&p, "a b c d\ne f g h i\n").unwrap();
        let r = compare_corpora(&p, &p).unwrap();
        assert_eq!(r.to_string(), "BLEU = 100.00, 100.0/100.0/100.0/100.0 (BP=1.000, ratio=1.000, hyp_len=9, ref_len=9)\nTER = 0.00\n");
    }

    #[test]
    fn mismatched_files_name_both() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.mt"), dir.path().join("b.pe"));
        std::fs::write(&a, "x\n").unwrap();
        std::fs::write(&b, "x\ny\n").unwrap();
        let e = compare_corpora(&a, &b).unwrap_err().to_string();
        assert!(e.contains("a.mt") && e.contains("b.pe"), "{e}");
    }
}
