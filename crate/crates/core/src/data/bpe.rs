//! Joint byte-pair encoding with a vocabulary-frequency threshold.
//!
//! Merges never cross whitespace. Non-final subwords carry a continuation
//! marker (`@@` by default), so `"abc"` segments as `["ab@@", "c"]`.

use std::cmp::Reverse;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const DEFAULT_MARKER: &str = "@@";
const HEADER: &str = "#bpe-v1";

type Pair = (String, String);

#[derive(Clone, Debug, PartialEq)]
pub struct BpeModel {
    merges: Vec<Pair>,
    ranks: HashMap<Pair, usize>,
    /// merged symbol -> the first merge that produced it
    splits: HashMap<String, Pair>,
    marker: String,
    frequencies: HashMap<String, u64>,
}

fn word_counts<'a>(lines: impl IntoIterator<Item = &'a str>) -> HashMap<String, u64> {
    let mut counts = HashMap::new();
    for line in lines {
        for w in line.split_whitespace() {
            *counts.entry(w.to_string()).or_insert(0) += 1;
        }
    }
    counts
}

fn chars(word: &str) -> Vec<String> {
    word.chars().map(String::from).collect()
}

fn pairs_of(symbols: &[String]) -> impl Iterator<Item = Pair> + '_ {
    symbols.windows(2).map(|w| (w[0].clone(), w[1].clone()))
}

fn merge_pair(symbols: &[String], pair: &Pair) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Pair statistics with a priority order: highest count first, then the
/// lexicographically smallest pair.
#[derive(Default)]
struct PairStats {
    counts: HashMap<Pair, i64>,
    queue: BTreeSet<(Reverse<i64>, Pair)>,
    occurs_in: HashMap<Pair, HashSet<usize>>,
}

impl PairStats {
    fn bump(&mut self, pair: Pair, delta: i64, word: usize) {
        let c = self.counts.entry(pair.clone()).or_insert(0);
        if *c > 0 {
            self.queue.remove(&(Reverse(*c), pair.clone()));
        }
        *c += delta;
        if *c > 0 {
            self.queue.insert((Reverse(*c), pair.clone()));
        }
        if delta > 0 {
            self.occurs_in.entry(pair).or_default().insert(word);
        }
    }

    fn best(&self) -> Option<(i64, Pair)> {
        self.queue.first().map(|(Reverse(c), p)| (*c, p.clone()))
    }
}

/// Learn up to `n_merges` merges from whitespace-tokenised lines. Stops early
/// once no pair occurs at least twice.
pub fn learn_bpe<'a>(lines: impl IntoIterator<Item = &'a str>, n_merges: usize) -> Result<BpeModel> {
    let counts = word_counts(lines);
    if counts.is_empty() {
        return Err(Error::Data("cannot learn BPE from an empty corpus".into()));
    }
    let mut vocab: Vec<(String, u64)> = counts.into_iter().collect();
    vocab.sort();
    let mut words: Vec<(Vec<String>, u64)> = vocab.iter().map(|(w, c)| (chars(w), *c)).collect();

    let mut stats = PairStats::default();
    for (i, (symbols, freq)) in words.iter().enumerate() {
        for p in pairs_of(symbols) {
            stats.bump(p, *freq as i64, i);
        }
    }

    let mut merges = Vec::new();
    while merges.len() < n_merges {
        let Some((count, pair)) = stats.best() else { break };
        if count < 2 {
            break;
        }
        let mut affected: Vec<usize> = stats
            .occurs_in
            .get(&pair)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default();
        affected.sort_unstable();
        for wi in affected {
            let (symbols, freq) = &words[wi];
            if !pairs_of(symbols).any(|p| p == pair) {
                continue;
            }
            let freq = *freq as i64;
            let merged = merge_pair(symbols, &pair);
            for p in pairs_of(symbols).collect::<Vec<_>>() {
                stats.bump(p, -freq, wi);
            }
            for p in pairs_of(&merged).collect::<Vec<_>>() {
                stats.bump(p, freq, wi);
            }
            words[wi].0 = merged;
        }
        merges.push(pair);
    }

    let mut model = BpeModel::from_merges(merges, DEFAULT_MARKER);
    let mut freqs = HashMap::new();
    for (w, c) in &vocab {
        for tok in model.segment(w) {
            *freqs.entry(tok).or_insert(0) += c;
        }
    }
    model.frequencies = freqs;
    Ok(model)
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>, marker: &str) -> Self {
        let mut ranks = HashMap::new();
        let mut splits = HashMap::new();
        for (i, p) in merges.iter().enumerate() {
            ranks.entry(p.clone()).or_insert(i);
            splits.entry(format!("{}{}", p.0, p.1)).or_insert_with(|| p.clone());
        }
        Self {
            merges,
            ranks,
            splits,
            marker: marker.to_string(),
            frequencies: HashMap::new(),
        }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn marker(&self) -> &str {
        &self.marker
    }

    /// Corpus frequency of a marked subword (`"ab@@"` and `"ab"` are distinct).
    pub fn frequency(&self, subword: &str) -> u64 {
        self.frequencies.get(subword).copied().unwrap_or(0)
    }

    pub fn frequencies(&self) -> &HashMap<String, u64> {
        &self.frequencies
    }

    pub fn set_frequencies(&mut self, f: HashMap<String, u64>) {
        self.frequencies = f;
    }

    fn merge_symbols(&self, word: &str) -> Vec<String> {
        let mut symbols = chars(word);
        loop {
            let best = pairs_of(&symbols)
                .filter_map(|p| self.ranks.get(&p).map(|&r| (r, p)))
                .min_by_key(|(r, _)| *r);
            match best {
                Some((_, pair)) => symbols = merge_pair(&symbols, &pair),
                None => return symbols,
            }
        }
    }

    fn mark(&self, symbols: Vec<String>) -> Vec<String> {
        let n = symbols.len();
        symbols
            .into_iter()
            .enumerate()
            .map(|(i, s)| if i + 1 < n { s + &self.marker } else { s })
            .collect()
    }

    /// Segmentation without frequency filtering.
    pub fn segment(&self, word: &str) -> Vec<String> {
        self.mark(self.merge_symbols(word))
    }

    fn revert(&self, seg: &str, is_final: bool, threshold: u64, out: &mut Vec<String>) {
        let marked = if is_final {
            seg.to_string()
        } else {
            format!("{seg}{}", self.marker)
        };
        if seg.chars().count() <= 1 || self.frequency(&marked) >= threshold {
            out.push(marked);
            return;
        }
        match self.splits.get(seg) {
            Some((left, right)) => {
                self.revert(left, false, threshold, out);
                self.revert(right, is_final, threshold, out);
            }
            // not produced by any merge: fall back to characters
            None => {
                let cs = chars(seg);
                let n = cs.len();
                for (i, c) in cs.into_iter().enumerate() {
                    out.push(if i + 1 < n || !is_final { c + &self.marker } else { c });
                }
            }
        }
    }

    /// Segment one word; subwords rarer than `threshold` are recursively split
    /// back into their merge components until each piece is frequent enough
    /// or a single character.
    pub fn apply(&self, word: &str, threshold: u64) -> Vec<String> {
        let symbols = self.merge_symbols(word);
        if threshold == 0 {
            return self.mark(symbols);
        }
        let n = symbols.len();
        let mut out = Vec::with_capacity(n);
        for (i, s) in symbols.iter().enumerate() {
            self.revert(s, i + 1 == n, threshold, &mut out);
        }
        out
    }

    pub fn apply_line(&self, line: &str, threshold: u64) -> Vec<String> {
        line.split_whitespace()
            .flat_map(|w| self.apply(w, threshold))
            .collect()
    }

    /// Undo segmentation on a line of subwords.
    pub fn join(&self, tokens: &[String]) -> String {
        join_subwords(tokens, &self.marker)
    }

    /// Writes the merge list to `path` and the frequency table to
    /// [`frequency_path`]`(path)`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::from(HEADER);
        body.push('\n');
        for (l, r) in &self.merges {
            body.push_str(&format!("{l} {r}\n"));
        }
        fs::write(path, body).map_err(|e| Error::storage(path, e))?;

        let freq_path = frequency_path(path);
        let mut entries: Vec<(&String, &u64)> = self.frequencies.iter().collect();
        entries.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
        let mut f = fs::File::create(&freq_path).map_err(|e| Error::storage(&freq_path, e))?;
        for (tok, c) in entries {
            writeln!(f, "{tok}\t{c}").map_err(|e| Error::storage(&freq_path, e))?;
        }
        Ok(())
    }

    /// Loads a model written by [`BpeModel::save`]. A missing frequency file
    /// leaves the table empty, which only matters for thresholds above zero.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::format(path, format!("missing '{HEADER}' header")));
        }
        let mut merges = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_string(), r.to_string()))
                }
                _ => return Err(Error::format(path, format!("line {}: expected 'left right'", n + 2))),
            }
        }
        let mut model = Self::from_merges(merges, DEFAULT_MARKER);
        let freq_path = frequency_path(path);
        if let Ok(text) = fs::read_to_string(&freq_path) {
            let mut freqs = HashMap::new();
            for (n, line) in text.lines().enumerate() {
                let parsed = line
                    .split_once('\t')
                    .and_then(|(t, c)| c.parse::<u64>().ok().map(|c| (t.to_string(), c)));
                match parsed {
                    Some((t, c)) => {
                        freqs.insert(t, c);
                    }
                    None => return Err(Error::format(&freq_path, format!("line {}: expected 'subword<TAB>count'", n + 1))),
                }
            }
            model.frequencies = freqs;
        }
        Ok(model)
    }
}

/// Sibling path holding the subword frequency table.
pub fn frequency_path(model_path: &Path) -> PathBuf {
    let mut s = model_path.as_os_str().to_owned();
    s.push(".freq");
    PathBuf::from(s)
}

/// `["xx@@", "yy", "z"]` -> `"xxyy z"`.
pub fn join_subwords(tokens: &[String], marker: &str) -> String {
    let mut out = String::new();
    let mut glue = false;
    for t in tokens {
        if !out.is_empty() && !glue {
            out.push(' ');
        }
        match t.strip_suffix(marker) {
            Some(stem) => {
                out.push_str(stem);
                glue = true;
            }
            None => {
                out.push_str(t);
                glue = false;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let m = learn_bpe(["ab ab abc"], 1).unwrap();
        assert_eq!(m.merges(), &[("a".to_string(), "b".to_string())]);
    }

    #[test]
    fn ties_break_lexicographically() {
        // (x,y) and (a,b) both occur twice
        let m = learn_bpe(["xy xy ab ab"], 1).unwrap();
        assert_eq!(m.merges()[0], ("a".to_string(), "b".to_string()));
    }

    #[test]
    fn stops_when_no_pair_repeats() {
        let m = learn_bpe(["abc def"], 100).unwrap();
        assert!(m.merges().is_empty());
    }

    #[test]
    fn zero_merges_gives_characters() {
        let m = learn_bpe(["hello world"], 0).unwrap();
        assert_eq!(m.apply("hello", 0), s(&["h@@", "e@@", "l@@", "l@@", "o"]));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(learn_bpe(["", "  "], 10), Err(Error::Data(_))));
    }

    #[test]
    fn hand_applied_merge() {
        let m = BpeModel::from_merges(vec![("a".into(), "b".into())], DEFAULT_MARKER);
        assert_eq!(m.apply("abc", 0), s(&["ab@@", "c"]));
    }

    #[test]
    fn frequent_word_stays_whole() {
        let m = learn_bpe(["the the the the cat"], 10).unwrap();
        assert_eq!(m.apply("the", 0), s(&["the"]));
        assert_eq!(m.apply("the", 4), s(&["the"]));
    }

    #[test]
    fn high_threshold_reverts_to_characters() {
        let m = learn_bpe(["the the the the cat"], 10).unwrap();
        assert_eq!(m.apply("the", 1000), s(&["t@@", "h@@", "e"]));
    }

    #[test]
    fn join_removes_markers() {
        assert_eq!(join_subwords(&s(&["xx@@", "yy", "z"]), "@@"), "xxyy z");
        assert_eq!(join_subwords(&s(&[]), "@@"), "");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codes.bpe");
        let m = learn_bpe(["low lower lowest newer newest wider"], 20).unwrap();
        m.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("#bpe-v1\n"));
        let back = BpeModel::load(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn load_rejects_missing_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codes.bpe");
        fs::write(&path, "a b\n").unwrap();
        assert!(matches!(BpeModel::load(&path), Err(Error::Format { .. })));
    }
}
