use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

const SPECIALS: [&str; 4] = [PAD, BOS, EOS, UNK];

/// Shared token vocabulary for source, MT and post-edit sides.
///
/// `pe_allowed` marks the tokens the decoder may emit: the specials plus
/// every token seen on the post-edit side of the training corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    pe_allowed: Vec<bool>,
}

impl Vocabulary {
    /// Specials first, then `tokens` in the given order (duplicates and
    /// specials skipped). Every token starts out allowed.
    pub fn from_tokens<S: AsRef<str>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
            pe_allowed: Vec::new(),
        };
        for t in SPECIALS.iter().map(|s| s.to_string()).chain(tokens.into_iter().map(|t| t.as_ref().to_string())) {
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len() as u32);
                v.tokens.push(t);
            }
        }
        v.pe_allowed = vec![true; v.tokens.len()];
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    pub fn pe_allowed(&self) -> &[bool] {
        &self.pe_allowed
    }

    pub fn is_pe_allowed(&self, id: u32) -> bool {
        self.pe_allowed.get(id as usize).copied().unwrap_or(false)
    }

    /// Recompute the allowed set from post-edit side token lines.
    pub fn restrict_to_pe<S: AsRef<str>>(&mut self, pe_lines: &[Vec<S>]) {
        self.pe_allowed = (0..self.tokens.len()).map(|i| Self::is_special(i as u32)).collect();
        for line in pe_lines {
            for t in line {
                if let Some(id) = self.id(t.as_ref()) {
                    self.pe_allowed[id as usize] = true;
                }
            }
        }
    }

    /// Token ids wrapped in BOS/EOS; unknown tokens map to UNK.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        ids.push(BOS_ID);
        ids.extend(tokens.iter().map(|t| self.id(t.as_ref()).unwrap_or(UNK_ID)));
        ids.push(EOS_ID);
        ids
    }

    /// Tokens for `ids`, dropping PAD/BOS/EOS.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD_ID | BOS_ID | EOS_ID))
            .filter_map(|&i| self.token(i).map(str::to_string))
            .collect()
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|e| Error::storage(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        let tokens: Vec<&str> = text.lines().collect();
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::format(path, format!("vocabulary must start with {SPECIALS:?}")));
        }
        let v = Self::from_tokens(&tokens[SPECIALS.len()..]);
        if v.len() != tokens.len() {
            return Err(Error::format(path, "duplicate tokens"));
        }
        Ok(v)
    }
}

/// One shared vocabulary over all three sides, ordered by descending corpus
/// frequency (ties by token), with `pe_allowed` taken from the PE side only.
pub fn build_vocab<S: AsRef<str>>(src: &[Vec<S>], mt: &[Vec<S>], pe: &[Vec<S>]) -> Vocabulary {
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for line in src.iter().chain(mt).chain(pe) {
        for t in line {
            *counts.entry(t.as_ref()).or_insert(0) += 1;
        }
    }
    let mut ordered: Vec<(&str, u64)> = counts.into_iter().collect();
    ordered.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let mut v = Vocabulary::from_tokens(ordered.into_iter().map(|(t, _)| t));
    v.restrict_to_pe(pe);
    v
}
