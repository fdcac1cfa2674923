use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;
const BYTE_BASE: usize = 5;
/// Special ids plus the 256 byte-fallback ids.
pub const N_RESERVED: usize = BYTE_BASE + 256;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Space,
    Word,
    Other,
}

fn class(c: char) -> Class {
    if c.is_whitespace() {
        Class::Space
    } else if c.is_alphanumeric() || c == '_' {
        Class::Word
    } else {
        Class::Other
    }
}

/// Splits text into pieces whose concatenation is the original string.
///
/// Words are maximal alphanumeric runs, every other symbol stands alone,
/// and a single space directly before a word or symbol is glued to it
/// (`"a b"` → `["a", " b"]`). Remaining whitespace forms its own pieces.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let end_of = |i: usize| chars.get(i).map_or(text.len(), |&(b, _)| b);
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let start = i;
        let (_, c) = chars[i];
        if class(c) == Class::Space {
            let mut j = i;
            while j < chars.len() && class(chars[j].1) == Class::Space {
                j += 1;
            }
            let glue = j < chars.len() && chars[j - 1].1 == ' ';
            if !glue {
                pieces.push(&text[end_of(start)..end_of(j)]);
                i = j;
                continue;
            }
            if j - 1 > start {
                pieces.push(&text[end_of(start)..end_of(j - 1)]);
            }
            i = j - 1;
        }
        let head = i;
        if chars[i].1 == ' ' {
            i += 1;
        }
        if class(chars[i].1) == Class::Word {
            while i < chars.len() && class(chars[i].1) == Class::Word {
                i += 1;
            }
        } else {
            i += 1;
        }
        pieces.push(&text[end_of(head)..end_of(i)]);
    }
    pieces
}

/// Lowercased alphanumeric terms, the unit of retrieval and TF-IDF.
pub fn terms(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Piece vocabulary with byte fallback, so encoding is total and decoding
/// inverts it exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pieces: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Keeps the most frequent pieces of `texts` (ties broken
    /// lexicographically) so that the whole vocabulary has at most `cap` ids.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, cap: usize) -> Result<Self> {
        if cap < N_RESERVED {
            return Err(Error::Config(format!(
                "vocabulary cap {cap} is below the {N_RESERVED} reserved ids"
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in texts {
            for p in pre_tokenize(t) {
                *counts.entry(p).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(cap - N_RESERVED);
        Self::from_pieces(ranked.into_iter().map(|(p, _)| p.to_string()).collect())
    }

    pub fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() || index.insert(p.clone(), N_RESERVED + i).is_some() {
                return Err(Error::Config(format!("bad or duplicate vocabulary piece {p:?}")));
            }
        }
        Ok(Self { pieces, index })
    }

    /// Learned pieces in id order (ids start at [`N_RESERVED`]).
    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn len(&self) -> usize {
        N_RESERVED + self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for p in pre_tokenize(text) {
            match self.index.get(p) {
                Some(&id) => ids.push(id),
                None => ids.extend(p.bytes().map(|b| BYTE_BASE + b as usize)),
            }
        }
        ids
    }

    /// Inverse of [`Vocab::encode`]. Special ids are skipped; byte runs that
    /// do not form valid UTF-8 (possible only for generated ids) decode
    /// lossily.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        let mut bytes = Vec::new();
        for &id in ids {
            if (BYTE_BASE..N_RESERVED).contains(&id) {
                bytes.push((id - BYTE_BASE) as u8);
                continue;
            }
            if !bytes.is_empty() {
                out.push_str(&String::from_utf8_lossy(&bytes));
                bytes.clear();
            }
            if let Some(p) = id.checked_sub(N_RESERVED).and_then(|i| self.pieces.get(i)) {
                out.push_str(p);
            }
        }
        out.push_str(&String::from_utf8_lossy(&bytes));
        out
    }
}
