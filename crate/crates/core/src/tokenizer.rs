//! Word-level tokenizer with byte fallback.
//!
//! Text is split into pieces: maximal runs of alphanumeric characters (plus
//! `_` and `'`), or single non-space symbols. A piece in the vocabulary is
//! one token; anything else is spelled out as byte tokens. Two adjacent
//! byte-spelled pieces that were separated by whitespace get a byte `0x20`
//! token between them so decoding can split them again.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const EOS: TokenId = 1;
const BYTE_BASE: TokenId = 2;
const N_SPECIAL: usize = 2 + 256;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

/// A piece of text with its byte range in the source string.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Piece<'a> {
    pub text: &'a str,
    pub range: Range<usize>,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '\''
}

/// Splits text into word and symbol pieces.
pub fn pieces(text: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut iter = text.char_indices().peekable();
    while let Some((start, c)) = iter.next() {
        if c.is_whitespace() {
            continue;
        }
        let mut end = start + c.len_utf8();
        if is_word_char(c) {
            while let Some(&(i, n)) = iter.peek() {
                if !is_word_char(n) {
                    break;
                }
                end = i + n.len_utf8();
                iter.next();
            }
        }
        out.push(Piece {
            text: &text[start..end],
            range: start..end,
        });
    }
    out
}

impl Tokenizer {
    /// Vocabulary of every piece occurring in `texts`, sorted.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            for p in pieces(t) {
                set.insert(p.text.to_string());
            }
        }
        Self::from_words(set.into_iter().collect())
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), (N_SPECIAL + i) as TokenId))
            .collect();
        Self { words, index }
    }

    pub fn vocab_size(&self) -> usize {
        N_SPECIAL + self.words.len()
    }

    pub fn word_id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn is_byte(id: TokenId) -> bool {
        (BYTE_BASE..BYTE_BASE + 256).contains(&id)
    }

    /// Human-readable form of a single token.
    pub fn token_str(&self, id: TokenId) -> String {
        match id {
            PAD => "<pad>".into(),
            EOS => "<eos>".into(),
            _ if Self::is_byte(id) => format!("<0x{:02X}>", id - BYTE_BASE),
            _ => self
                .words
                .get(id as usize - N_SPECIAL)
                .cloned()
                .unwrap_or_else(|| format!("<oov:{id}>")),
        }
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.encode_with_offsets(text)
            .into_iter()
            .map(|(t, _)| t)
            .collect()
    }

    /// Tokens paired with the byte range of `text` each one covers. Separator
    /// bytes inserted between byte-spelled words get an empty range.
    pub fn encode_with_offsets(&self, text: &str) -> Vec<(TokenId, Range<usize>)> {
        let mut out = Vec::new();
        let mut prev_bytes_end: Option<usize> = None;
        for p in pieces(text) {
            if let Some(id) = self.word_id(p.text) {
                out.push((id, p.range));
                prev_bytes_end = None;
                continue;
            }
            if let Some(end) = prev_bytes_end {
                if end < p.range.start {
                    out.push((BYTE_BASE + b' ' as TokenId, p.range.start..p.range.start));
                }
            }
            for (i, b) in p.text.bytes().enumerate() {
                let at = p.range.start + i;
                out.push((BYTE_BASE + b as TokenId, at..at + 1));
            }
            prev_bytes_end = Some(p.range.end);
        }
        out
    }

    /// Joins pieces with single spaces; special tokens are skipped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut parts: Vec<String> = Vec::new();
        let mut bytes: Vec<u8> = Vec::new();
        let flush = |bytes: &mut Vec<u8>, parts: &mut Vec<String>| {
            if !bytes.is_empty() {
                parts.push(String::from_utf8_lossy(bytes).into_owned());
                bytes.clear();
            }
        };
        for &id in ids {
            if id == PAD || id == EOS {
                continue;
            }
            if Self::is_byte(id) {
                bytes.push((id - BYTE_BASE) as u8);
            } else {
                flush(&mut bytes, &mut parts);
                parts.push(self.token_str(id));
            }
        }
        flush(&mut bytes, &mut parts);
        parts.join(" ")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: Tokenizer = serde_json::from_str(&raw)?;
        Ok(Self::from_words(t.words))
    }
}
