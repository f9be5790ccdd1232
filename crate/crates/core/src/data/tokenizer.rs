//! Deterministic character- and word-level tokenization.
//!
//! Both modes keep the ten digit characters as atomic single tokens with
//! fixed ids, so a numeric secret always tokenizes into per-digit slots.
//! Word mode lowercases, treats alphabetic runs as tokens, splits on
//! whitespace and punctuation, and caps the vocabulary at the `max_vocab`
//! most frequent word types (ties broken lexicographically); everything
//! else maps to UNK. Documents are joined with a single BOS separator.

use std::collections::HashMap;

use super::Corpus;
use crate::error::{Error, Result};

pub const UNK_ID: u32 = 0;
pub const PAD_ID: u32 = 1;
pub const BOS_ID: u32 = 2;

const UNK_TOKEN: &str = "<unk>";
const PAD_TOKEN: &str = "<pad>";
const BOS_TOKEN: &str = "<bos>";

/// First id after the specials and the ten digits.
const FIRST_FREE_ID: u32 = 13;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenizeMode {
    Char,
    Word { max_vocab: usize },
}

/// Bijective token ↔ id map with fixed specials and atomic digits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Specials + digits, the mandatory prefix of every vocabulary.
    fn with_prefix() -> Self {
        let mut v = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for t in [UNK_TOKEN, PAD_TOKEN, BOS_TOKEN] {
            v.push(t.to_string());
        }
        for d in '0'..='9' {
            v.push(d.to_string());
        }
        v
    }

    fn push(&mut self, token: String) {
        let id = self.id_to_token.len() as u32;
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    /// Fixed id of a digit character.
    pub fn digit_id(&self, d: char) -> u32 {
        debug_assert!(d.is_ascii_digit());
        3 + (d as u32 - '0' as u32)
    }

    /// Two-column UTF-8 TSV (token, id). Tabs, newlines, and backslashes in
    /// tokens are escaped so char-mode vocabularies stay line-oriented.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, token) in self.id_to_token.iter().enumerate() {
            let escaped: String = token
                .chars()
                .flat_map(|c| match c {
                    '\\' => vec!['\\', '\\'],
                    '\t' => vec!['\\', 't'],
                    '\n' => vec!['\\', 'n'],
                    '\r' => vec!['\\', 'r'],
                    c => vec![c],
                })
                .collect();
            out.push_str(&escaped);
            out.push('\t');
            out.push_str(&id.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut id_to_token = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (escaped, id_str) = line.rsplit_once('\t').ok_or_else(|| {
                Error::Format(format!("vocabulary line {} has no tab", lineno + 1))
            })?;
            let id: usize = id_str.parse().map_err(|_| {
                Error::Format(format!("vocabulary line {}: bad id {id_str}", lineno + 1))
            })?;
            if id != id_to_token.len() {
                return Err(Error::Format(format!(
                    "vocabulary line {}: id {id} out of order",
                    lineno + 1
                )));
            }
            let mut token = String::new();
            let mut chars = escaped.chars();
            while let Some(c) = chars.next() {
                if c == '\\' {
                    match chars.next() {
                        Some('\\') => token.push('\\'),
                        Some('t') => token.push('\t'),
                        Some('n') => token.push('\n'),
                        Some('r') => token.push('\r'),
                        other => {
                            return Err(Error::Format(format!(
                                "vocabulary line {}: bad escape {other:?}",
                                lineno + 1
                            )))
                        }
                    }
                } else {
                    token.push(c);
                }
            }
            id_to_token.push(token);
        }
        let token_to_id: HashMap<String, u32> = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        if token_to_id.len() != id_to_token.len() {
            return Err(Error::Format("vocabulary has duplicate tokens".into()));
        }
        let v = Vocabulary {
            token_to_id,
            id_to_token,
        };
        for (expect, id) in [(UNK_TOKEN, UNK_ID), (PAD_TOKEN, PAD_ID), (BOS_TOKEN, BOS_ID)] {
            if v.token(id) != Some(expect) {
                return Err(Error::Format(format!("vocabulary missing special {expect}")));
            }
        }
        for d in '0'..='9' {
            if v.token(v.digit_id(d)) != Some(d.to_string().as_str()) {
                return Err(Error::Format(format!("vocabulary missing digit {d}")));
            }
        }
        Ok(v)
    }
}

/// Split text into raw token strings under the given mode (no vocabulary).
pub fn token_stream(text: &str, mode: &TokenizeMode) -> Vec<String> {
    match mode {
        TokenizeMode::Char => text.chars().map(|c| c.to_string()).collect(),
        TokenizeMode::Word { .. } => {
            let mut out = Vec::new();
            let mut word = String::new();
            for c in text.chars() {
                if c.is_alphabetic() {
                    word.extend(c.to_lowercase());
                } else {
                    if !word.is_empty() {
                        out.push(std::mem::take(&mut word));
                    }
                    if c.is_ascii_digit() {
                        out.push(c.to_string());
                    }
                    // whitespace and punctuation are separators
                }
            }
            if !word.is_empty() {
                out.push(word);
            }
            out
        }
    }
}

/// Build a vocabulary over one or more corpora.
pub fn build_vocab(corpora: &[&Corpus], mode: &TokenizeMode) -> Result<Vocabulary> {
    if corpora.iter().all(|c| c.is_empty()) {
        return Err(Error::contract("tokenize: empty corpus"));
    }
    let mut vocab = Vocabulary::with_prefix();
    match mode {
        TokenizeMode::Char => {
            // Every distinct non-digit character, lexicographically.
            let mut seen: Vec<char> = corpora
                .iter()
                .flat_map(|c| c.documents.iter())
                .flat_map(|d| d.chars())
                .filter(|c| !c.is_ascii_digit())
                .collect();
            seen.sort_unstable();
            seen.dedup();
            for c in seen {
                vocab.push(c.to_string());
            }
        }
        TokenizeMode::Word { max_vocab } => {
            let mut counts: HashMap<String, u64> = HashMap::new();
            for corpus in corpora {
                for doc in &corpus.documents {
                    for tok in token_stream(doc, mode) {
                        if tok.len() == 1 && tok.chars().next().unwrap().is_ascii_digit() {
                            continue; // digits are always present
                        }
                        *counts.entry(tok).or_insert(0) += 1;
                    }
                }
            }
            // Most frequent first; ties broken lexicographically.
            let mut types: Vec<(String, u64)> = counts.into_iter().collect();
            types.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            for (tok, _) in types.into_iter().take(*max_vocab) {
                vocab.push(tok);
            }
        }
    }
    debug_assert!(vocab.size() >= FIRST_FREE_ID as usize);
    Ok(vocab)
}

/// Encode text with an existing vocabulary; unknown tokens map to UNK.
pub fn encode_text(text: &str, vocab: &Vocabulary, mode: &TokenizeMode) -> Vec<u32> {
    token_stream(text, mode)
        .iter()
        .map(|t| vocab.id_or_unk(t))
        .collect()
}

/// Encode a whole corpus: documents joined by a single BOS separator.
pub fn encode_corpus(corpus: &Corpus, vocab: &Vocabulary, mode: &TokenizeMode) -> Vec<u32> {
    let mut out = Vec::new();
    for (i, doc) in corpus.documents.iter().enumerate() {
        if i > 0 {
            out.push(BOS_ID);
        }
        out.extend(encode_text(doc, vocab, mode));
    }
    out
}

/// Build a vocabulary over `corpus` and encode it in one step.
pub fn tokenize(corpus: &Corpus, mode: &TokenizeMode) -> Result<(Vec<u32>, Vocabulary)> {
    if corpus.is_empty() {
        return Err(Error::contract("tokenize: empty corpus"));
    }
    let vocab = build_vocab(&[corpus], mode)?;
    let ids = encode_corpus(corpus, &vocab, mode);
    Ok((ids, vocab))
}
