//! Canary phrases: a templated secret inserted into training data to
//! measure extractability.

use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::error::{Error, Result};

/// A canary template with a digit hole, e.g. `the secret number is ______`.
/// The hole is a single maximal run of underscores; the secret space S is
/// all digit strings of that length, so |S| = 10^hole_len.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanarySpec {
    pub template: String,
    pub secret: String,
    pub copies: usize,
}

impl CanarySpec {
    pub fn new(template: impl Into<String>, secret: impl Into<String>, copies: usize) -> Self {
        CanarySpec {
            template: template.into(),
            secret: secret.into(),
            copies,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let holes: Vec<&str> = self
            .template
            .split(|c| c != '_')
            .filter(|s| !s.is_empty())
            .collect();
        if holes.len() != 1 {
            return Err(Error::contract(format!(
                "canary template must contain exactly one underscore hole, found {}",
                holes.len()
            )));
        }
        let hole_len = holes[0].len();
        if self.secret.len() != hole_len {
            return Err(Error::contract(format!(
                "canary secret length {} does not match hole length {hole_len}",
                self.secret.len()
            )));
        }
        if !self.secret.chars().all(|c| c.is_ascii_digit()) {
            return Err(Error::contract("canary secret must be all digits"));
        }
        if hole_len == 0 || hole_len > 18 {
            return Err(Error::contract(format!(
                "canary hole length {hole_len} outside 1..=18"
            )));
        }
        Ok(())
    }

    pub fn hole_len(&self) -> usize {
        self.template.chars().filter(|&c| c == '_').count()
    }

    /// |S| = 10^hole_len.
    pub fn space_size(&self) -> u64 {
        10u64.pow(self.hole_len() as u32)
    }

    /// Fill the hole with the given digit string.
    pub fn fill(&self, secret: &str) -> Result<String> {
        if secret.len() != self.hole_len() || !secret.chars().all(|c| c.is_ascii_digit()) {
            return Err(Error::contract(format!(
                "fill: {secret:?} is not a {}-digit string",
                self.hole_len()
            )));
        }
        let hole: String = "_".repeat(self.hole_len());
        Ok(self.template.replacen(&hole, secret, 1))
    }

    /// The template filled with the true secret.
    pub fn filled_true(&self) -> Result<String> {
        self.fill(&self.secret)
    }

    /// The candidate secret at position `i` of the enumeration of S
    /// (zero-padded decimal).
    pub fn secret_at(&self, i: u64) -> String {
        format!("{:0width$}", i, width = self.hole_len())
    }

    /// The enumeration index of the true secret.
    pub fn true_index(&self) -> u64 {
        self.secret.parse().expect("validated digits")
    }
}

/// Insert `copies` filled canaries as standalone documents at evenly spaced
/// positions. Original documents are preserved verbatim and in order.
pub fn insert_canaries(corpus: &Corpus, spec: &CanarySpec) -> Result<Corpus> {
    spec.validate()?;
    let phrase = spec.filled_true()?;
    let n = corpus.len();
    // Canary j goes before original index ((j+1)·n)/(copies+1).
    let mut out = Vec::with_capacity(n + spec.copies);
    let mut next = 0usize;
    for (i, doc) in corpus.documents.iter().enumerate() {
        while next < spec.copies && (next + 1) * n / (spec.copies + 1) == i {
            out.push(phrase.clone());
            next += 1;
        }
        out.push(doc.clone());
    }
    while next < spec.copies {
        out.push(phrase.clone());
        next += 1;
    }
    Ok(Corpus::new(
        out,
        format!("{}+canary", corpus.provenance),
    ))
}
