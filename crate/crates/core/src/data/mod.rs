//! Corpus ingestion, deterministic tokenization, splitting, batching, and
//! canary injection. Everything here is a pure function of (inputs, seed).

mod batches;
mod canary;
mod synthetic;
mod tokenizer;

pub use batches::{make_batches, windows, Batch, Window};
pub use canary::{insert_canaries, CanarySpec};
pub use synthetic::email_corpus;
pub use tokenizer::{
    build_vocab, encode_corpus, encode_text, token_stream, tokenize, TokenizeMode, Vocabulary,
    BOS_ID, PAD_ID, UNK_ID,
};

use std::path::Path;

use crate::error::{Error, Result};
use crate::seed::rng_for;

/// An ordered list of documents with a provenance label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub documents: Vec<String>,
    pub provenance: String,
}

impl Corpus {
    pub fn new(documents: Vec<String>, provenance: impl Into<String>) -> Self {
        Corpus {
            documents,
            provenance: provenance.into(),
        }
    }

    /// Parse a corpus from text: documents are separated by blank lines.
    pub fn from_text(text: &str, provenance: impl Into<String>) -> Self {
        let documents = text
            .split("\n\n")
            .map(|d| d.trim())
            .filter(|d| !d.is_empty())
            .map(|d| d.to_string())
            .collect();
        Corpus {
            documents,
            provenance: provenance.into(),
        }
    }

    /// Load one or more UTF-8 text files, in the order given. Document order
    /// is stable under reload of the same files.
    pub fn from_files<P: AsRef<Path>>(paths: &[P], provenance: impl Into<String>) -> Result<Self> {
        let mut documents = Vec::new();
        for p in paths {
            let text =
                std::fs::read_to_string(p.as_ref()).map_err(|e| Error::io(p.as_ref(), e))?;
            documents.extend(Corpus::from_text(&text, "").documents);
        }
        Ok(Corpus {
            documents,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Serialize back to the blank-line-separated file form.
    pub fn to_text(&self) -> String {
        self.documents.join("\n\n")
    }
}

/// Document-level shuffle under `seed`, then a disjoint partition with
/// |val| = round(val_fraction · N).
pub fn split(corpus: &Corpus, val_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    let n = corpus.len();
    if n < 2 {
        return Err(Error::contract(format!(
            "split: need at least 2 documents, got {n}"
        )));
    }
    if val_fraction <= 0.0 || val_fraction >= 1.0 {
        return Err(Error::contract(format!(
            "split: val_fraction {val_fraction} outside (0, 1)"
        )));
    }
    let n_val = (val_fraction * n as f64).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::contract(format!(
            "split: degenerate partition ({n_val} of {n} documents in val)"
        )));
    }

    // Fisher–Yates with a pinned RNG so the permutation is reproducible.
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_for(seed, "corpus-split");
    for i in (1..n).rev() {
        let j = rand::Rng::gen_range(&mut rng, 0..=i);
        order.swap(i, j);
    }
    let val_docs: Vec<String> = order[..n_val]
        .iter()
        .map(|&i| corpus.documents[i].clone())
        .collect();
    let train_docs: Vec<String> = order[n_val..]
        .iter()
        .map(|&i| corpus.documents[i].clone())
        .collect();
    Ok((
        Corpus::new(train_docs, format!("{}/train", corpus.provenance)),
        Corpus::new(val_docs, format!("{}/val", corpus.provenance)),
    ))
}
