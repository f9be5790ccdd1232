//! Which parameter groups are trainable.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};

/// A fine-tuning strategy: a predicate over registry names. Parameters
/// outside the predicate's extension stay frozen for the whole run.
///
/// Block indices are 1-based (blocks 1..=n_blocks).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TuningStrategy {
    /// Every parameter trains.
    Full,
    /// Only the logit-producing matrix: the shared embedding/head matrix on a
    /// tied model, the `head` entry on an untied one.
    Head,
    /// Only adapter parameters; requires adapters inserted with the same
    /// reduction factor.
    Adapters(usize),
    /// The named subset of transformer blocks.
    Blocks(BTreeSet<usize>),
    /// Exactly one block.
    SingleBlock(usize),
    /// All blocks; embeddings, final layer norm, and head stay frozen.
    Body,
    /// Everything, on a model whose head has been untied from the embedding.
    UntiedFull,
    /// Everything, starting from a fresh random init instead of the base.
    FromScratchFull,
}

impl TuningStrategy {
    /// Does `name` belong to this strategy's trainable set?
    pub fn matches(&self, name: &str, config: &ModelConfig) -> bool {
        match self {
            TuningStrategy::Full
            | TuningStrategy::UntiedFull
            | TuningStrategy::FromScratchFull => true,
            TuningStrategy::Head => {
                if config.tied_embeddings {
                    name == "embed.tok"
                } else {
                    name == "head"
                }
            }
            TuningStrategy::Adapters(_) => name.starts_with("adapter."),
            TuningStrategy::Blocks(set) => block_index(name).is_some_and(|b| set.contains(&b)),
            TuningStrategy::SingleBlock(k) => block_index(name) == Some(*k),
            TuningStrategy::Body => name.starts_with("block."),
        }
    }

    /// Check the strategy is applicable to the given model shape.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        match self {
            TuningStrategy::Adapters(r) => match config.adapter_reduction {
                Some(have) if have == *r => Ok(()),
                Some(have) => Err(Error::contract(format!(
                    "adapters({r}) requested but model has adapters({have})"
                ))),
                None => Err(Error::contract(format!(
                    "adapters({r}) requested but model has no adapters inserted"
                ))),
            },
            TuningStrategy::Blocks(set) => {
                if set.is_empty() {
                    return Err(Error::contract("blocks strategy: empty block set"));
                }
                for &b in set {
                    if b == 0 || b > config.n_blocks {
                        return Err(Error::contract(format!(
                            "blocks strategy: block {b} outside 1..={}",
                            config.n_blocks
                        )));
                    }
                }
                Ok(())
            }
            TuningStrategy::SingleBlock(k) => {
                if *k == 0 || *k > config.n_blocks {
                    return Err(Error::contract(format!(
                        "single block {k} outside 1..={}",
                        config.n_blocks
                    )));
                }
                Ok(())
            }
            TuningStrategy::UntiedFull => {
                if config.tied_embeddings {
                    Err(Error::contract(
                        "untied-full requires untied embeddings (call untie_embeddings first)",
                    ))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Whether training should start from a fresh init rather than the base.
    pub fn is_from_scratch(&self) -> bool {
        matches!(self, TuningStrategy::FromScratchFull)
    }

    /// Stable display label, also the CSV/config spelling.
    pub fn label(&self) -> String {
        self.to_string()
    }
}

fn block_index(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("block.")?;
    let end = rest.find('.')?;
    rest[..end].parse().ok()
}

/// Render a block set as compact 1-based ranges: {1,2,3,7} → "1-3+7".
fn format_block_set(set: &BTreeSet<usize>) -> String {
    let mut parts: Vec<String> = Vec::new();
    let items: Vec<usize> = set.iter().copied().collect();
    let mut i = 0;
    while i < items.len() {
        let start = items[i];
        let mut end = start;
        while i + 1 < items.len() && items[i + 1] == end + 1 {
            end = items[i + 1];
            i += 1;
        }
        if end > start {
            parts.push(format!("{start}-{end}"));
        } else {
            parts.push(format!("{start}"));
        }
        i += 1;
    }
    parts.join("+")
}

fn parse_block_set(s: &str) -> Option<BTreeSet<usize>> {
    let mut set = BTreeSet::new();
    for part in s.split('+') {
        if let Some((a, b)) = part.split_once('-') {
            let a: usize = a.trim().parse().ok()?;
            let b: usize = b.trim().parse().ok()?;
            if a == 0 || b < a {
                return None;
            }
            set.extend(a..=b);
        } else {
            let k: usize = part.trim().parse().ok()?;
            if k == 0 {
                return None;
            }
            set.insert(k);
        }
    }
    if set.is_empty() {
        None
    } else {
        Some(set)
    }
}

impl fmt::Display for TuningStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TuningStrategy::Full => write!(f, "full"),
            TuningStrategy::Head => write!(f, "head"),
            TuningStrategy::Adapters(r) => write!(f, "adapters({r})"),
            TuningStrategy::Blocks(set) => write!(f, "blocks({})", format_block_set(set)),
            TuningStrategy::SingleBlock(k) => write!(f, "block({k})"),
            TuningStrategy::Body => write!(f, "body"),
            TuningStrategy::UntiedFull => write!(f, "untied-full"),
            TuningStrategy::FromScratchFull => write!(f, "from-scratch-full"),
        }
    }
}

impl FromStr for TuningStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let simple = match s {
            "full" => Some(TuningStrategy::Full),
            "head" => Some(TuningStrategy::Head),
            "body" => Some(TuningStrategy::Body),
            "untied-full" => Some(TuningStrategy::UntiedFull),
            "from-scratch-full" => Some(TuningStrategy::FromScratchFull),
            _ => None,
        };
        if let Some(v) = simple {
            return Ok(v);
        }
        let inner = |prefix: &str| -> Option<&str> {
            s.strip_prefix(prefix)?.strip_prefix('(')?.strip_suffix(')')
        };
        if let Some(arg) = inner("adapters") {
            let r: usize = arg
                .trim()
                .parse()
                .map_err(|_| Error::contract(format!("bad adapter reduction: {arg}")))?;
            return Ok(TuningStrategy::Adapters(r));
        }
        if let Some(arg) = inner("block") {
            let k: usize = arg
                .trim()
                .parse()
                .map_err(|_| Error::contract(format!("bad block index: {arg}")))?;
            return Ok(TuningStrategy::SingleBlock(k));
        }
        if let Some(arg) = inner("blocks") {
            return parse_block_set(arg)
                .map(TuningStrategy::Blocks)
                .ok_or_else(|| Error::contract(format!("bad block set: {arg}")));
        }
        Err(Error::contract(format!("unknown tuning strategy: {s}")))
    }
}
