//! Fixed-length next-token windows and shuffled training batches.
//!
//! Windows advance with stride = seq_len and carry one token of lookahead:
//! window w covers ids[w·s .. w·s + s + 1], inputs are the first s tokens and
//! targets the last s. Inputs never overlap, which keeps membership
//! unambiguous at the window level; the trailing remainder is dropped.

use crate::error::{Error, Result};
use crate::seed::rng_for;

/// One scoring/training unit: `seq_len` inputs and their shifted targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
}

impl Window {
    pub fn seq_len(&self) -> usize {
        self.inputs.len()
    }
}

/// A stack of windows, flattened row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl Batch {
    pub fn from_windows(windows: &[Window]) -> Self {
        let batch_size = windows.len();
        let seq_len = windows.first().map_or(0, |w| w.seq_len());
        let mut inputs = Vec::with_capacity(batch_size * seq_len);
        let mut targets = Vec::with_capacity(batch_size * seq_len);
        for w in windows {
            inputs.extend_from_slice(&w.inputs);
            targets.extend_from_slice(&w.targets);
        }
        Batch {
            inputs,
            targets,
            batch_size,
            seq_len,
        }
    }

    /// Number of target positions.
    pub fn token_count(&self) -> usize {
        self.batch_size * self.seq_len
    }
}

/// Cut a token stream into next-token windows (stride = seq_len).
pub fn windows(ids: &[u32], seq_len: usize) -> Result<Vec<Window>> {
    if seq_len == 0 {
        return Err(Error::contract("windows: seq_len must be positive"));
    }
    if ids.len() < seq_len + 1 {
        return Err(Error::contract(format!(
            "windows: {} tokens cannot fill one window of {} (+1 lookahead)",
            ids.len(),
            seq_len
        )));
    }
    let count = (ids.len() - 1) / seq_len;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * seq_len;
        out.push(Window {
            inputs: ids[start..start + seq_len].to_vec(),
            targets: ids[start + 1..start + seq_len + 1].to_vec(),
        });
    }
    Ok(out)
}

/// Shuffle the windows of `ids` under `seed` and group them into batches.
/// The final batch may be smaller than `batch_size`; no window is dropped.
pub fn make_batches(
    ids: &[u32],
    seq_len: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::contract("make_batches: batch_size must be positive"));
    }
    let mut ws = windows(ids, seq_len)?;
    let mut rng = rng_for(seed, "batch-order");
    for i in (1..ws.len()).rev() {
        let j = rand::Rng::gen_range(&mut rng, 0..=i);
        ws.swap(i, j);
    }
    Ok(ws.chunks(batch_size).map(Batch::from_windows).collect())
}
