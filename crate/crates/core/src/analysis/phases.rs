//! Training-phase segmentation: fitting+memorization (1), memorization-only
//! (2), and overfitting (3), recovered from a per-epoch trajectory.
//!
//! Boundary b (end of phase 2) is the epoch just before validation
//! perplexity starts a k-epoch increase; boundary a (end of phase 1) is the
//! last epoch of substantial validation improvement while attack recall is
//! still rising. The paper gives only a verbal rule; the θ/k functional
//! form here is an artifact decision, logged in every output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::Trajectory;

pub const DEFAULT_THETA: f64 = 0.05;
pub const DEFAULT_PATIENCE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSegmentation {
    /// Epoch ending phase 1 (fitting+memorization).
    pub boundary_a: u32,
    /// Epoch ending phase 2 (memorization only).
    pub boundary_b: u32,
    pub theta: f64,
    pub k: usize,
}

/// Deterministic segmentation with relative-improvement floor `theta` and
/// patience `k`. Requires a trajectory of at least 3 epochs.
pub fn segment_phases(traj: &Trajectory, theta: f64, k: usize) -> Result<PhaseSegmentation> {
    let n = traj.records.len();
    if n < 3 {
        return Err(Error::contract(format!(
            "segment_phases: trajectory has {n} epochs, need at least 3"
        )));
    }
    if k == 0 || theta <= 0.0 {
        return Err(Error::contract(
            "segment_phases: patience and theta must be positive",
        ));
    }
    let ppl = |e: usize| traj.records[e - 1].val_ppl; // epochs are 1-based
    let recall = |e: usize| traj.records[e - 1].mia_recall;
    let final_epoch = n as u32;

    // boundary_b: first run of k consecutive val-PPL increases, stepped back
    // to the epoch where the climb began.
    let mut boundary_b = final_epoch;
    let mut run = 0usize;
    for e in 2..=n {
        if ppl(e) > ppl(e - 1) {
            run += 1;
            if run == k {
                boundary_b = (e - k) as u32;
                break;
            }
        } else {
            run = 0;
        }
    }
    let boundary_b = boundary_b.max(1);

    // boundary_a: first epoch where the per-epoch improvement falls under
    // theta (relative to the total achievable improvement) while recall is
    // still rising; phase 1 ended just before it.
    let min_ppl = traj
        .records
        .iter()
        .map(|r| r.val_ppl)
        .fold(f64::INFINITY, f64::min);
    let denom = ppl(1) - min_ppl;
    let mut boundary_a = boundary_b;
    if denom > 0.0 {
        for e in 2..=(boundary_b as usize) {
            let improvement = (ppl(e - 1) - ppl(e)) / denom;
            let recall_rising = match (recall(e), recall(e - 1)) {
                (Some(now), Some(prev)) => now > prev,
                _ => false,
            };
            if improvement < theta && recall_rising {
                boundary_a = (e - 1) as u32;
                break;
            }
        }
    }
    let boundary_a = boundary_a.clamp(1, boundary_b);

    Ok(PhaseSegmentation {
        boundary_a,
        boundary_b,
        theta,
        k,
    })
}
