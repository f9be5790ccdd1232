//! Reference-based membership inference: likelihood-ratio scores, an
//! FPR-capped threshold calibrated on validation (non-member) samples, and
//! the resulting recall over training samples.
//!
//! Classification is strict: member iff log LR(x) < log t. Ties sit on the
//! non-member side, so the degenerate M == R case lands at recall 0 instead
//! of an arbitrary tie split.

use serde::{Deserialize, Serialize};

use super::{score_windows, SampleScore};
use crate::autodiff::Scalar;
use crate::data::Window;
use crate::error::{Error, Result};
use crate::model::Model;

/// Calibrated threshold plus attack outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackReport {
    pub fpr_cap: f64,
    /// log t; the classification rule is log_lr < log_threshold.
    pub log_threshold: f64,
    /// Fraction of members classified as members, in [0, 1].
    pub recall: f64,
    /// Fraction of non-members classified as members; ≤ fpr_cap by
    /// construction.
    pub realized_fpr: f64,
    pub n_members: usize,
    pub n_nonmembers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub member_scores: Option<Vec<SampleScore>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nonmember_scores: Option<Vec<SampleScore>>,
}

/// Choose log t from validation log-LR values: sort ascending, take the
/// (k+1)-th smallest with k = floor(fpr_cap·n). Under the strict member
/// rule at most k validation samples can fall below t, so the realized FPR
/// never exceeds the cap. A cap ≥ 1 places the threshold at +∞.
pub fn calibrate_threshold(val_log_lrs: &[f64], fpr_cap: f64) -> Result<f64> {
    let n = val_log_lrs.len();
    if n < 10 {
        return Err(Error::contract(format!(
            "calibrate_threshold: need at least 10 validation scores, got {n}"
        )));
    }
    if !(0.0..).contains(&fpr_cap) {
        return Err(Error::contract(format!(
            "calibrate_threshold: fpr_cap {fpr_cap} must be non-negative"
        )));
    }
    if fpr_cap >= 1.0 {
        return Ok(f64::INFINITY);
    }
    let mut sorted = val_log_lrs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let k = (fpr_cap * n as f64).floor() as usize;
    Ok(sorted[k.min(n - 1)])
}

/// Assemble an attack report from precomputed member / non-member scores.
pub fn mia_from_scores(
    members: &[SampleScore],
    nonmembers: &[SampleScore],
    fpr_cap: f64,
    include_scores: bool,
) -> Result<AttackReport> {
    if members.is_empty() {
        return Err(Error::contract("mia: no member samples"));
    }
    let val_lrs: Vec<f64> = nonmembers.iter().map(|s| s.log_lr()).collect();
    let log_t = calibrate_threshold(&val_lrs, fpr_cap)?;
    let flagged = |scores: &[SampleScore]| -> usize {
        scores.iter().filter(|s| s.log_lr() < log_t).count()
    };
    let recall = flagged(members) as f64 / members.len() as f64;
    let realized_fpr = flagged(nonmembers) as f64 / nonmembers.len() as f64;
    Ok(AttackReport {
        fpr_cap,
        log_threshold: log_t,
        recall,
        realized_fpr,
        n_members: members.len(),
        n_nonmembers: nonmembers.len(),
        member_scores: include_scores.then(|| members.to_vec()),
        nonmember_scores: include_scores.then(|| nonmembers.to_vec()),
    })
}

/// Score all windows under the fine-tuned model M and the reference R,
/// calibrate on the validation pool, and report recall over the training
/// pool. The pools must be disjoint; R must never have been fine-tuned.
pub fn mia_recall<F: Scalar>(
    model: &Model<F>,
    reference: &Model<F>,
    train_windows: &[Window],
    val_windows: &[Window],
    fpr_cap: f64,
    batch_size: usize,
) -> Result<AttackReport> {
    let score_pool = |windows: &[Window]| -> Result<Vec<SampleScore>> {
        let pm = score_windows(model, windows, batch_size)?;
        let pr = score_windows(reference, windows, batch_size)?;
        Ok(pm
            .into_iter()
            .zip(pr)
            .enumerate()
            .map(|(id, (log_pm, log_pr))| SampleScore { id, log_pm, log_pr })
            .collect())
    };
    let members = score_pool(train_windows)?;
    let nonmembers = score_pool(val_windows)?;
    mia_from_scores(&members, &nonmembers, fpr_cap, false)
}
