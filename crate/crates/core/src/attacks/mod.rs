//! Memorization meters: reference-based membership inference and canary
//! exposure. All likelihood arithmetic is in log space; the raw ratio
//! Pr^R/Pr^M underflows at any realistic sequence length.

mod exposure;
mod mia;

pub use exposure::{
    exposure_exact, exposure_from_scores, exposure_sampled, ExposureMode, ExposureReport,
    DEFAULT_EXACT_BUDGET,
};
pub use mia::{calibrate_threshold, mia_from_scores, mia_recall, AttackReport};

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::log_sum_exp;
use crate::autodiff::Tape;
use crate::autodiff::Scalar;
use crate::data::{Batch, Window};
use crate::error::{Error, Result};
use crate::model::Model;

/// Log-likelihoods of one sample under the fine-tuned model M and the
/// reference R. log_lr = log Pr^R − log Pr^M; small (negative) values are
/// evidence of membership.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: usize,
    pub log_pm: f64,
    pub log_pr: f64,
}

impl SampleScore {
    pub fn log_lr(&self) -> f64 {
        self.log_pr - self.log_pm
    }
}

/// Sum over a window's target positions of log softmax(logits)[target].
/// Natural log, no length normalization (windows share one length).
pub fn score_sample<F: Scalar>(model: &Model<F>, window: &Window) -> Result<f64> {
    Ok(score_windows(model, std::slice::from_ref(window), 1)?[0])
}

/// Batched scoring. Window order is preserved; values are independent of
/// `batch_size` because rows of a batch do not interact.
pub fn score_windows<F: Scalar>(
    model: &Model<F>,
    windows: &[Window],
    batch_size: usize,
) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(Error::contract(
            "score_windows: batch_size must be positive",
        ));
    }
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch_size) {
        let seq = chunk[0].seq_len();
        if chunk.iter().any(|w| w.seq_len() != seq) {
            return Err(Error::contract(
                "score_windows: all windows in a batch must share one length",
            ));
        }
        let batch = Batch::from_windows(chunk);
        let mut tape = Tape::new();
        let fwd = model.forward_recorded(&mut tape, &batch.inputs, batch.batch_size, seq, None)?;
        let logits = tape.value(fwd.logits);
        let vocab = model.config().vocab_size;
        for (w, _) in chunk.iter().enumerate() {
            let mut acc = 0.0f64;
            for t in 0..seq {
                let row = &logits[(w * seq + t) * vocab..(w * seq + t + 1) * vocab];
                let target = batch.targets[w * seq + t] as usize;
                if target >= vocab {
                    return Err(Error::IndexOutOfRange {
                        index: target,
                        limit: vocab,
                        position: w * seq + t,
                    });
                }
                let lse = log_sum_exp(row).to_f64().expect("finite");
                let logit = row[target].to_f64().expect("finite");
                acc += logit - lse;
            }
            out.push(acc);
        }
    }
    Ok(out)
}
