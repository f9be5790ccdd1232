//! Utility metrics and analyses over training trajectories: perplexity,
//! generalization gap, Pareto frontiers, phase segmentation, and report
//! emission.

mod pareto;
mod phases;
mod report;

pub use pareto::{pareto_frontier, pareto_frontier_by_strategy};
pub use phases::{segment_phases, PhaseSegmentation, DEFAULT_PATIENCE, DEFAULT_THETA};
pub use report::{emit_report, metrics_csv, parse_metrics_csv, pareto_svg, write_metrics_csv};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape};
use crate::data::{Batch, Window};
use crate::error::{Error, Result};
use crate::model::Model;

/// One evaluated checkpoint in (strategy, lr, epoch) space. Recall is kept
/// as a fraction in [0, 1] internally and rendered as a percentage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub strategy: String,
    pub lr: f64,
    pub epoch: u32,
    pub train_ppl: f64,
    pub val_ppl: f64,
    pub mia_recall: Option<f64>,
    pub exposure: Option<f64>,
}

/// exp(mean token-level cross-entropy) over all target positions.
pub fn perplexity<F: Scalar>(
    model: &Model<F>,
    windows: &[Window],
    batch_size: usize,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::contract("perplexity: need at least one window"));
    }
    if batch_size == 0 {
        return Err(Error::contract("perplexity: batch_size must be positive"));
    }
    let mut total_nll = 0.0f64;
    let mut total_tokens = 0usize;
    for chunk in windows.chunks(batch_size) {
        let batch = Batch::from_windows(chunk);
        let mut tape = Tape::new();
        let (loss, _) = model.loss_recorded(
            &mut tape,
            &batch.inputs,
            &batch.targets,
            batch.batch_size,
            batch.seq_len,
            None,
        )?;
        let mean_nll = tape.value(loss)[0].to_f64().expect("finite loss");
        total_nll += mean_nll * batch.token_count() as f64;
        total_tokens += batch.token_count();
    }
    Ok(perplexity_from_nll(total_nll, total_tokens))
}

/// exp(total negative log-likelihood / token count).
pub fn perplexity_from_nll(total_nll: f64, token_count: usize) -> f64 {
    (total_nll / token_count as f64).exp()
}

/// Validation perplexity minus training perplexity.
pub fn generalization_gap(point: &MetricPoint) -> f64 {
    point.val_ppl - point.train_ppl
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::score_windows;
    use crate::model::{build_model, ModelConfig};

    fn tiny_model(seed: u64) -> Model<f32> {
        let cfg = ModelConfig {
            n_blocks: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 9,
            context_length: 8,
            tied_embeddings: true,
            adapter_reduction: None,
        };
        build_model(&cfg, seed).unwrap()
    }

    fn sample_windows(n: usize, seq: usize) -> Vec<Window> {
        (0..n)
            .map(|i| Window {
                inputs: (0..seq).map(|t| ((3 * i + t) % 9) as u32).collect(),
                targets: (0..seq).map(|t| ((3 * i + t + 1) % 9) as u32).collect(),
            })
            .collect()
    }

    #[test]
    fn uniform_model_has_perplexity_equal_to_vocab() {
        let mut model = tiny_model(1);
        for (_, t) in model.params_mut().iter_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let ppl = perplexity(&model, &sample_windows(4, 6), 2).unwrap();
        assert!((ppl - 9.0).abs() < 1e-4, "uniform ppl {ppl}");
    }

    #[test]
    fn perfect_prediction_floors_at_one() {
        assert_eq!(perplexity_from_nll(0.0, 100), 1.0);
    }

    #[test]
    fn gap_is_val_minus_train() {
        let p = MetricPoint {
            strategy: "full".into(),
            lr: 1e-4,
            epoch: 1,
            train_ppl: 12.0,
            val_ppl: 13.0,
            mia_recall: None,
            exposure: None,
        };
        assert_eq!(generalization_gap(&p), 1.0);
        let eq = MetricPoint {
            train_ppl: 9.5,
            val_ppl: 9.5,
            ..p
        };
        assert_eq!(generalization_gap(&eq), 0.0);
    }

    #[test]
    fn perplexity_agrees_with_attack_scorer() {
        // Cross-check: exp(−mean per-token score) must match the CE route.
        let model = tiny_model(23);
        let ws = sample_windows(6, 5);
        let ppl = perplexity(&model, &ws, 4).unwrap();
        let scores = score_windows(&model, &ws, 4).unwrap();
        let total: f64 = scores.iter().sum();
        let via_scores = perplexity_from_nll(-total, 6 * 5);
        assert!(
            (ppl - via_scores).abs() / ppl < 1e-6,
            "{ppl} vs {via_scores}"
        );
    }
}
