//! Canary exposure: log2|S| − log2(rank of the true secret among all
//! candidate secrets by model likelihood of the filled template).
//!
//! Ranking is conservative: the true secret is placed last within its tie
//! class, so exposure never overstates leakage. The sampled estimator
//! counts ties the same way for consistency (a secret-blind model must
//! estimate exposure ≈ 0, not saturate).

use serde::{Deserialize, Serialize};

use super::score_windows;
use crate::autodiff::Scalar;
use crate::data::{encode_text, CanarySpec, TokenizeMode, Vocabulary, Window, BOS_ID};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::seed::rng_for;

/// Default cap on |S| for exact-mode enumeration.
pub const DEFAULT_EXACT_BUDGET: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ExposureMode {
    Exact,
    /// Rank estimated from `n` uniform candidate secrets; `saturated` is set
    /// when the true secret outscored every sample, in which case the
    /// estimate is only a lower bound of about log2(n+1) bits.
    Sampled { n: usize, saturated: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureReport {
    pub space_size: u64,
    /// 1-based rank by descending likelihood; fractional in sampled mode.
    pub rank: f64,
    /// log2|S| − log2(rank), in [0, log2|S|].
    pub exposure: f64,
    pub mode: ExposureMode,
    /// Log-likelihood of the true filled canary.
    pub true_score: f64,
}

/// Rank + exposure from a full score vector over S. `scores[i]` is the
/// log-likelihood of the candidate with enumeration index i.
pub fn exposure_from_scores(true_index: usize, scores: &[f64]) -> Result<ExposureReport> {
    let space = scores.len() as u64;
    if true_index >= scores.len() {
        return Err(Error::contract(format!(
            "exposure: true index {true_index} outside candidate space {space}"
        )));
    }
    let s_true = scores[true_index];
    let above = scores.iter().filter(|&&s| s > s_true).count();
    let ties = scores.iter().filter(|&&s| s == s_true).count(); // includes self
    let rank = (above + ties) as f64;
    Ok(ExposureReport {
        space_size: space,
        rank,
        exposure: (space as f64).log2() - rank.log2(),
        mode: ExposureMode::Exact,
        true_score: s_true,
    })
}

/// Token sequence of the canary filled with `secret`, as a next-token
/// window. A leading BOS mirrors how inserted canary documents appear in
/// the training stream.
fn canary_window(
    spec: &CanarySpec,
    secret: &str,
    vocab: &Vocabulary,
    mode: &TokenizeMode,
) -> Result<Window> {
    let filled = spec.fill(secret)?;
    let mut seq = vec![BOS_ID];
    seq.extend(encode_text(&filled, vocab, mode));
    if seq.len() < 2 {
        return Err(Error::contract("canary tokenizes to an empty sequence"));
    }
    Ok(Window {
        inputs: seq[..seq.len() - 1].to_vec(),
        targets: seq[1..].to_vec(),
    })
}

fn check_context<F: Scalar>(model: &Model<F>, w: &Window) -> Result<()> {
    if w.seq_len() > model.config().context_length {
        return Err(Error::contract(format!(
            "canary window of {} tokens exceeds model context {}",
            w.seq_len(),
            model.config().context_length
        )));
    }
    Ok(())
}

/// Score the filled canary for every secret in S and rank the true one.
pub fn exposure_exact<F: Scalar>(
    model: &Model<F>,
    spec: &CanarySpec,
    vocab: &Vocabulary,
    mode: &TokenizeMode,
    budget: u64,
    batch_size: usize,
) -> Result<ExposureReport> {
    spec.validate()?;
    let space = spec.space_size();
    if space > budget {
        return Err(Error::BudgetExceeded { space, budget });
    }
    let mut windows = Vec::with_capacity(space as usize);
    for i in 0..space {
        windows.push(canary_window(spec, &spec.secret_at(i), vocab, mode)?);
    }
    check_context(model, &windows[0])?;
    let scores = score_windows(model, &windows, batch_size)?;
    exposure_from_scores(spec.true_index() as usize, &scores)
}

/// Estimate the rank from `n` distinct uniform secrets:
/// rank ≈ (1 + count(sample ≥ true)) · |S| / (n + 1), clamped to [1, |S|].
pub fn exposure_sampled<F: Scalar>(
    model: &Model<F>,
    spec: &CanarySpec,
    n_samples: usize,
    seed: u64,
    vocab: &Vocabulary,
    mode: &TokenizeMode,
    batch_size: usize,
) -> Result<ExposureReport> {
    spec.validate()?;
    let space = spec.space_size();
    if n_samples < 100 {
        return Err(Error::contract(format!(
            "exposure_sampled: need at least 100 samples, got {n_samples}"
        )));
    }
    if n_samples as u64 > space {
        return Err(Error::contract(format!(
            "exposure_sampled: {n_samples} samples exceed |S| = {space}"
        )));
    }

    // n distinct uniform indices from S, without replacement.
    let mut rng = rng_for(seed, "exposure-sample");
    let indices: Vec<u64> = if (n_samples as u64) * 2 >= space {
        let mut all: Vec<u64> = (0..space).collect();
        for i in 0..n_samples {
            let j = rand::Rng::gen_range(&mut rng, i..all.len());
            all.swap(i, j);
        }
        all.truncate(n_samples);
        all
    } else {
        let mut seen = std::collections::HashSet::with_capacity(n_samples);
        let mut out = Vec::with_capacity(n_samples);
        while out.len() < n_samples {
            let i = rand::Rng::gen_range(&mut rng, 0..space);
            if seen.insert(i) {
                out.push(i);
            }
        }
        out
    };

    let mut windows = Vec::with_capacity(n_samples + 1);
    windows.push(canary_window(spec, &spec.secret, vocab, mode)?);
    for &i in &indices {
        windows.push(canary_window(spec, &spec.secret_at(i), vocab, mode)?);
    }
    check_context(model, &windows[0])?;
    let scores = score_windows(model, &windows, batch_size)?;
    let s_true = scores[0];
    let count = scores[1..].iter().filter(|&&s| s >= s_true).count();
    let saturated = count == 0;
    let est = (1 + count) as f64 * space as f64 / (n_samples + 1) as f64;
    let rank = est.clamp(1.0, space as f64);
    Ok(ExposureReport {
        space_size: space,
        rank,
        exposure: (space as f64).log2() - rank.log2(),
        mode: ExposureMode::Sampled {
            n: n_samples,
            saturated,
        },
        true_score: s_true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, Corpus};
    use crate::model::{build_model, ModelConfig};
    use rand::{Rng, SeedableRng};

    #[test]
    fn rank_one_in_six_digit_space_is_about_twenty_bits() {
        // The extractability threshold: log2(10^6) ≈ 19.93.
        let mut scores = vec![0.0f64; 1_000_000];
        scores[940_955] = 10.0;
        let r = exposure_from_scores(940_955, &scores).unwrap();
        assert_eq!(r.rank, 1.0);
        assert!((r.exposure - 19.931568569324174).abs() < 1e-9);
    }

    #[test]
    fn bottom_rank_means_zero_exposure() {
        let mut scores = vec![0.0f64; 100];
        scores[42] = -10.0;
        let r = exposure_from_scores(42, &scores).unwrap();
        assert_eq!(r.rank, 100.0);
        assert_eq!(r.exposure, 0.0);
    }

    #[test]
    fn four_digit_space_rank_100_closed_form() {
        let mut scores: Vec<f64> = (0..10_000).map(|i| -(i as f64)).collect();
        // true candidate at enumeration index 5000, score placed so that
        // exactly 99 candidates beat it
        scores[5000] = -98.5;
        let r = exposure_from_scores(5000, &scores).unwrap();
        assert_eq!(r.rank, 100.0);
        assert!((r.exposure - 6.643856189774724).abs() < 1e-9);
    }

    #[test]
    fn ties_rank_the_true_secret_last() {
        let scores = vec![1.0f64; 50];
        let r = exposure_from_scores(7, &scores).unwrap();
        assert_eq!(r.rank, 50.0);
        assert_eq!(r.exposure, 0.0);
    }

    #[test]
    fn one_bit_between_rank_one_and_rank_two() {
        let mut scores = vec![0.0f64; 1000];
        scores[3] = 5.0;
        let e1 = exposure_from_scores(3, &scores).unwrap().exposure;
        scores[4] = 6.0;
        let e2 = exposure_from_scores(3, &scores).unwrap().exposure;
        assert!((e1 - e2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exposure_bounds_hold_on_random_scores() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let n = rng.gen_range(2..500);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let idx = rng.gen_range(0..n);
            let r = exposure_from_scores(idx, &scores).unwrap();
            assert!(r.exposure >= 0.0);
            assert!(r.exposure <= (n as f64).log2() + 1e-12);
            assert!(r.rank >= 1.0 && r.rank <= n as f64);
        }
    }

    fn char_model_and_vocab() -> (Model<f32>, super::Vocabulary, TokenizeMode) {
        let mode = TokenizeMode::Char;
        let corpus = Corpus::new(vec!["pin code 00".into()], "t");
        let vocab = build_vocab(&[&corpus], &mode).unwrap();
        let cfg = ModelConfig {
            n_blocks: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: vocab.size(),
            context_length: 16,
            tied_embeddings: true,
            adapter_reduction: None,
        };
        (build_model::<f32>(&cfg, 77).unwrap(), vocab, mode)
    }

    #[test]
    fn exact_mode_on_a_tiny_model_respects_bounds_and_budget() {
        let (model, vocab, mode) = char_model_and_vocab();
        let spec = CanarySpec::new("pin code __", "41", 1);
        let r = exposure_exact(&model, &spec, &vocab, &mode, 1000, 32).unwrap();
        assert_eq!(r.space_size, 100);
        assert!(r.exposure >= 0.0 && r.exposure <= 100f64.log2());

        match exposure_exact(&model, &spec, &vocab, &mode, 50, 32) {
            Err(Error::BudgetExceeded { space, budget }) => {
                assert_eq!(space, 100);
                assert_eq!(budget, 50);
            }
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn sampled_mode_is_deterministic_and_validates_n() {
        let (model, vocab, mode) = char_model_and_vocab();
        let spec = CanarySpec::new("pin code ___", "417", 1);
        let a = exposure_sampled(&model, &spec, 150, 5, &vocab, &mode, 32).unwrap();
        let b = exposure_sampled(&model, &spec, 150, 5, &vocab, &mode, 32).unwrap();
        assert_eq!(a, b);
        assert!(exposure_sampled(&model, &spec, 99, 5, &vocab, &mode, 32).is_err());
        let two = CanarySpec::new("pin code __", "41", 1);
        assert!(
            exposure_sampled(&model, &two, 101, 5, &vocab, &mode, 32).is_err(),
            "n > |S|"
        );
    }

    #[test]
    fn secret_blind_scores_estimate_zero_exposure() {
        // All candidates tie, so the tie-aware estimator lands on rank |S|.
        let scores = vec![-3.0f64; 201];
        let s_true = scores[0];
        let count = scores[1..].iter().filter(|&&s| s >= s_true).count();
        assert_eq!(count, 200);
        let est = (1 + count) as f64 * 10_000.0 / 201.0;
        assert!((est - 10_000.0).abs() < 1e-9);
    }
}
