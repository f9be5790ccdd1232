//! Subcommand bodies, kept separate from argument parsing so tests can call
//! them directly.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};

use memaudit_core::analysis::{emit_report, parse_metrics_csv, pareto_frontier};
use memaudit_core::attacks::mia_recall;
use memaudit_core::data::email_corpus;
use memaudit_core::train::{Checkpoint, Trajectory};

use crate::config::ExperimentConfig;
use crate::experiment::{
    self, ensure_reference, merge_reports, prepare, resolve_out_dir, run_cell, score_reference,
    CellId,
};

/// Pretrain the reference model and persist it under the output directory.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    let prep = prepare(cfg)?;
    std::fs::create_dir_all(&prep.out_dir)
        .with_context(|| prep.out_dir.display().to_string())?;
    std::fs::write(prep.out_dir.join("vocab.tsv"), prep.vocab.to_tsv())?;
    let _ = ensure_reference(&prep, false)?;
    Ok(prep.out_dir.join("reference.ckpt"))
}

/// Run a single fine-tuning cell (reusing the reference when present).
pub fn cmd_finetune(
    cfg: &ExperimentConfig,
    strategy: &str,
    lr: f64,
    repeat: usize,
) -> anyhow::Result<Trajectory> {
    let strategy: memaudit_core::model::TuningStrategy = strategy.parse()?;
    let lr_index = cfg
        .learning_rates
        .iter()
        .position(|&l| (l - lr).abs() < 1e-15)
        .ok_or_else(|| {
            anyhow!(
                "lr {lr} is not in the configured sweep {:?}",
                cfg.learning_rates
            )
        })?;
    if repeat >= cfg.repeats {
        return Err(anyhow!("repeat {repeat} outside 0..{}", cfg.repeats));
    }
    let prep = prepare(cfg)?;
    std::fs::create_dir_all(&prep.out_dir)
        .with_context(|| prep.out_dir.display().to_string())?;
    let reference = ensure_reference(&prep, true)?;
    let ref_scores = score_reference(&prep, &reference)?;
    let cell = CellId {
        strategy,
        lr_index,
        repeat,
    };
    run_cell(&prep, &reference, &ref_scores, &cell)
}

/// Membership inference of one checkpoint against a reference checkpoint,
/// over the pools defined by the config.
pub fn cmd_attack(
    cfg: &ExperimentConfig,
    model_path: &Path,
    reference_path: &Path,
    out: Option<&Path>,
) -> anyhow::Result<memaudit_core::attacks::AttackReport> {
    let prep = prepare(cfg)?;
    let model = Checkpoint::load(model_path)?.model;
    let reference = Checkpoint::load(reference_path)?.model;
    for (what, m) in [("model", &model), ("reference", &reference)] {
        if m.config().vocab_size != prep.vocab.size() {
            return Err(anyhow!(
                "{what} has vocab {}, config data tokenizes to {}",
                m.config().vocab_size,
                prep.vocab.size()
            ));
        }
    }
    let report = mia_recall(
        &model,
        &reference,
        &prep.members,
        &prep.nonmembers,
        cfg.fpr_cap,
        cfg.score_batch,
    )?;
    if let Some(path) = out {
        std::fs::write(path, serde_json::to_string_pretty(&report)?)
            .with_context(|| path.display().to_string())?;
    }
    Ok(report)
}

/// Rebuild trajectories from a metrics.csv and emit frontier + phases files.
/// Returns the global frontier.
pub fn cmd_analyze(
    metrics_path: &Path,
    out_dir: Option<&Path>,
) -> anyhow::Result<Vec<memaudit_core::analysis::MetricPoint>> {
    let text = std::fs::read_to_string(metrics_path)
        .with_context(|| metrics_path.display().to_string())?;
    let points = parse_metrics_csv(&text)?;
    if points.is_empty() {
        return Err(anyhow!("{}: no data rows", metrics_path.display()));
    }
    if let Some(dir) = out_dir {
        // Group consecutive rows into (strategy, lr) trajectories.
        let mut trajectories: Vec<Trajectory> = Vec::new();
        for p in &points {
            let fresh = match trajectories.last() {
                Some(t) => t.strategy != p.strategy || t.lr != p.lr,
                None => true,
            };
            if fresh {
                trajectories.push(Trajectory {
                    strategy: p.strategy.clone(),
                    lr: p.lr,
                    records: Vec::new(),
                });
            }
            trajectories
                .last_mut()
                .expect("just pushed")
                .records
                .push(memaudit_core::train::EpochMetrics {
                    epoch: p.epoch,
                    train_ppl: p.train_ppl,
                    val_ppl: p.val_ppl,
                    mia_recall: p.mia_recall,
                    exposure: p.exposure,
                });
        }
        emit_report(&trajectories, dir)?;
    }
    Ok(pareto_frontier(&points))
}

/// Re-merge per-cell outputs into the top-level reports.
pub fn cmd_report(cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    let out_dir = resolve_out_dir(&cfg.out_dir);
    merge_reports(cfg, &out_dir)?;
    Ok(out_dir)
}

/// Write a synthetic email-like corpus file.
pub fn cmd_gen_corpus(out: &Path, docs: usize, seed: u64) -> anyhow::Result<()> {
    if docs == 0 {
        return Err(anyhow!("--docs must be positive"));
    }
    let corpus = email_corpus(docs, seed, out.display().to_string());
    std::fs::write(out, corpus.to_text()).with_context(|| out.display().to_string())?;
    Ok(())
}

pub use experiment::run as cmd_run;
