//! The pretrain → fine-tune-grid → attack → analyze pipeline.
//!
//! Every run is a pure function of (config, master seed): corpus splits,
//! model init, batch order, attack sampling, and report bytes all derive
//! from seeds keyed off the master seed and stable tags. Grid cells write
//! only into their own subdirectories and a completed cell is marked with a
//! COMPLETE file, so interrupted runs can resume without recomputation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{anyhow, Context};
use serde::Serialize;

use memaudit_core::analysis::{
    emit_report, parse_metrics_csv, perplexity_from_nll, write_metrics_csv, MetricPoint,
};
use memaudit_core::attacks::{
    exposure_exact, exposure_sampled, mia_from_scores, score_windows, AttackReport,
    ExposureReport, SampleScore,
};
use memaudit_core::data::{
    build_vocab, encode_corpus, insert_canaries, split, windows, Corpus, Vocabulary,
    Window,
};
use memaudit_core::model::{Model, ModelConfig, TuningStrategy};
use memaudit_core::seed::derive_seed;
use memaudit_core::train::{
    finetune, pretrain, Checkpoint, DirCheckpoints, EvalOutcome, TrainConfig, Trajectory,
    ROLE_REFERENCE,
};

use crate::config::ExperimentConfig;

/// Environment variable that prefixes relative output directories.
pub const OUT_ROOT_ENV: &str = "MEMAUDIT_OUT_ROOT";

pub struct RunSummary {
    pub out_dir: PathBuf,
    pub cells_total: usize,
    pub cells_run: usize,
    pub cells_skipped: usize,
    pub failures: Vec<String>,
}

/// Tokenized corpora and attack pools shared by every grid cell.
pub struct Prepared {
    pub cfg: ExperimentConfig,
    pub out_dir: PathBuf,
    pub vocab: Vocabulary,
    pub model_cfg: ModelConfig,
    pub pretrain_train_ids: Vec<u32>,
    pub pretrain_val_ids: Vec<u32>,
    pub ft_train_ids: Vec<u32>,
    pub ft_val_ids: Vec<u32>,
    /// MIA member pool (fine-tuning train windows, canaries included).
    pub members: Vec<Window>,
    /// MIA non-member pool (fine-tuning validation windows).
    pub nonmembers: Vec<Window>,
}

/// Reference-model log-likelihoods of both pools, computed once per run.
pub struct RefScores {
    pub members: Vec<f64>,
    pub nonmembers: Vec<f64>,
}

pub fn resolve_out_dir(configured: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if configured.is_relative() => PathBuf::from(root).join(configured),
        _ => configured.to_path_buf(),
    }
}

/// Take every (n/cap)-th window, deterministically, when a pool cap is set.
fn subsample(mut ws: Vec<Window>, cap: usize) -> Vec<Window> {
    if cap == 0 || ws.len() <= cap {
        return ws;
    }
    let n = ws.len();
    let picked: Vec<usize> = (0..cap).map(|i| i * n / cap).collect();
    let mut out = Vec::with_capacity(cap);
    for (i, w) in ws.drain(..).enumerate() {
        if picked.binary_search(&i).is_ok() {
            out.push(w);
        }
    }
    out
}

/// Load corpora, split, inject canaries, build the vocabulary, tokenize,
/// and cut the attack pools.
pub fn prepare(cfg: &ExperimentConfig) -> anyhow::Result<Prepared> {
    let out_dir = resolve_out_dir(&cfg.out_dir);
    let pretrain_corpus = Corpus::from_files(&cfg.pretrain_paths, "pretrain")?;
    let finetune_corpus = Corpus::from_files(&cfg.finetune_paths, "finetune")?;

    let (pre_train, pre_val) = split(
        &pretrain_corpus,
        cfg.val_fraction,
        derive_seed(cfg.master_seed, "split-pretrain"),
    )?;
    let (ft_train, ft_val) = split(
        &finetune_corpus,
        cfg.val_fraction,
        derive_seed(cfg.master_seed, "split-finetune"),
    )?;
    // Canaries go into the fine-tuning training documents only, before the
    // vocabulary is built (the template words must be in vocabulary, the
    // way a pretrained tokenizer would know them).
    let ft_train = match &cfg.canary {
        Some(spec) => insert_canaries(&ft_train, spec)?,
        None => ft_train,
    };

    let vocab = build_vocab(&[&pre_train, &pre_val, &ft_train, &ft_val], &cfg.tokenizer)?;
    let model_cfg = cfg.model_config(vocab.size());
    model_cfg.validate()?;

    let pretrain_train_ids = encode_corpus(&pre_train, &vocab, &cfg.tokenizer);
    let pretrain_val_ids = encode_corpus(&pre_val, &vocab, &cfg.tokenizer);
    let ft_train_ids = encode_corpus(&ft_train, &vocab, &cfg.tokenizer);
    let ft_val_ids = encode_corpus(&ft_val, &vocab, &cfg.tokenizer);

    let members = subsample(windows(&ft_train_ids, cfg.seq_len)?, cfg.max_members);
    let nonmembers = subsample(windows(&ft_val_ids, cfg.seq_len)?, cfg.max_nonmembers);

    Ok(Prepared {
        cfg: cfg.clone(),
        out_dir,
        vocab,
        model_cfg,
        pretrain_train_ids,
        pretrain_val_ids,
        ft_train_ids,
        ft_val_ids,
        members,
        nonmembers,
    })
}

fn reference_path(out_dir: &Path) -> PathBuf {
    out_dir.join("reference.ckpt")
}

/// Load the reference checkpoint if present (resume), else pretrain and
/// persist it. The reference is pretrained on its own corpus and never
/// fine-tuned.
pub fn ensure_reference(prep: &Prepared, resume: bool) -> anyhow::Result<Model<f32>> {
    let path = reference_path(&prep.out_dir);
    if resume && path.exists() {
        let ckpt = Checkpoint::load(&path)?;
        if ckpt.role != ROLE_REFERENCE {
            return Err(anyhow!(
                "{}: checkpoint role is {:?}, expected reference",
                path.display(),
                ckpt.role
            ));
        }
        if ckpt.model.config() != &prep.model_cfg {
            return Err(anyhow!(
                "{}: reference was trained with a different model config",
                path.display()
            ));
        }
        return Ok(ckpt.model);
    }
    let tc = TrainConfig {
        learning_rate: prep.cfg.pretrain_lr,
        epochs: prep.cfg.pretrain_epochs,
        batch_size: prep.cfg.batch_size,
        seq_len: prep.cfg.seq_len,
        weight_decay: prep.cfg.weight_decay,
        grad_clip: prep.cfg.grad_clip,
        master_seed: derive_seed(prep.cfg.master_seed, "pretrain"),
        from_scratch: false,
        ..TrainConfig::default()
    };
    let ckpt = pretrain(
        &prep.model_cfg,
        &prep.pretrain_train_ids,
        &prep.pretrain_val_ids,
        &tc,
    )?;
    ckpt.save(&path)?;
    Ok(ckpt.model)
}

pub fn score_reference(prep: &Prepared, reference: &Model<f32>) -> anyhow::Result<RefScores> {
    Ok(RefScores {
        members: score_windows(reference, &prep.members, prep.cfg.score_batch)?,
        nonmembers: score_windows(reference, &prep.nonmembers, prep.cfg.score_batch)?,
    })
}

/// One grid coordinate.
#[derive(Debug, Clone)]
pub struct CellId {
    pub strategy: TuningStrategy,
    pub lr_index: usize,
    pub repeat: usize,
}

impl CellId {
    pub fn label(&self) -> String {
        format!(
            "{}/lr{}_rep{}",
            self.strategy.label(),
            self.lr_index,
            self.repeat
        )
    }

    pub fn dir(&self, out_dir: &Path) -> PathBuf {
        out_dir
            .join("cells")
            .join(self.strategy.label())
            .join(format!("lr{}_rep{}", self.lr_index, self.repeat))
    }

    pub fn seed(&self, master: u64) -> u64 {
        derive_seed(
            master,
            &format!(
                "cell/{}/lr{}/rep{}",
                self.strategy.label(),
                self.lr_index,
                self.repeat
            ),
        )
    }
}

pub fn grid(cfg: &ExperimentConfig) -> Vec<CellId> {
    let mut cells = Vec::new();
    for strategy in &cfg.strategies {
        for lr_index in 0..cfg.learning_rates.len() {
            for repeat in 0..cfg.repeats {
                cells.push(CellId {
                    strategy: strategy.clone(),
                    lr_index,
                    repeat,
                });
            }
        }
    }
    cells
}

fn cell_complete(dir: &Path) -> bool {
    dir.join("COMPLETE").exists() && dir.join("metrics.csv").exists()
}

#[derive(Serialize)]
struct ExposureSummary {
    base: ExposureReport,
    final_sampled: ExposureReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_exact: Option<ExposureReport>,
}

/// Run one (strategy, lr, repeat) cell end to end and persist its outputs.
pub fn run_cell(
    prep: &Prepared,
    reference: &Model<f32>,
    ref_scores: &RefScores,
    cell: &CellId,
) -> anyhow::Result<Trajectory> {
    let cfg = &prep.cfg;
    let dir = cell.dir(&prep.out_dir);
    std::fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
    let cell_seed = cell.seed(cfg.master_seed);
    let lr = cfg.learning_rates[cell.lr_index];

    // The cell's starting model: the reference plus whatever surgery the
    // strategy needs (adapter insertion, untying). Both are forward no-ops.
    let mut base = reference.clone();
    match &cell.strategy {
        TuningStrategy::Adapters(r) => {
            base.insert_adapters(*r, derive_seed(cell_seed, "adapters"))?
        }
        TuningStrategy::UntiedFull => base.untie_embeddings()?,
        _ => {}
    }

    let tc = TrainConfig {
        learning_rate: lr,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seq_len: cfg.seq_len,
        weight_decay: cfg.weight_decay,
        grad_clip: cfg.grad_clip,
        master_seed: cell_seed,
        from_scratch: cell.strategy.is_from_scratch(),
        ..TrainConfig::default()
    };

    let member_tokens: usize = prep.members.iter().map(|w| w.seq_len()).sum();
    let nonmember_tokens: usize = prep.nonmembers.iter().map(|w| w.seq_len()).sum();

    // Exposure of the canary before any fine-tuning (epoch 0).
    let base_exposure = match &cfg.canary {
        Some(spec) => {
            let epoch0 = if tc.from_scratch {
                memaudit_core::model::build_model::<f32>(
                    base.config(),
                    derive_seed(cell_seed, "scratch-init"),
                )?
            } else {
                base.clone()
            };
            Some(exposure_sampled(
                &epoch0,
                spec,
                cfg.exposure_samples,
                derive_seed(cell_seed, "exposure-0"),
                &prep.vocab,
                &cfg.tokenizer,
                cfg.score_batch,
            )?)
        }
        None => None,
    };

    let mut last_report: Option<AttackReport> = None;
    let mut last_exposure: Option<ExposureReport> = None;
    let mut final_model: Option<Model<f32>> = None;
    let mut eval = |epoch: u32, model: &Model<f32>| {
        let m_members = score_windows(model, &prep.members, cfg.score_batch)?;
        let m_nonmembers = score_windows(model, &prep.nonmembers, cfg.score_batch)?;
        let pair = |pm: &[f64], pr: &[f64]| -> Vec<SampleScore> {
            pm.iter()
                .zip(pr.iter())
                .enumerate()
                .map(|(id, (&log_pm, &log_pr))| SampleScore { id, log_pm, log_pr })
                .collect()
        };
        let report = mia_from_scores(
            &pair(&m_members, &ref_scores.members),
            &pair(&m_nonmembers, &ref_scores.nonmembers),
            cfg.fpr_cap,
            false,
        )?;
        // The same per-window likelihoods double as the perplexity sums.
        let train_ppl = perplexity_from_nll(-m_members.iter().sum::<f64>(), member_tokens);
        let val_ppl = perplexity_from_nll(-m_nonmembers.iter().sum::<f64>(), nonmember_tokens);
        let exposure = match &cfg.canary {
            Some(spec) => Some(exposure_sampled(
                model,
                spec,
                cfg.exposure_samples,
                derive_seed(cell_seed, &format!("exposure-{epoch}")),
                &prep.vocab,
                &cfg.tokenizer,
                cfg.score_batch,
            )?),
            None => None,
        };
        let recall = report.recall;
        last_report = Some(report);
        if epoch == cfg.epochs {
            final_model = Some(model.clone());
        }
        let exposure_bits = exposure.as_ref().map(|e| e.exposure);
        last_exposure = exposure;
        Ok(Some(EvalOutcome {
            train_ppl,
            val_ppl,
            mia_recall: Some(recall),
            exposure: exposure_bits,
        }))
    };

    let mut sink = DirCheckpoints::new(&dir, cfg.keep_all_checkpoints)?;
    let trajectory = finetune(
        &base,
        &cell.strategy,
        &prep.ft_train_ids,
        &prep.ft_val_ids,
        &tc,
        cell_seed,
        &mut sink,
        &mut eval,
    )?;

    // Persist per-cell outputs, then the completion marker last.
    let points: Vec<MetricPoint> = trajectory
        .records
        .iter()
        .map(|r| MetricPoint {
            strategy: trajectory.strategy.clone(),
            lr: trajectory.lr,
            epoch: r.epoch,
            train_ppl: r.train_ppl,
            val_ppl: r.val_ppl,
            mia_recall: r.mia_recall,
            exposure: r.exposure,
        })
        .collect();
    write_metrics_csv(&points, &dir.join("metrics.csv"))?;

    if let Some(report) = &last_report {
        let path = dir.join("attack_report.json");
        let json = serde_json::to_string_pretty(report)?;
        std::fs::write(&path, json).with_context(|| path.display().to_string())?;
    }
    if let (Some(base_exp), Some(final_sampled), Some(spec)) =
        (base_exposure, last_exposure, &cfg.canary)
    {
        let final_exact = if cfg.exposure_final_exact
            && spec.space_size() <= cfg.exposure_budget
        {
            let model = final_model
                .as_ref()
                .ok_or_else(|| anyhow!("final model missing for exact exposure"))?;
            Some(exposure_exact(
                model,
                spec,
                &prep.vocab,
                &cfg.tokenizer,
                cfg.exposure_budget,
                cfg.score_batch,
            )?)
        } else {
            None
        };
        let summary = ExposureSummary {
            base: base_exp,
            final_sampled,
            final_exact,
        };
        let path = dir.join("exposure_report.json");
        std::fs::write(&path, serde_json::to_string_pretty(&summary)?)
            .with_context(|| path.display().to_string())?;
    }
    std::fs::write(dir.join("COMPLETE"), b"ok\n")?;
    Ok(trajectory)
}

/// Mean over repeats for each (strategy, lr, epoch); raw per-repeat rows
/// stay in the cell directories.
fn average_trajectories(cfg: &ExperimentConfig, out_dir: &Path) -> anyhow::Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for strategy in &cfg.strategies {
        for (lr_index, &lr) in cfg.learning_rates.iter().enumerate() {
            let mut per_rep: Vec<Vec<MetricPoint>> = Vec::new();
            for repeat in 0..cfg.repeats {
                let cell = CellId {
                    strategy: strategy.clone(),
                    lr_index,
                    repeat,
                };
                let path = cell.dir(out_dir).join("metrics.csv");
                if !path.exists() {
                    continue; // failed cell, recorded in failures.log
                }
                let text = std::fs::read_to_string(&path)
                    .with_context(|| path.display().to_string())?;
                per_rep.push(parse_metrics_csv(&text)?);
            }
            if per_rep.is_empty() {
                continue;
            }
            let epochs = per_rep.iter().map(|r| r.len()).min().unwrap_or(0);
            let mut records = Vec::with_capacity(epochs);
            for e in 0..epochs {
                let n = per_rep.len() as f64;
                let mean = |f: &dyn Fn(&MetricPoint) -> f64| {
                    per_rep.iter().map(|r| f(&r[e])).sum::<f64>() / n
                };
                let mean_opt = |f: &dyn Fn(&MetricPoint) -> Option<f64>| {
                    let vals: Vec<f64> = per_rep.iter().filter_map(|r| f(&r[e])).collect();
                    if vals.len() == per_rep.len() {
                        Some(vals.iter().sum::<f64>() / n)
                    } else {
                        None
                    }
                };
                records.push(memaudit_core::train::EpochMetrics {
                    epoch: (e + 1) as u32,
                    train_ppl: mean(&|p| p.train_ppl),
                    val_ppl: mean(&|p| p.val_ppl),
                    mia_recall: mean_opt(&|p| p.mia_recall),
                    exposure: mean_opt(&|p| p.exposure),
                });
            }
            out.push(Trajectory {
                strategy: strategy.label(),
                lr,
                records,
            });
        }
    }
    Ok(out)
}

/// Merge per-cell outputs into the top-level metrics.csv / pareto.svg /
/// phases.txt (repeat-averaged).
pub fn merge_reports(cfg: &ExperimentConfig, out_dir: &Path) -> anyhow::Result<()> {
    let trajectories = average_trajectories(cfg, out_dir)?;
    if trajectories.is_empty() {
        return Err(anyhow!("no completed cells to report on"));
    }
    emit_report(&trajectories, out_dir)?;
    Ok(())
}

/// The full pipeline: pretrain (or reuse) the reference, run every grid
/// cell (skipping completed ones under `resume`), then merge reports.
/// A failing cell is recorded and the remaining cells continue.
pub fn run(cfg: &ExperimentConfig, resume: bool) -> anyhow::Result<RunSummary> {
    let prep = prepare(cfg)?;
    std::fs::create_dir_all(&prep.out_dir)
        .with_context(|| prep.out_dir.display().to_string())?;
    std::fs::write(
        prep.out_dir.join("config.resolved.txt"),
        cfg.resolved_text(),
    )?;
    std::fs::write(prep.out_dir.join("vocab.tsv"), prep.vocab.to_tsv())?;

    let reference = ensure_reference(&prep, resume)?;
    let ref_scores = score_reference(&prep, &reference)?;

    let cells = grid(cfg);
    let todo: Vec<&CellId> = cells
        .iter()
        .filter(|c| !(resume && cell_complete(&c.dir(&prep.out_dir))))
        .collect();
    let skipped = cells.len() - todo.len();

    let failures = Mutex::new(Vec::<(usize, String)>::new());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let workers = cfg.workers.min(todo.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= todo.len() {
                    break;
                }
                let cell = todo[i];
                if let Err(e) = run_cell(&prep, &reference, &ref_scores, cell) {
                    failures
                        .lock()
                        .expect("failure log lock")
                        .push((i, format!("{}: {e:#}", cell.label())));
                }
            });
        }
    });
    let mut failures = failures.into_inner().expect("failure log lock");
    failures.sort();
    let failures: Vec<String> = failures.into_iter().map(|(_, m)| m).collect();

    if !failures.is_empty() {
        let mut log = String::new();
        for f in &failures {
            writeln!(log, "{f}").expect("string write");
        }
        std::fs::write(prep.out_dir.join("failures.log"), log)?;
    }

    merge_reports(cfg, &prep.out_dir)?;
    Ok(RunSummary {
        out_dir: prep.out_dir.clone(),
        cells_total: cells.len(),
        cells_run: todo.len() - failures.len(),
        cells_skipped: skipped,
        failures,
    })
}
