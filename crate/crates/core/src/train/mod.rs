//! The training loop: strategy-based freezing, Adam, per-epoch metric
//! capture, and checkpoint persistence.

mod adam;
mod checkpoint;

pub use adam::{adam_step, clip_global_norm, AdamHyper, AdamState};
pub use checkpoint::{Checkpoint, ROLE_FINETUNE, ROLE_REFERENCE};

use serde::{Deserialize, Serialize};

use crate::analysis::perplexity;
use crate::autodiff::Tape;
use crate::data::{make_batches, windows};
use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig, TuningStrategy};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub seq_len: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub master_seed: u64,
    /// Replace the base checkpoint with a fresh random init.
    pub from_scratch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 20,
            batch_size: 8,
            seq_len: 32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: Some(1.0),
            master_seed: 0,
            from_scratch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::contract("train config: learning_rate must be positive"));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::contract(
                "train config: batch_size and seq_len must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::contract("train config: betas must lie in [0, 1)"));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::contract(
                "train config: eps must be positive and weight_decay non-negative",
            ));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return Err(Error::contract("train config: grad_clip must be positive"));
            }
        }
        Ok(())
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Metrics captured at the end of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub train_ppl: f64,
    pub val_ppl: f64,
    /// Fraction in [0, 1].
    pub mia_recall: Option<f64>,
    /// Bits.
    pub exposure: Option<f64>,
}

/// Per-epoch records for one (strategy, learning-rate) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub strategy: String,
    pub lr: f64,
    pub records: Vec<EpochMetrics>,
}

impl Trajectory {
    /// Epoch indices must increase strictly from 1.
    pub fn check_epochs(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.epoch != (i + 1) as u32 {
                return Err(Error::contract(format!(
                    "trajectory: record {i} has epoch {}, expected {}",
                    r.epoch,
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// Destination for per-epoch checkpoints.
pub trait CheckpointSink {
    fn persist(&mut self, ckpt: &Checkpoint) -> Result<()>;
}

/// Drops every checkpoint (metric-only runs).
pub struct DiscardCheckpoints;

impl CheckpointSink for DiscardCheckpoints {
    fn persist(&mut self, _ckpt: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

/// Writes `epoch_NNN.ckpt` files into a directory; with `keep_all` off,
/// earlier epochs are removed as later ones land.
pub struct DirCheckpoints {
    dir: std::path::PathBuf,
    keep_all: bool,
    last: Option<std::path::PathBuf>,
}

impl DirCheckpoints {
    pub fn new(dir: impl Into<std::path::PathBuf>, keep_all: bool) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(DirCheckpoints {
            dir,
            keep_all,
            last: None,
        })
    }

    pub fn epoch_path(dir: &std::path::Path, epoch: u32) -> std::path::PathBuf {
        dir.join(format!("epoch_{epoch:03}.ckpt"))
    }
}

impl CheckpointSink for DirCheckpoints {
    fn persist(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let path = Self::epoch_path(&self.dir, ckpt.epoch);
        ckpt.save(&path)?;
        if !self.keep_all {
            if let Some(prev) = self.last.take() {
                let _ = std::fs::remove_file(prev);
            }
        }
        self.last = Some(path);
        Ok(())
    }
}

/// Keeps every checkpoint in memory (tests).
#[derive(Default)]
pub struct MemoryCheckpoints(pub Vec<Checkpoint>);

impl CheckpointSink for MemoryCheckpoints {
    fn persist(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.0.push(ckpt.clone());
        Ok(())
    }
}

/// Metrics supplied by a custom end-of-epoch evaluator.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub train_ppl: f64,
    pub val_ppl: f64,
    pub mia_recall: Option<f64>,
    pub exposure: Option<f64>,
}

/// End-of-epoch evaluation hook. Returning `None` makes the trainer compute
/// plain train/val perplexities itself; returning an outcome replaces the
/// whole metric record (orchestrators use this to derive perplexities from
/// the same per-window scores the attack consumes, scoring each window once).
pub type EpochEval<'a> = dyn FnMut(u32, &Model<f32>) -> Result<Option<EvalOutcome>> + 'a;

/// Plain perplexity-only evaluation.
pub fn no_epoch_eval(_epoch: u32, _model: &Model<f32>) -> Result<Option<EvalOutcome>> {
    Ok(None)
}

/// The shared epoch loop. Mutates `model` in place; `run_seed` drives batch
/// order (one derived stream per epoch).
#[allow(clippy::too_many_arguments)]
fn run_epochs(
    model: &mut Model<f32>,
    strategy: &TuningStrategy,
    train_ids: &[u32],
    val_ids: &[u32],
    tc: &TrainConfig,
    run_seed: u64,
    sink: &mut dyn CheckpointSink,
    epoch_eval: &mut EpochEval,
) -> Result<Trajectory> {
    tc.validate()?;
    let mask = model.trainable_mask(strategy)?;
    let mut adam = AdamState::new(model.params(), &mask)?;
    let hyper = tc.hyper();
    let train_windows = windows(train_ids, tc.seq_len)?;
    let val_windows = windows(val_ids, tc.seq_len)?;
    let eval_batch = tc.batch_size.max(8);

    let mut trajectory = Trajectory {
        strategy: strategy.label(),
        lr: tc.learning_rate,
        records: Vec::with_capacity(tc.epochs as usize),
    };

    for epoch in 1..=tc.epochs {
        let epoch_seed = derive_seed(run_seed, &format!("epoch-{epoch}"));
        let batches = make_batches(train_ids, tc.seq_len, tc.batch_size, epoch_seed)?;
        for (bi, batch) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let (loss, fwd) = model.loss_recorded(
                &mut tape,
                &batch.inputs,
                &batch.targets,
                batch.batch_size,
                batch.seq_len,
                Some(&mask),
            )?;
            let loss_val = tape.value(loss)[0];
            if !loss_val.is_finite() {
                return Err(Error::contract(format!(
                    "non-finite loss ({loss_val}) at epoch {epoch}, batch {bi}"
                )));
            }
            tape.backward(loss)?;
            let mut grads: Vec<Option<Vec<f32>>> = fwd
                .leaves
                .iter()
                .map(|&(idx, leaf)| {
                    if mask[idx] {
                        tape.grad(leaf).map(|g| g.to_vec())
                    } else {
                        None
                    }
                })
                .collect();
            if let Some(max_norm) = tc.grad_clip {
                clip_global_norm(&mut grads, max_norm);
            }
            adam_step(model.params_mut(), &grads, &mut adam, &hyper)?;
        }

        let outcome = match epoch_eval(epoch, model)? {
            Some(o) => o,
            None => EvalOutcome {
                train_ppl: perplexity(model, &train_windows, eval_batch)?,
                val_ppl: perplexity(model, &val_windows, eval_batch)?,
                mia_recall: None,
                exposure: None,
            },
        };
        let metrics = EpochMetrics {
            epoch,
            train_ppl: outcome.train_ppl,
            val_ppl: outcome.val_ppl,
            mia_recall: outcome.mia_recall,
            exposure: outcome.exposure,
        };
        trajectory.records.push(metrics.clone());
        sink.persist(&Checkpoint {
            model: model.clone(),
            train_config: tc.clone(),
            strategy: Some(strategy.label()),
            role: ROLE_FINETUNE.into(),
            epoch,
            metrics: Some(metrics),
        })?;
    }
    Ok(trajectory)
}

/// Train a fresh model on `train_ids` with every parameter trainable. The
/// result is the reference model R for membership inference: pre-trained,
/// never fine-tuned. The caller is responsible for keeping the pretraining
/// corpus disjoint from any fine-tuning corpus.
pub fn pretrain(
    config: &ModelConfig,
    train_ids: &[u32],
    val_ids: &[u32],
    tc: &TrainConfig,
) -> Result<Checkpoint> {
    let init_seed = derive_seed(tc.master_seed, "pretrain-init");
    let run_seed = derive_seed(tc.master_seed, "pretrain-run");
    let mut model = build_model::<f32>(config, init_seed)?;
    let mut sink = DiscardCheckpoints;
    let trajectory = run_epochs(
        &mut model,
        &TuningStrategy::Full,
        train_ids,
        val_ids,
        tc,
        run_seed,
        &mut sink,
        &mut no_epoch_eval,
    )?;
    Ok(Checkpoint {
        model,
        train_config: tc.clone(),
        strategy: None,
        role: ROLE_REFERENCE.into(),
        epoch: tc.epochs,
        metrics: trajectory.records.last().cloned(),
    })
}

/// Fine-tune from a base model under a strategy. With
/// `tc.from_scratch` (or the from-scratch strategy) the base parameters are
/// replaced by a fresh seeded init of the same shape. Each epoch ends with
/// metric capture and a checkpoint handed to `sink`.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    base: &Model<f32>,
    strategy: &TuningStrategy,
    train_ids: &[u32],
    val_ids: &[u32],
    tc: &TrainConfig,
    run_seed: u64,
    sink: &mut dyn CheckpointSink,
    epoch_eval: &mut EpochEval,
) -> Result<Trajectory> {
    let mut model = if tc.from_scratch || strategy.is_from_scratch() {
        build_model::<f32>(base.config(), derive_seed(run_seed, "scratch-init"))?
    } else {
        base.clone()
    };
    run_epochs(
        &mut model,
        strategy,
        train_ids,
        val_ids,
        tc,
        run_seed,
        sink,
        epoch_eval,
    )
}
