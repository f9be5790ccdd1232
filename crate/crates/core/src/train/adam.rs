//! Adam with bias correction, decoupled weight decay, and global-norm
//! gradient clipping. Updates touch only the parameters whose moment
//! buffers were initialized (the trainable set); everything else is frozen
//! no matter what gradients arrive.

use crate::error::{Error, Result};
use crate::model::ParamRegistry;

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (applied to weights directly, not through the gradient).
    pub weight_decay: f64,
}

/// First/second moment buffers aligned with registry order; `None` marks a
/// frozen parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<Option<Vec<f32>>>,
    v: Vec<Option<Vec<f32>>>,
}

impl AdamState {
    /// Zero-initialized state for the masked (trainable) registry entries.
    pub fn new(registry: &ParamRegistry<f32>, trainable_mask: &[bool]) -> Result<Self> {
        if trainable_mask.len() != registry.len() {
            return Err(Error::contract(format!(
                "adam state: mask of {} for registry of {}",
                trainable_mask.len(),
                registry.len()
            )));
        }
        let m = registry
            .values()
            .zip(trainable_mask.iter())
            .map(|(t, &on)| on.then(|| vec![0.0f32; t.numel()]))
            .collect::<Vec<_>>();
        let v = m.clone();
        Ok(AdamState { step: 0, m, v })
    }
}

/// Scale all gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Option<Vec<f32>>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        for &v in g {
            sq += (v as f64) * (v as f64);
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// One Adam step over the registry. `grads` is aligned with registry order;
/// entries that are `None` (no gradient reached the parameter) or frozen in
/// `state` are left untouched.
pub fn adam_step(
    params: &mut ParamRegistry<f32>,
    grads: &[Option<Vec<f32>>],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::contract(format!(
            "adam_step: {} grads / {} moments for registry of {}",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let (b1, b2) = (hyper.beta1 as f32, hyper.beta2 as f32);
    let lr = hyper.lr as f32;
    let eps = hyper.eps as f32;
    let decay = 1.0 - (hyper.lr * hyper.weight_decay) as f32;

    for (idx, (_, tensor)) in params.iter_mut().enumerate() {
        let (m, v) = match (&mut state.m[idx], &mut state.v[idx]) {
            (Some(m), Some(v)) => (m, v),
            _ => continue, // frozen
        };
        let g = match &grads[idx] {
            Some(g) => g,
            None => continue, // no gradient reached it this step
        };
        if g.len() != tensor.numel() {
            return Err(Error::contract(format!(
                "adam_step: gradient length {} for parameter of {}",
                g.len(),
                tensor.numel()
            )));
        }
        if hyper.weight_decay > 0.0 {
            for w in tensor.data_mut() {
                *w *= decay;
            }
        }
        let data = tensor.data_mut();
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] as f64 / bc1;
            let v_hat = v[i] as f64 / bc2;
            data[i] -= lr * (m_hat / (v_hat.sqrt() + eps as f64)) as f32;
        }
    }
    Ok(())
}
