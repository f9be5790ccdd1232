//! Central finite-difference validation of analytic gradients.

use super::tape::{Tape, VarId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative-error denominator floor: below this magnitude the comparison is
/// effectively absolute, which keeps roundoff in the central difference from
/// masquerading as a gradient bug on near-zero coordinates.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// Compare analytic gradients of a scalar-valued tensor function against
/// central finite differences with step `h`.
///
/// `f` receives a fresh tape and one leaf per input tensor and must return a
/// scalar value recorded on that tape. Returns the max over all coordinates
/// of |analytic − numeric| / max(|analytic|, |numeric|, floor).
pub fn grad_check<Builder>(mut f: Builder, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    Builder: FnMut(&mut Tape<f64>, &[VarId]) -> Result<VarId>,
{
    if h <= 0.0 {
        return Err(Error::contract("grad_check: step size must be positive"));
    }

    let eval = |f: &mut Builder, tensors: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<VarId>, VarId)> {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = tensors.iter().map(|t| tape.leaf_tensor(t)).collect();
        let loss = f(&mut tape, &ids)?;
        if tape.numel(loss) != 1 {
            return Err(Error::contract(format!(
                "grad_check: function must be scalar-valued, got shape {:?}",
                tape.shape(loss)
            )));
        }
        Ok((tape, ids, loss))
    };

    // Analytic pass.
    let grad_inputs: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| t.clone().with_requires_grad(true))
        .collect();
    let (mut tape, ids, loss) = eval(&mut f, &grad_inputs)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| tape.grad_dense(id)).collect();

    // Numeric pass, one coordinate at a time.
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    for (ti, input) in inputs.iter().enumerate() {
        for c in 0..input.numel() {
            let x0 = input.data()[c];
            work[ti].data_mut()[c] = x0 + h;
            let (tape_p, _, loss_p) = eval(&mut f, &work)?;
            let fp = tape_p.value(loss_p)[0];
            work[ti].data_mut()[c] = x0 - h;
            let (tape_m, _, loss_m) = eval(&mut f, &work)?;
            let fm = tape_m.value(loss_m)[0];
            work[ti].data_mut()[c] = x0;

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti][c];
            let denom = a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
