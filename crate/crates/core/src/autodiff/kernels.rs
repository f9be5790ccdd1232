//! Raw dense kernels shared by forward ops and their backward rules.
//!
//! All kernels are sequential with a fixed accumulation order, so results
//! are bit-reproducible for identical inputs.

use super::tensor::Scalar;

/// out[m×n] (+)= a[m×k] · b[k×n]
pub fn mm_nn<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize, acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        if !acc {
            crow.fill(F::zero());
        }
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow.iter()) {
                *c = *c + av * bv;
            }
        }
    }
}

/// out[m×n] (+)= a[m×k] · b[n×k]ᵀ  (dot products of rows)
pub fn mm_nt<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize, acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = F::zero();
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                s = s + av * bv;
            }
            let c = &mut out[i * n + j];
            *c = if acc { *c + s } else { s };
        }
    }
}

/// out[k×n] (+)= a[m×k]ᵀ · b[m×n]
pub fn mm_tn<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize, acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    if !acc {
        out.fill(F::zero());
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let crow = &mut out[l * n..(l + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow.iter()) {
                *c = *c + av * bv;
            }
        }
    }
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_row<F: Scalar>(row: &[F], out: &mut [F]) {
    let mut mx = row[0];
    for &v in row.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = F::zero();
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        let e = (v - mx).exp();
        *o = e;
        sum = sum + e;
    }
    let inv = F::one() / sum;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

/// log(sum(exp(row))) with max subtraction.
pub fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let mut mx = row[0];
    for &v in row.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = F::zero();
    for &v in row.iter() {
        sum = sum + (v - mx).exp();
    }
    mx + sum.ln()
}

/// Tanh-approximation GELU (GPT-2 convention):
/// gelu(x) = 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))
pub fn gelu_scalar<F: Scalar>(x: F) -> F {
    let k = F::c(0.7978845608028654); // √(2/π)
    let a = F::c(0.044715);
    let inner = k * (x + a * x * x * x);
    F::c(0.5) * x * (F::one() + inner.tanh())
}

/// Derivative of the tanh-approximation GELU.
pub fn gelu_grad_scalar<F: Scalar>(x: F) -> F {
    let k = F::c(0.7978845608028654);
    let a = F::c(0.044715);
    let inner = k * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = F::one() - t * t;
    let dinner = k * (F::one() + F::c(3.0) * a * x * x);
    F::c(0.5) * (F::one() + t) + F::c(0.5) * x * sech2 * dinner
}
