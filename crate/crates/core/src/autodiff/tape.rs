//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every op records its inputs, its output, and enough state to replay a
//! local backward rule. `backward` walks the tape in reverse and accumulates
//! gradients exactly once per use. Storage is flat row-major; the only
//! broadcasting is the row-wise bias add.

use super::kernels::{
    gelu_grad_scalar, gelu_scalar, log_sum_exp, mm_nn, mm_nt, mm_tn, softmax_row,
};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

struct Value<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    /// Element count, kept separately because backward rules temporarily
    /// move `data` out while borrowing gradient buffers.
    numel: usize,
}

enum Op<F> {
    /// out[m×n] = a[m×k] · b[k×n]
    Matmul {
        a: VarId,
        b: VarId,
        out: VarId,
        m: usize,
        k: usize,
        n: usize,
    },
    /// out[m×n] = a[m×k] · b[n×k]ᵀ
    MatmulTransposeB {
        a: VarId,
        b: VarId,
        out: VarId,
        m: usize,
        k: usize,
        n: usize,
    },
    /// Elementwise sum of two same-shape values.
    Add { a: VarId, b: VarId, out: VarId },
    /// Elementwise product of two same-shape values.
    Mul { a: VarId, b: VarId, out: VarId },
    /// out[r×c] = x[r×c] + bias[c] broadcast over rows.
    AddRowBias {
        x: VarId,
        bias: VarId,
        out: VarId,
        rows: usize,
        cols: usize,
    },
    /// Column slice out[r×len] = x[r×cols][:, start..start+len].
    SliceCols {
        x: VarId,
        out: VarId,
        rows: usize,
        cols: usize,
        start: usize,
        len: usize,
    },
    Gelu { x: VarId, out: VarId },
    /// Row-wise softmax over the last axis.
    Softmax {
        x: VarId,
        out: VarId,
        rows: usize,
        cols: usize,
    },
    /// Row-wise log-softmax over the last axis.
    LogSoftmax {
        x: VarId,
        out: VarId,
        rows: usize,
        cols: usize,
    },
    LayerNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        out: VarId,
        rows: usize,
        cols: usize,
        eps: F,
    },
    /// Row gather; backward scatter-adds into the table.
    EmbeddingLookup {
        table: VarId,
        out: VarId,
        ids: Vec<u32>,
        dim: usize,
    },
    /// Fused masked multi-head attention over `batch` independent
    /// sequences of length `seq`. Inputs are [batch·seq × d].
    CausalAttention {
        q: VarId,
        k: VarId,
        v: VarId,
        out: VarId,
        batch: usize,
        seq: usize,
        heads: usize,
        probs_aux: usize,
    },
    /// Mean over rows of −log softmax(logits)[target]; natural log.
    CrossEntropy {
        logits: VarId,
        out: VarId,
        targets: Vec<u32>,
        rows: usize,
        cols: usize,
        probs_aux: usize,
    },
    /// Scalar sum of all elements.
    Sum { x: VarId, out: VarId },
}

/// Linear tape of recorded operations plus their values and gradients.
pub struct Tape<F: Scalar> {
    vals: Vec<Value<F>>,
    /// For leaves: whether gradient should be accumulated. Op outputs always accumulate.
    wants_grad: Vec<bool>,
    ops: Vec<Op<F>>,
    /// Saved buffers for fused backward rules (attention probs, CE probs).
    aux: Vec<Vec<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            wants_grad: Vec::new(),
            ops: Vec::new(),
            aux: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push_val(&mut self, shape: Vec<usize>, data: Vec<F>, wants_grad: bool) -> VarId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = VarId(self.vals.len());
        let numel = data.len();
        self.vals.push(Value { shape, data, numel });
        self.wants_grad.push(wants_grad);
        self.grads.push(None);
        id
    }

    /// Register an input value. Data is snapshotted onto the tape.
    pub fn leaf(&mut self, data: &[F], shape: &[usize], requires_grad: bool) -> Result<VarId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push_val(shape.to_vec(), data.to_vec(), requires_grad))
    }

    pub fn leaf_tensor(&mut self, t: &Tensor<F>) -> VarId {
        self.push_val(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    pub fn value(&self, id: VarId) -> &[F] {
        &self.vals[id.0].data
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.vals[id.0].shape
    }

    pub fn numel(&self, id: VarId) -> usize {
        self.vals[id.0].numel
    }

    /// Accumulated gradient, if any reached this value during `backward`.
    pub fn grad(&self, id: VarId) -> Option<&[F]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient as a dense vector; values never reached by backward are zero.
    pub fn grad_dense(&self, id: VarId) -> Vec<F> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![F::zero(); self.vals[id.0].numel],
        }
    }

    fn rows_cols(&self, id: VarId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        match s.len() {
            1 => Ok((1, s[0])),
            2 => Ok((s[0], s[1])),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    // ───────────────────────── forward ops ─────────────────────────

    /// C[m×n] = A[m×k] · B[k×n]
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, ka) = self.rows_cols(a, "matmul")?;
        let (kb, n) = self.rows_cols(b, "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![F::zero(); m * n];
        mm_nn(self.value(a), self.value(b), &mut out, m, ka, n, false);
        let id = self.push_val(vec![m, n], out, true);
        self.ops.push(Op::Matmul {
            a,
            b,
            out: id,
            m,
            k: ka,
            n,
        });
        Ok(id)
    }

    /// C[m×n] = A[m×k] · B[n×k]ᵀ
    pub fn matmul_transpose_b(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, ka) = self.rows_cols(a, "matmul_transpose_b")?;
        let (n, kb) = self.rows_cols(b, "matmul_transpose_b")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul_transpose_b",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![F::zero(); m * n];
        mm_nt(self.value(a), self.value(b), &mut out, m, ka, n, false);
        let id = self.push_val(vec![m, n], out, true);
        self.ops.push(Op::MatmulTransposeB {
            a,
            b,
            out: id,
            m,
            k: ka,
            n,
        });
        Ok(id)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let id = self.push_val(shape, data, true);
        self.ops.push(Op::Add { a, b, out: id });
        Ok(id)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let id = self.push_val(shape, data, true);
        self.ops.push(Op::Mul { a, b, out: id });
        Ok(id)
    }

    /// x[r×c] + bias[c], broadcast over rows.
    pub fn add_row_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let (rows, cols) = self.rows_cols(x, "add_row_bias")?;
        if self.numel(bias) != cols {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bv = self.value(bias);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let xr = &self.value(x)[r * cols..(r + 1) * cols];
            for (xi, bi) in xr.iter().zip(bv.iter()) {
                data.push(*xi + *bi);
            }
        }
        let shape = self.shape(x).to_vec();
        let id = self.push_val(shape, data, true);
        self.ops.push(Op::AddRowBias {
            x,
            bias,
            out: id,
            rows,
            cols,
        });
        Ok(id)
    }

    /// Take columns [start, start+len) of a 2-D value.
    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let (rows, cols) = self.rows_cols(x, "slice_cols")?;
        if start + len > cols {
            return Err(Error::contract(format!(
                "slice_cols [{start}, {}) out of range for {cols} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.value(x)[r * cols + start..r * cols + start + len]);
        }
        let id = self.push_val(vec![rows, len], data, true);
        self.ops.push(Op::SliceCols {
            x,
            out: id,
            rows,
            cols,
            start,
            len,
        });
        Ok(id)
    }

    pub fn gelu(&mut self, x: VarId) -> VarId {
        let data = self.value(x).iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.shape(x).to_vec();
        let id = self.push_val(shape, data, true);
        self.ops.push(Op::Gelu { x, out: id });
        id
    }

    /// Softmax along `axis`, which must be the last axis of the value.
    /// Rows are stabilized by max subtraction.
    pub fn softmax(&mut self, x: VarId, axis: usize) -> Result<VarId> {
        let rank = self.shape(x).len();
        if axis + 1 != rank {
            return Err(Error::contract(format!(
                "softmax supports the last axis only (got axis {axis} for rank {rank})"
            )));
        }
        let (rows, cols) = self.rows_cols(x, "softmax")?;
        let mut data = vec![F::zero(); rows * cols];
        for r in 0..rows {
            softmax_row(
                &self.value(x)[r * cols..(r + 1) * cols],
                &mut data[r * cols..(r + 1) * cols],
            );
        }
        let shape = self.shape(x).to_vec();
        let id = self.push_val(shape, data, true);
        self.ops.push(Op::Softmax {
            x,
            out: id,
            rows,
            cols,
        });
        Ok(id)
    }

    /// Companion of [`Tape::softmax`]: log softmax along the last axis.
    pub fn log_softmax(&mut self, x: VarId, axis: usize) -> Result<VarId> {
        let rank = self.shape(x).len();
        if axis + 1 != rank {
            return Err(Error::contract(format!(
                "log_softmax supports the last axis only (got axis {axis} for rank {rank})"
            )));
        }
        let (rows, cols) = self.rows_cols(x, "log_softmax")?;
        let mut data = vec![F::zero(); rows * cols];
        for r in 0..rows {
            let xr = &self.value(x)[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(xr);
            for (o, &v) in data[r * cols..(r + 1) * cols].iter_mut().zip(xr.iter()) {
                *o = v - lse;
            }
        }
        let shape = self.shape(x).to_vec();
        let id = self.push_val(shape, data, true);
        self.ops.push(Op::LogSoftmax {
            x,
            out: id,
            rows,
            cols,
        });
        Ok(id)
    }

    /// Normalize each row of x to zero mean / unit variance, then scale by
    /// gamma and shift by beta (both of length `cols`).
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: F) -> Result<VarId> {
        let (rows, cols) = self.rows_cols(x, "layer_norm")?;
        if self.numel(gamma) != cols || self.numel(beta) != cols {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![self.numel(gamma), self.numel(beta)],
                rhs: vec![cols],
            });
        }
        let mut data = vec![F::zero(); rows * cols];
        let inv_n = F::one() / F::c(cols as f64);
        for r in 0..rows {
            let xr = &self.value(x)[r * cols..(r + 1) * cols];
            let mut mean = F::zero();
            for &v in xr.iter() {
                mean = mean + v;
            }
            mean = mean * inv_n;
            let mut var = F::zero();
            for &v in xr.iter() {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * inv_n;
            let rstd = F::one() / (var + eps).sqrt();
            let g = self.value(gamma);
            let b = self.value(beta);
            for c in 0..cols {
                data[r * cols + c] = (xr[c] - mean) * rstd * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let id = self.push_val(shape, data, true);
        self.ops.push(Op::LayerNorm {
            x,
            gamma,
            beta,
            out: id,
            rows,
            cols,
            eps,
        });
        Ok(id)
    }

    /// Gather rows of `table` [V×d] by id. Backward scatter-adds, so repeated
    /// ids accumulate.
    pub fn embedding_lookup(&mut self, table: VarId, ids: &[u32]) -> Result<VarId> {
        let (vocab, dim) = self.rows_cols(table, "embedding_lookup")?;
        for (pos, &id) in ids.iter().enumerate() {
            if id as usize >= vocab {
                return Err(Error::IndexOutOfRange {
                    index: id as usize,
                    limit: vocab,
                    position: pos,
                });
            }
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            let r = id as usize;
            data.extend_from_slice(&self.value(table)[r * dim..(r + 1) * dim]);
        }
        let out = self.push_val(vec![ids.len(), dim], data, true);
        self.ops.push(Op::EmbeddingLookup {
            table,
            out,
            ids: ids.to_vec(),
            dim,
        });
        Ok(out)
    }

    /// Fused causal multi-head attention. q, k, v are [batch·seq × d] with
    /// d divisible by `heads`; each batch element attends within itself and
    /// position i sees keys at positions ≤ i. Scores are scaled by 1/√(d/heads).
    pub fn causal_attention(
        &mut self,
        q: VarId,
        k: VarId,
        v: VarId,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<VarId> {
        let (rows, d) = self.rows_cols(q, "causal_attention")?;
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(Error::ShapeMismatch {
                op: "causal_attention",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        if rows != batch * seq {
            return Err(Error::contract(format!(
                "causal_attention: {rows} rows != batch {batch} × seq {seq}"
            )));
        }
        if d % heads != 0 {
            return Err(Error::contract(format!(
                "causal_attention: width {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = F::one() / F::c((dh as f64).sqrt());

        let mut out = vec![F::zero(); rows * d];
        let mut probs = vec![F::zero(); batch * heads * seq * seq];
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let mut scores = vec![F::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..seq {
                    let qrow = &qv[(b * seq + i) * d + col..(b * seq + i) * d + col + dh];
                    for j in 0..=i {
                        let krow = &kv[(b * seq + j) * d + col..(b * seq + j) * d + col + dh];
                        let mut s = F::zero();
                        for (&x, &y) in qrow.iter().zip(krow.iter()) {
                            s = s + x * y;
                        }
                        scores[j] = s * scale;
                    }
                    let prow = &mut probs
                        [((b * heads + h) * seq + i) * seq..((b * heads + h) * seq + i + 1) * seq];
                    softmax_row(&scores[..=i], &mut prow[..=i]);
                    let orow = &mut out[(b * seq + i) * d + col..(b * seq + i) * d + col + dh];
                    for j in 0..=i {
                        let p = prow[j];
                        let vrow = &vv[(b * seq + j) * d + col..(b * seq + j) * d + col + dh];
                        for (o, &x) in orow.iter_mut().zip(vrow.iter()) {
                            *o = *o + p * x;
                        }
                    }
                }
            }
        }
        let probs_aux = self.aux.len();
        self.aux.push(probs);
        let shape = self.shape(q).to_vec();
        let id = self.push_val(shape, out, true);
        self.ops.push(Op::CausalAttention {
            q,
            k,
            v,
            out: id,
            batch,
            seq,
            heads,
            probs_aux,
        });
        Ok(id)
    }

    /// Mean over rows of −log softmax(logits)[target]. Natural log; scalar out.
    pub fn cross_entropy(&mut self, logits: VarId, targets: &[u32]) -> Result<VarId> {
        let (rows, cols) = self.rows_cols(logits, "cross_entropy")?;
        if targets.len() != rows {
            return Err(Error::contract(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                rows
            )));
        }
        for (pos, &t) in targets.iter().enumerate() {
            if t as usize >= cols {
                return Err(Error::IndexOutOfRange {
                    index: t as usize,
                    limit: cols,
                    position: pos,
                });
            }
        }
        let mut probs = vec![F::zero(); rows * cols];
        let mut loss = F::zero();
        for r in 0..rows {
            let xr = &self.value(logits)[r * cols..(r + 1) * cols];
            let prow = &mut probs[r * cols..(r + 1) * cols];
            softmax_row(xr, prow);
            let lse = log_sum_exp(xr);
            loss = loss + (lse - xr[targets[r] as usize]);
        }
        loss = loss / F::c(rows as f64);
        let probs_aux = self.aux.len();
        self.aux.push(probs);
        let id = self.push_val(vec![1], vec![loss], true);
        self.ops.push(Op::CrossEntropy {
            logits,
            out: id,
            targets: targets.to_vec(),
            rows,
            cols,
            probs_aux,
        });
        Ok(id)
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, x: VarId) -> VarId {
        let mut s = F::zero();
        for &v in self.value(x).iter() {
            s = s + v;
        }
        let id = self.push_val(vec![1], vec![s], true);
        self.ops.push(Op::Sum { x, out: id });
        id
    }

    // ───────────────────────── backward ─────────────────────────

    /// Reverse-order gradient accumulation seeded with d(loss)/d(loss) = 1.
    /// `loss` must be a scalar recorded on this tape.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads[loss.0] = Some(vec![F::one()]);

        for idx in (0..self.ops.len()).rev() {
            let out = match &self.ops[idx] {
                Op::Matmul { out, .. }
                | Op::MatmulTransposeB { out, .. }
                | Op::Add { out, .. }
                | Op::Mul { out, .. }
                | Op::AddRowBias { out, .. }
                | Op::SliceCols { out, .. }
                | Op::Gelu { out, .. }
                | Op::Softmax { out, .. }
                | Op::LogSoftmax { out, .. }
                | Op::LayerNorm { out, .. }
                | Op::EmbeddingLookup { out, .. }
                | Op::CausalAttention { out, .. }
                | Op::CrossEntropy { out, .. }
                | Op::Sum { out, .. } => *out,
            };
            // All consumers of `out` appear later on the tape, so its gradient
            // is final here and can be moved out.
            let gout = match self.grads[out.0].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_op(idx, &gout);
            // Leaves keep their grads; op outputs are intermediate and their
            // gradient has been fully consumed above. Restore for the loss
            // itself so callers can observe the seed.
            if out == loss {
                self.grads[out.0] = Some(gout);
            }
        }
        Ok(())
    }

    /// Ensure a gradient buffer exists for `id` and return it, or None when
    /// `id` is a leaf that does not want gradients.
    fn grad_buf(&mut self, id: VarId) -> Option<&mut [F]> {
        if !self.wants_grad[id.0] {
            return None;
        }
        let len = self.vals[id.0].numel;
        let slot = &mut self.grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![F::zero(); len]);
        }
        slot.as_deref_mut()
    }

    fn backward_op(&mut self, idx: usize, gout: &[F]) {
        // Ops are immutable once recorded; clone the light metadata to avoid
        // aliasing the &mut self needed for gradient buffers.
        match &self.ops[idx] {
            &Op::Matmul { a, b, m, k, n, .. } => {
                let bval = std::mem::take(&mut self.vals[b.0].data);
                if let Some(ga) = self.grad_buf(a) {
                    mm_nt(gout, &bval, ga, m, n, k, true); // dA += dC·Bᵀ
                }
                self.vals[b.0].data = bval;
                let aval = std::mem::take(&mut self.vals[a.0].data);
                if let Some(gb) = self.grad_buf(b) {
                    mm_tn(&aval, gout, gb, m, k, n, true); // dB += Aᵀ·dC
                }
                self.vals[a.0].data = aval;
            }
            &Op::MatmulTransposeB { a, b, m, k, n, .. } => {
                let bval = std::mem::take(&mut self.vals[b.0].data);
                if let Some(ga) = self.grad_buf(a) {
                    mm_nn(gout, &bval, ga, m, n, k, true); // dA += dC·B
                }
                self.vals[b.0].data = bval;
                let aval = std::mem::take(&mut self.vals[a.0].data);
                if let Some(gb) = self.grad_buf(b) {
                    mm_tn(gout, &aval, gb, m, n, k, true); // dB += dCᵀ·A
                }
                self.vals[a.0].data = aval;
            }
            &Op::Add { a, b, .. } => {
                if let Some(ga) = self.grad_buf(a) {
                    for (g, &d) in ga.iter_mut().zip(gout.iter()) {
                        *g = *g + d;
                    }
                }
                if let Some(gb) = self.grad_buf(b) {
                    for (g, &d) in gb.iter_mut().zip(gout.iter()) {
                        *g = *g + d;
                    }
                }
            }
            &Op::Mul { a, b, .. } => {
                let bval = std::mem::take(&mut self.vals[b.0].data);
                if let Some(ga) = self.grad_buf(a) {
                    for ((g, &d), &bv) in ga.iter_mut().zip(gout.iter()).zip(bval.iter()) {
                        *g = *g + d * bv;
                    }
                }
                self.vals[b.0].data = bval;
                let aval = std::mem::take(&mut self.vals[a.0].data);
                if let Some(gb) = self.grad_buf(b) {
                    for ((g, &d), &av) in gb.iter_mut().zip(gout.iter()).zip(aval.iter()) {
                        *g = *g + d * av;
                    }
                }
                self.vals[a.0].data = aval;
            }
            &Op::AddRowBias {
                x,
                bias,
                rows,
                cols,
                ..
            } => {
                if let Some(gx) = self.grad_buf(x) {
                    for (g, &d) in gx.iter_mut().zip(gout.iter()) {
                        *g = *g + d;
                    }
                }
                if let Some(gb) = self.grad_buf(bias) {
                    for r in 0..rows {
                        let grow = &gout[r * cols..(r + 1) * cols];
                        for (g, &d) in gb.iter_mut().zip(grow.iter()) {
                            *g = *g + d;
                        }
                    }
                }
            }
            &Op::SliceCols {
                x,
                rows,
                cols,
                start,
                len,
                ..
            } => {
                if let Some(gx) = self.grad_buf(x) {
                    for r in 0..rows {
                        let grow = &gout[r * len..(r + 1) * len];
                        let dst = &mut gx[r * cols + start..r * cols + start + len];
                        for (g, &d) in dst.iter_mut().zip(grow.iter()) {
                            *g = *g + d;
                        }
                    }
                }
            }
            &Op::Gelu { x, .. } => {
                let xval = std::mem::take(&mut self.vals[x.0].data);
                if let Some(gx) = self.grad_buf(x) {
                    for ((g, &d), &xv) in gx.iter_mut().zip(gout.iter()).zip(xval.iter()) {
                        *g = *g + d * gelu_grad_scalar(xv);
                    }
                }
                self.vals[x.0].data = xval;
            }
            &Op::Softmax {
                x, out, rows, cols, ..
            } => {
                let yval = std::mem::take(&mut self.vals[out.0].data);
                if let Some(gx) = self.grad_buf(x) {
                    for r in 0..rows {
                        let y = &yval[r * cols..(r + 1) * cols];
                        let dy = &gout[r * cols..(r + 1) * cols];
                        let mut dot = F::zero();
                        for (&yi, &di) in y.iter().zip(dy.iter()) {
                            dot = dot + yi * di;
                        }
                        let grow = &mut gx[r * cols..(r + 1) * cols];
                        for ((g, &yi), &di) in grow.iter_mut().zip(y.iter()).zip(dy.iter()) {
                            *g = *g + yi * (di - dot);
                        }
                    }
                }
                self.vals[out.0].data = yval;
            }
            &Op::LogSoftmax {
                x, out, rows, cols, ..
            } => {
                let yval = std::mem::take(&mut self.vals[out.0].data);
                if let Some(gx) = self.grad_buf(x) {
                    for r in 0..rows {
                        let y = &yval[r * cols..(r + 1) * cols];
                        let dy = &gout[r * cols..(r + 1) * cols];
                        let mut s = F::zero();
                        for &di in dy.iter() {
                            s = s + di;
                        }
                        let grow = &mut gx[r * cols..(r + 1) * cols];
                        for ((g, &yi), &di) in grow.iter_mut().zip(y.iter()).zip(dy.iter()) {
                            *g = *g + di - yi.exp() * s;
                        }
                    }
                }
                self.vals[out.0].data = yval;
            }
            &Op::LayerNorm {
                x,
                gamma,
                beta,
                rows,
                cols,
                eps,
                ..
            } => {
                let xval = std::mem::take(&mut self.vals[x.0].data);
                let gval = std::mem::take(&mut self.vals[gamma.0].data);
                let inv_n = F::one() / F::c(cols as f64);
                // Recompute per-row mean / rstd (cheaper than saving them).
                let mut xhat = vec![F::zero(); cols];
                for r in 0..rows {
                    let xr = &xval[r * cols..(r + 1) * cols];
                    let dy = &gout[r * cols..(r + 1) * cols];
                    let mut mean = F::zero();
                    for &v in xr.iter() {
                        mean = mean + v;
                    }
                    mean = mean * inv_n;
                    let mut var = F::zero();
                    for &v in xr.iter() {
                        let d = v - mean;
                        var = var + d * d;
                    }
                    var = var * inv_n;
                    let rstd = F::one() / (var + eps).sqrt();
                    for (h, &v) in xhat.iter_mut().zip(xr.iter()) {
                        *h = (v - mean) * rstd;
                    }
                    if let Some(gg) = self.grad_buf(gamma) {
                        for ((g, &d), &h) in gg.iter_mut().zip(dy.iter()).zip(xhat.iter()) {
                            *g = *g + d * h;
                        }
                    }
                    if let Some(gb) = self.grad_buf(beta) {
                        for (g, &d) in gb.iter_mut().zip(dy.iter()) {
                            *g = *g + d;
                        }
                    }
                    if let Some(gx) = self.grad_buf(x) {
                        // dxhat = dy ∘ gamma; dx = rstd·(dxhat − mean(dxhat) − xhat·mean(dxhat∘xhat))
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for c in 0..cols {
                            let dxh = dy[c] * gval[c];
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * xhat[c];
                        }
                        m1 = m1 * inv_n;
                        m2 = m2 * inv_n;
                        let grow = &mut gx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            let dxh = dy[c] * gval[c];
                            grow[c] = grow[c] + rstd * (dxh - m1 - xhat[c] * m2);
                        }
                    }
                }
                self.vals[x.0].data = xval;
                self.vals[gamma.0].data = gval;
            }
            Op::EmbeddingLookup { table, ids, dim, .. } => {
                let (table, ids, dim) = (*table, ids.clone(), *dim);
                if let Some(gt) = self.grad_buf(table) {
                    for (row, &id) in ids.iter().enumerate() {
                        let src = &gout[row * dim..(row + 1) * dim];
                        let dst = &mut gt[id as usize * dim..(id as usize + 1) * dim];
                        for (g, &d) in dst.iter_mut().zip(src.iter()) {
                            *g = *g + d;
                        }
                    }
                }
            }
            &Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs_aux,
                ..
            } => {
                let d = self.vals[q.0].shape[1];
                let dh = d / heads;
                let scale = F::one() / F::c((dh as f64).sqrt());
                let probs = std::mem::take(&mut self.aux[probs_aux]);
                let qval = std::mem::take(&mut self.vals[q.0].data);
                let kval = std::mem::take(&mut self.vals[k.0].data);
                let vval = std::mem::take(&mut self.vals[v.0].data);
                let mut gq = vec![F::zero(); qval.len()];
                let mut gk = vec![F::zero(); kval.len()];
                let mut gv = vec![F::zero(); vval.len()];
                let mut dp = vec![F::zero(); seq];
                let mut ds = vec![F::zero(); seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let col = h * dh;
                        for i in 0..seq {
                            let prow = &probs[((b * heads + h) * seq + i) * seq
                                ..((b * heads + h) * seq + i + 1) * seq];
                            let dout =
                                &gout[(b * seq + i) * d + col..(b * seq + i) * d + col + dh];
                            // dP[j] = dO_i · V_j ; dV_j += P[j]·dO_i
                            for j in 0..=i {
                                let vrow =
                                    &vval[(b * seq + j) * d + col..(b * seq + j) * d + col + dh];
                                let mut s = F::zero();
                                for (&x, &y) in dout.iter().zip(vrow.iter()) {
                                    s = s + x * y;
                                }
                                dp[j] = s;
                                let gvrow =
                                    &mut gv[(b * seq + j) * d + col..(b * seq + j) * d + col + dh];
                                let p = prow[j];
                                for (g, &x) in gvrow.iter_mut().zip(dout.iter()) {
                                    *g = *g + p * x;
                                }
                            }
                            // softmax backward within the visible prefix
                            let mut dot = F::zero();
                            for j in 0..=i {
                                dot = dot + prow[j] * dp[j];
                            }
                            for j in 0..=i {
                                ds[j] = prow[j] * (dp[j] - dot) * scale;
                            }
                            // dQ_i += Σ_j ds[j]·K_j ; dK_j += ds[j]·Q_i
                            let qrow =
                                &qval[(b * seq + i) * d + col..(b * seq + i) * d + col + dh];
                            for j in 0..=i {
                                let krow =
                                    &kval[(b * seq + j) * d + col..(b * seq + j) * d + col + dh];
                                let gqrow =
                                    &mut gq[(b * seq + i) * d + col..(b * seq + i) * d + col + dh];
                                let s = ds[j];
                                for (g, &x) in gqrow.iter_mut().zip(krow.iter()) {
                                    *g = *g + s * x;
                                }
                                let gkrow =
                                    &mut gk[(b * seq + j) * d + col..(b * seq + j) * d + col + dh];
                                for (g, &x) in gkrow.iter_mut().zip(qrow.iter()) {
                                    *g = *g + s * x;
                                }
                            }
                        }
                    }
                }
                self.vals[q.0].data = qval;
                self.vals[k.0].data = kval;
                self.vals[v.0].data = vval;
                self.aux[probs_aux] = probs;
                if let Some(g) = self.grad_buf(q) {
                    for (gi, &d) in g.iter_mut().zip(gq.iter()) {
                        *gi = *gi + d;
                    }
                }
                if let Some(g) = self.grad_buf(k) {
                    for (gi, &d) in g.iter_mut().zip(gk.iter()) {
                        *gi = *gi + d;
                    }
                }
                if let Some(g) = self.grad_buf(v) {
                    for (gi, &d) in g.iter_mut().zip(gv.iter()) {
                        *gi = *gi + d;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                rows,
                cols,
                probs_aux,
                ..
            } => {
                let (logits, rows, cols, probs_aux) = (*logits, *rows, *cols, *probs_aux);
                let targets = targets.clone();
                let g = gout[0] / F::c(rows as f64);
                let probs = std::mem::take(&mut self.aux[probs_aux]);
                if let Some(gl) = self.grad_buf(logits) {
                    for r in 0..rows {
                        let prow = &probs[r * cols..(r + 1) * cols];
                        let grow = &mut gl[r * cols..(r + 1) * cols];
                        for (gi, &p) in grow.iter_mut().zip(prow.iter()) {
                            *gi = *gi + g * p;
                        }
                        let t = targets[r] as usize;
                        grow[t] = grow[t] - g;
                    }
                }
                self.aux[probs_aux] = probs;
            }
            &Op::Sum { x, .. } => {
                let g = gout[0];
                if let Some(gx) = self.grad_buf(x) {
                    for gi in gx.iter_mut() {
                        *gi = *gi + g;
                    }
                }
            }
        }
    }
}
