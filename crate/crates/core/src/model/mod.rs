//! The mini autoregressive transformer (GPT-2 family shape): parameter
//! registry, forward pass, adapter insertion, and head/embedding tying.
//!
//! Registry names are hierarchical and 1-based per block, e.g.
//! `block.3.ffn.up.w`, `embed.tok`, `adapter.3.down.w`, `head` (untied only).
//! When embeddings are tied, `embed.tok` serves as both the token embedding
//! and the output head; there is a single registry entry playing two roles.

mod strategy;

pub use strategy::TuningStrategy;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Tensor, VarId};
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Layer-norm epsilon (GPT-2 convention).
pub const LN_EPS: f64 = 1e-5;

/// Weight init standard deviation (GPT-2 convention).
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    pub tied_embeddings: bool,
    pub adapter_reduction: Option<usize>,
}

impl ModelConfig {
    /// The GPT-2 base shape (12 blocks, d=768, 12 heads, vocab 50257, ctx 1024).
    pub fn gpt2() -> Self {
        ModelConfig {
            n_blocks: 12,
            d_model: 768,
            n_heads: 12,
            d_ff: 3072,
            vocab_size: 50257,
            context_length: 1024,
            tied_embeddings: true,
            adapter_reduction: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.vocab_size == 0
            || self.context_length == 0
        {
            return Err(Error::contract(
                "model config: all dimensions must be positive",
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::contract(format!(
                "model config: d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if let Some(r) = self.adapter_reduction {
            if r == 0 || self.d_model / r == 0 {
                return Err(Error::contract(format!(
                    "model config: adapter reduction {} leaves no bottleneck width (d_model {})",
                    r, self.d_model
                )));
            }
        }
        Ok(())
    }

    /// Adapter bottleneck width d/r.
    pub fn adapter_width(&self, r: usize) -> usize {
        self.d_model / r
    }

    /// Canonical (name, shape) table for this configuration, in registry order.
    pub fn shape_table(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut t: Vec<(String, Vec<usize>)> = Vec::new();
        t.push(("embed.tok".into(), vec![self.vocab_size, d]));
        t.push(("embed.pos".into(), vec![self.context_length, d]));
        for b in 1..=self.n_blocks {
            t.push((format!("block.{b}.ln1.g"), vec![d]));
            t.push((format!("block.{b}.ln1.b"), vec![d]));
            t.push((format!("block.{b}.attn.qkv.w"), vec![d, 3 * d]));
            t.push((format!("block.{b}.attn.qkv.b"), vec![3 * d]));
            t.push((format!("block.{b}.attn.out.w"), vec![d, d]));
            t.push((format!("block.{b}.attn.out.b"), vec![d]));
            t.push((format!("block.{b}.ln2.g"), vec![d]));
            t.push((format!("block.{b}.ln2.b"), vec![d]));
            t.push((format!("block.{b}.ffn.up.w"), vec![d, self.d_ff]));
            t.push((format!("block.{b}.ffn.up.b"), vec![self.d_ff]));
            t.push((format!("block.{b}.ffn.down.w"), vec![self.d_ff, d]));
            t.push((format!("block.{b}.ffn.down.b"), vec![d]));
        }
        t.push(("ln_f.g".into(), vec![d]));
        t.push(("ln_f.b".into(), vec![d]));
        if !self.tied_embeddings {
            t.push(("head".into(), vec![self.vocab_size, d]));
        }
        if let Some(r) = self.adapter_reduction {
            let w = self.adapter_width(r);
            for b in 1..=self.n_blocks {
                t.push((format!("adapter.{b}.down.w"), vec![d, w]));
                t.push((format!("adapter.{b}.down.b"), vec![w]));
                t.push((format!("adapter.{b}.up.w"), vec![w, d]));
                t.push((format!("adapter.{b}.up.b"), vec![d]));
            }
        }
        t
    }

    /// Total parameter count, straight off the shape table.
    pub fn param_count(&self) -> u64 {
        self.shape_table()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>() as u64)
            .sum()
    }
}

/// Ordered named-parameter registry.
pub type ParamRegistry<F> = IndexMap<String, Tensor<F>>;

/// The model: a config plus its parameter registry.
#[derive(Debug, Clone)]
pub struct Model<F: Scalar> {
    config: ModelConfig,
    params: ParamRegistry<F>,
}

/// Handles returned by a recorded forward pass.
pub struct TapedForward {
    pub logits: VarId,
    /// (registry index, tape leaf) for every parameter, in registry order.
    pub leaves: Vec<(usize, VarId)>,
}

/// Build a model with GPT-2-family init: N(0, 0.02) weights, zero biases,
/// unit layer-norm gains. Deterministic under `seed`.
pub fn build_model<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<F>> {
    config.validate()?;
    let mut rng = rng_for(seed, "model-init");
    let mut params = ParamRegistry::new();
    for (name, shape) in config.shape_table() {
        let t = init_tensor::<F>(&name, shape, &mut rng);
        params.insert(name, t);
    }
    Ok(Model {
        config: config.clone(),
        params,
    })
}

fn init_tensor<F: Scalar>(
    name: &str,
    shape: Vec<usize>,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Tensor<F> {
    if name.ends_with(".g") {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![F::one(); n]).expect("shape table consistent")
    } else if name.ends_with(".b") || (name.starts_with("adapter.") && name.ends_with("up.w")) {
        // Biases and adapter up-projections start at zero (the latter makes
        // insertion output-preserving).
        Tensor::zeros(shape)
    } else {
        Tensor::randn(shape, INIT_STD, rng)
    }
}

impl<F: Scalar> Model<F> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamRegistry<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamRegistry<F> {
        &mut self.params
    }

    /// Reassemble a model from a config and a loaded registry, validating
    /// names and shapes against the canonical table.
    pub fn from_parts(config: ModelConfig, params: ParamRegistry<F>) -> Result<Self> {
        config.validate()?;
        let expected = config.shape_table();
        if expected.len() != params.len() {
            return Err(Error::ConfigMismatch(format!(
                "registry has {} tensors, config expects {}",
                params.len(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::ConfigMismatch(format!(
                        "parameter {name}: shape {:?} does not match config {:?}",
                        t.shape(),
                        shape
                    )))
                }
                None => {
                    return Err(Error::ConfigMismatch(format!(
                        "parameter {name} missing from registry"
                    )))
                }
            }
        }
        Ok(Model { config, params })
    }

    /// Total parameter count over the registry.
    pub fn param_count(&self) -> u64 {
        self.params.values().map(|t| t.numel() as u64).sum()
    }

    /// The matrix that produces logits: `head` when untied, else `embed.tok`.
    pub fn head_name(&self) -> &'static str {
        if self.config.tied_embeddings {
            "embed.tok"
        } else {
            "head"
        }
    }

    /// Insert one bottleneck adapter per block after the feed-forward
    /// sub-layer, inside the residual stream: down d→d/r (bias), GELU,
    /// up d/r→d (bias), residual add. Up-projections are zero-initialized,
    /// so insertion leaves forward outputs bit-identical; all pre-existing
    /// parameters are untouched.
    pub fn insert_adapters(&mut self, r: usize, seed: u64) -> Result<()> {
        if self.config.adapter_reduction.is_some() {
            return Err(Error::contract("adapters already inserted"));
        }
        if r == 0 || self.config.d_model / r == 0 {
            return Err(Error::contract(format!(
                "adapter reduction {r} too large for d_model {}",
                self.config.d_model
            )));
        }
        self.config.adapter_reduction = Some(r);
        let mut rng = rng_for(seed, "adapter-init");
        let d = self.config.d_model;
        let w = self.config.adapter_width(r);
        for b in 1..=self.config.n_blocks {
            self.params.insert(
                format!("adapter.{b}.down.w"),
                Tensor::randn(vec![d, w], INIT_STD, &mut rng),
            );
            self.params
                .insert(format!("adapter.{b}.down.b"), Tensor::zeros(vec![w]));
            self.params
                .insert(format!("adapter.{b}.up.w"), Tensor::zeros(vec![w, d]));
            self.params
                .insert(format!("adapter.{b}.up.b"), Tensor::zeros(vec![d]));
        }
        Ok(())
    }

    /// Duplicate the shared embedding/head matrix into a distinct `head`
    /// entry. Forward outputs are unchanged at the moment of untying;
    /// subsequent updates diverge the two.
    pub fn untie_embeddings(&mut self) -> Result<()> {
        if !self.config.tied_embeddings {
            return Err(Error::contract("embeddings already untied"));
        }
        let copy = self.params["embed.tok"].clone();
        self.config.tied_embeddings = false;
        self.params.insert("head".into(), copy);
        Ok(())
    }

    /// Record the forward pass on `tape` and return logits [batch·seq × V].
    ///
    /// `trainable_mask`, if given, marks which registry entries want
    /// gradients (by registry index); leaves outside the mask still carry
    /// values but skip gradient accumulation.
    pub fn forward_recorded(
        &self,
        tape: &mut Tape<F>,
        tokens: &[u32],
        batch: usize,
        seq: usize,
        trainable_mask: Option<&[bool]>,
    ) -> Result<TapedForward> {
        // Register every parameter as a leaf, in registry order.
        let mut leaves = Vec::with_capacity(self.params.len());
        for (idx, (_, tensor)) in self.params.iter().enumerate() {
            let wants = trainable_mask.map_or(true, |m| m[idx]);
            let id = tape
                .leaf(tensor.data(), tensor.shape(), wants)
                .expect("registry tensors are well-formed");
            leaves.push((idx, id));
        }
        let ids: Vec<VarId> = leaves.iter().map(|&(_, id)| id).collect();
        let logits = self.forward_from_leaves(tape, &ids, tokens, batch, seq)?;
        Ok(TapedForward { logits, leaves })
    }

    /// Forward pass over parameter values already registered on the tape,
    /// one leaf per registry entry in registry order. Values come from the
    /// tape, not the registry; shapes must match the registry.
    pub fn forward_from_leaves(
        &self,
        tape: &mut Tape<F>,
        param_ids: &[VarId],
        tokens: &[u32],
        batch: usize,
        seq: usize,
    ) -> Result<VarId> {
        let cfg = &self.config;
        if tokens.len() != batch * seq {
            return Err(Error::contract(format!(
                "forward: {} tokens for batch {batch} × seq {seq}",
                tokens.len()
            )));
        }
        if seq > cfg.context_length {
            return Err(Error::contract(format!(
                "forward: sequence length {seq} exceeds context length {}",
                cfg.context_length
            )));
        }
        if batch == 0 || seq == 0 {
            return Err(Error::contract("forward: batch and seq must be positive"));
        }
        if param_ids.len() != self.params.len() {
            return Err(Error::contract(format!(
                "forward_from_leaves: {} leaves for {} registry entries",
                param_ids.len(),
                self.params.len()
            )));
        }
        let mut by_name: IndexMap<&str, VarId> = IndexMap::with_capacity(self.params.len());
        for (name, &id) in self.params.keys().zip(param_ids.iter()) {
            by_name.insert(name.as_str(), id);
        }
        let p = |name: &str| -> VarId { by_name[name] };

        let eps = F::c(LN_EPS);
        let d = cfg.d_model;
        let pos_ids: Vec<u32> = (0..batch)
            .flat_map(|_| 0..seq as u32)
            .collect();

        let tok = tape.embedding_lookup(p("embed.tok"), tokens)?;
        let pos = tape.embedding_lookup(p("embed.pos"), &pos_ids)?;
        let mut x = tape.add(tok, pos)?;

        for b in 1..=cfg.n_blocks {
            let h = tape.layer_norm(
                x,
                p(&format!("block.{b}.ln1.g")),
                p(&format!("block.{b}.ln1.b")),
                eps,
            )?;
            let qkv = tape.matmul(h, p(&format!("block.{b}.attn.qkv.w")))?;
            let qkv = tape.add_row_bias(qkv, p(&format!("block.{b}.attn.qkv.b")))?;
            let q = tape.slice_cols(qkv, 0, d)?;
            let k = tape.slice_cols(qkv, d, d)?;
            let v = tape.slice_cols(qkv, 2 * d, d)?;
            let att = tape.causal_attention(q, k, v, batch, seq, cfg.n_heads)?;
            let att = tape.matmul(att, p(&format!("block.{b}.attn.out.w")))?;
            let att = tape.add_row_bias(att, p(&format!("block.{b}.attn.out.b")))?;
            x = tape.add(x, att)?;

            let h2 = tape.layer_norm(
                x,
                p(&format!("block.{b}.ln2.g")),
                p(&format!("block.{b}.ln2.b")),
                eps,
            )?;
            let up = tape.matmul(h2, p(&format!("block.{b}.ffn.up.w")))?;
            let up = tape.add_row_bias(up, p(&format!("block.{b}.ffn.up.b")))?;
            let act = tape.gelu(up);
            let down = tape.matmul(act, p(&format!("block.{b}.ffn.down.w")))?;
            let mut ffn = tape.add_row_bias(down, p(&format!("block.{b}.ffn.down.b")))?;

            if cfg.adapter_reduction.is_some() {
                let ad = tape.matmul(ffn, p(&format!("adapter.{b}.down.w")))?;
                let ad = tape.add_row_bias(ad, p(&format!("adapter.{b}.down.b")))?;
                let ad = tape.gelu(ad);
                let ad = tape.matmul(ad, p(&format!("adapter.{b}.up.w")))?;
                let ad = tape.add_row_bias(ad, p(&format!("adapter.{b}.up.b")))?;
                ffn = tape.add(ffn, ad)?;
            }
            x = tape.add(x, ffn)?;
        }

        let xf = tape.layer_norm(x, p("ln_f.g"), p("ln_f.b"), eps)?;
        tape.matmul_transpose_b(xf, p(self.head_name()))
    }

    /// Causal next-token logits as a plain tensor, shape [batch·seq, vocab].
    pub fn forward(&self, tokens: &[u32], batch: usize, seq: usize) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let fwd = self.forward_recorded(&mut tape, tokens, batch, seq, None)?;
        Tensor::from_vec(
            tape.shape(fwd.logits).to_vec(),
            tape.value(fwd.logits).to_vec(),
        )
    }

    /// Forward + mean cross-entropy against next-token targets. Returns the
    /// scalar loss id alongside the recorded handles.
    pub fn loss_recorded(
        &self,
        tape: &mut Tape<F>,
        tokens: &[u32],
        targets: &[u32],
        batch: usize,
        seq: usize,
        trainable_mask: Option<&[bool]>,
    ) -> Result<(VarId, TapedForward)> {
        let fwd = self.forward_recorded(tape, tokens, batch, seq, trainable_mask)?;
        let loss = tape.cross_entropy(fwd.logits, targets)?;
        Ok((loss, fwd))
    }

    /// Exact trainable-parameter name set for a strategy.
    pub fn trainable_names(&self, strategy: &TuningStrategy) -> Result<Vec<String>> {
        strategy.validate(&self.config)?;
        Ok(self
            .params
            .keys()
            .filter(|n| strategy.matches(n, &self.config))
            .cloned()
            .collect())
    }

    /// Trainable mask aligned with registry order.
    pub fn trainable_mask(&self, strategy: &TuningStrategy) -> Result<Vec<bool>> {
        strategy.validate(&self.config)?;
        Ok(self
            .params
            .keys()
            .map(|n| strategy.matches(n, &self.config))
            .collect())
    }

    /// Σ of element counts over the trainable set.
    pub fn count_trainable(&self, strategy: &TuningStrategy) -> Result<u64> {
        strategy.validate(&self.config)?;
        Ok(self
            .params
            .iter()
            .filter(|(n, _)| strategy.matches(n, &self.config))
            .map(|(_, t)| t.numel() as u64)
            .sum())
    }
}

/// Trainable-parameter count for a config without materializing tensors
/// (used for the GPT-2-scale tables, where building the model would
/// allocate half a gigabyte).
pub fn count_trainable_for_config(config: &ModelConfig, strategy: &TuningStrategy) -> Result<u64> {
    strategy.validate(config)?;
    Ok(config
        .shape_table()
        .iter()
        .filter(|(n, _)| strategy.matches(n, config))
        .map(|(_, s)| s.iter().product::<usize>() as u64)
        .sum())
}
