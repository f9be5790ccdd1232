//! Desk-scale workbench for studying memorization under different
//! fine-tuning strategies of a mini autoregressive transformer.
//!
//! The crate trains a small GPT-2-family model under selectable trainable
//! parameter sets (full model, head only, bottleneck adapters, block
//! subsets, untied head, from scratch) and audits memorization with a
//! reference-based membership inference attack and the canary exposure
//! metric, then extracts Pareto frontiers and training-phase segmentations
//! from the resulting trajectories.

pub mod analysis;
pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod model;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
