//! Minimal reverse-mode autodiff over dense row-major tensors.
//!
//! The op set is exactly what the mini transformer needs: matmuls (plain and
//! B-transposed), elementwise add/mul, row bias add, column slicing, GELU
//! (tanh approximation), row softmax / log-softmax, layer norm, embedding
//! lookup, fused causal attention, fused mean cross-entropy, and a scalar sum.
//! No GPU kernels, no general broadcasting, no operator fusion beyond the two
//! fused rules above.

pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use gradcheck::grad_check;
pub use tape::{Tape, VarId};
pub use tensor::{Scalar, Tensor};
