//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Forward ops are methods on [`Tape`] and return a [`Var`] handle. Shapes
//! must match exactly except that either operand of an elementwise binary op
//! may be a scalar; use [`Tape::expand_rows`] / [`Tape::expand_cols`] for
//! anything else. Every op checks its output for NaN/Inf and fails with the
//! offending node id instead of propagating it.
//!
//! ```
//! use pppc_core::diff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, -4.0, 6.0]);
//! ```

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use kernels::{JsDraws, PairKernel};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
