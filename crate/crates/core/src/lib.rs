//! Dual-head knowledge distillation laboratory.
//!
//! Logit-level distillation losses (BinaryKL, BinaryKL-Norm) next to
//! cross-entropy and vanilla KD, term-by-term gradient decompositions over a
//! shared linear classifier, neural-collapse diagnostics, a dual-head MLP
//! student with manual backprop and gradient alignment, and a harness that
//! runs the distillation settings on synthetic or IDX data.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod collapse;
pub mod data;
pub mod error;
pub mod grad_theory;
pub mod harness;
pub mod losses;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
pub use numerics::Matrix;
