//! Conditional computation toolkit.
//!
//! Trainable subset selection (Gumbel-Softmax with straight-through
//! estimation) decides which tokens, experts and blocks of a small transformer
//! run for each input. Everything sits on a float64 reverse-mode autodiff tape. A MAC cost model accounts for
//! the work each conditional decision saves.

// `!(x > 0.0)` also rejects NaN; index loops read better in matrix code.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod checks;
pub mod cost;
pub mod early_exit;
pub mod error;
pub mod gradcheck;
pub mod gumbel;
pub mod moe;
pub mod nn;
pub mod params;
pub mod routing;
pub mod tensor;
pub mod token_select;
pub mod transformer;

pub use autodiff::{Op, OpKind, Tape, Var};
pub use error::{Error, Result};
pub use params::{Bound, OptimizerKind, ParamId, ParameterSet};
pub use tensor::Tensor;
pub use transformer::{Model, ModelSpec};
