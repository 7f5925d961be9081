//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Tape`] as they execute; [`Tape::backward`]
//! walks the records in reverse. Ops work on the last axis as columns and
//! fold every leading axis into rows.

mod gradcheck;
mod kernels;
mod ops;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_store, check_store_params, finite_diff_check, relative_error, DEFAULT_STEP};
pub use ops::{stack_rows, tensor_rows, Piece, RowRef, Unary};
pub use params::{kaiming_uniform, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[allow(unused_imports)]
pub(crate) use kernels::{gelu, logsumexp, sigmoid};
