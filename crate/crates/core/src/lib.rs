//! Multiscale deep equilibrium models.
//!
//! The crate is generic over the element type ([`Scalar`]): models train in
//! `f32` and are verified in `f64`. Concrete aliases for both are exported at
//! the crate root.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cell;
pub mod diag;
pub mod error;
pub mod implicit;
pub mod ops;
pub mod scalar;
pub mod solver;
pub mod state;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use state::MultiscaleState;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type State32 = MultiscaleState<f32>;
pub type State64 = MultiscaleState<f64>;
pub type Params32 = cell::MdeqParams<f32>;
pub type Params64 = cell::MdeqParams<f64>;
