//! Reverse-mode differentiation over the fixed primitive set used by the model.
//!
//! Network code is written once against [`Graph`]. Running it on an [`Eval`]
//! computes values only and keeps nothing; running it on a [`Tape`] records
//! each primitive with the forward values its vector–Jacobian product needs.

mod census;
mod graph;
mod tape;

pub use census::{live_tapes, peak_tapes, reset_peak_tapes, TapeKind};
pub use graph::{Eval, Graph};
pub use tape::{Gradients, Tape, Var};
