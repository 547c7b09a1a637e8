//! Forward kernels and their vector–Jacobian products.
//!
//! Every function here is pure: outputs are freshly allocated and inputs are
//! never modified. The differentiation tape in [`crate::autodiff`] composes
//! these kernels.

pub mod activation;
pub mod conv;
pub mod elementwise;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod resize;
pub mod weight_norm;

pub use activation::{relu, softplus, SOFTPLUS_LINEAR_THRESHOLD};
pub use conv::{conv2d, conv2d_direct, conv_output_extent};
pub use linear::{dense, global_avg_pool};
pub use loss::softmax_cross_entropy;
pub use norm::{group_norm, GROUP_NORM_EPS};
pub use resize::bilinear_upsample;
pub use weight_norm::weight_norm;
