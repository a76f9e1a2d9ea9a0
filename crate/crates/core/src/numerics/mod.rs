//! Dense arrays, the MLP kernel with its reverse-mode products, and the
//! finite-difference oracle.

pub mod checkpoint;
pub mod fd;
pub mod linalg;
pub mod mlp;

pub use fd::{finite_difference_gradient, relative_error};
pub use linalg::{RealMatrix, RealVector};
pub use mlp::{mlp_forward, mlp_vjp, Activation, MlpLayout, MlpParams};
