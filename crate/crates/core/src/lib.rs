//! Neural delay differential equations.
//!
//! Forward integration of constant-delay DDEs by the method of steps, adjoint
//! gradients with respect to weights, delay, initial state and terminal time,
//! and the experiment runner behind the `ndde` binary.

pub mod adjoint;
pub mod error;
pub mod experiments;
pub mod models;
pub mod numerics;
pub mod solver;
pub mod training;

pub use error::{NddeError, Result};
