//! Reverse-mode gradients for NDDE and NODE losses.

mod backward;
pub mod gradcheck;
mod grid;
pub mod loss;

pub use backward::{
    adjoint_backward, adjoint_backward_with, node_adjoint_backward, AdjointOptions,
    BackwardAudit, GradientBundle, NodeGradients, StateReplay,
};
pub use gradcheck::{
    integrate_general, ComponentCheck, GeneralSolution, GradCheckCase, GradCheckOptions,
    GradCheckReport,
};
pub use loss::{
    loss_cotangents, loss_from_states, LossEval, LossSpec, Observation, ObservationLossGrads,
};

#[cfg(test)]
mod tests;
