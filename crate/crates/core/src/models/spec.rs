use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NddeError, Result};
use crate::models::field::{
    AnnulusSeparator, LinearTanh, MackeyGlass, NeuralNdde, NeuralNode, Population, ScalarDelay,
    VectorField,
};

/// Which vector field a model uses. `dim` is the data dimension, before any
/// zero-padding channels are appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum FieldKind {
    NeuralNdde { dim: usize, hidden: Vec<usize> },
    NeuralNode { dim: usize, hidden: Vec<usize> },
    MackeyGlass,
    Population,
    LinearTanh { dim: usize },
    ScalarDelay { dim: usize },
    AnnulusSeparator { dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HistoryKind {
    /// `phi = h0` on `[-tau, 0]`.
    Constant,
    /// Natural cubic spline through observed samples at `t <= 0`.
    Spline,
}

/// A trainable model: field, history, delay and horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub field: FieldKind,
    pub history: HistoryKind,
    pub tau: f64,
    pub train_tau: bool,
    pub n_segments: usize,
    pub train_t: bool,
    /// Number of zero channels appended to the state (ANODE); `0` disables.
    pub augment: usize,
    pub tau_min: f64,
    pub tau_max: f64,
}

impl ModelSpec {
    pub fn new(field: FieldKind, tau: f64, n_segments: usize) -> Self {
        Self {
            field,
            history: HistoryKind::Constant,
            tau,
            train_tau: false,
            n_segments,
            train_t: false,
            augment: 0,
            tau_min: 0.0,
            tau_max: f64::INFINITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(NddeError::Input(format!("tau must be positive, got {}", self.tau)));
        }
        if self.n_segments == 0 {
            return Err(NddeError::Input("n_segments must be at least 1".into()));
        }
        if self.augment > 0 && !matches!(self.field, FieldKind::NeuralNode { .. } | FieldKind::NeuralNdde { .. })
        {
            return Err(NddeError::Input("augmentation needs a neural field".into()));
        }
        if self.train_tau && !(self.tau_min > 0.0 && self.tau_min < self.tau_max) {
            return Err(NddeError::Input(format!(
                "trainable tau needs 0 < tau_min < tau_max, got [{}, {}]",
                self.tau_min, self.tau_max
            )));
        }
        Ok(())
    }

    pub fn data_dim(&self) -> usize {
        match &self.field {
            FieldKind::NeuralNdde { dim, .. }
            | FieldKind::NeuralNode { dim, .. }
            | FieldKind::LinearTanh { dim }
            | FieldKind::ScalarDelay { dim }
            | FieldKind::AnnulusSeparator { dim } => *dim,
            FieldKind::MackeyGlass | FieldKind::Population => 1,
        }
    }

    /// Dimension of the integrated state, including augmentation.
    pub fn state_dim(&self) -> usize {
        self.data_dim() + self.augment
    }

    /// Whether the field ignores its delayed argument and is integrated as an ODE.
    pub fn is_node(&self) -> bool {
        matches!(self.field, FieldKind::NeuralNode { .. })
    }

    pub fn terminal_time(&self) -> f64 {
        self.n_segments as f64 * self.tau
    }

    pub fn build_field(&self) -> Result<Arc<dyn VectorField>> {
        self.validate()?;
        let d = self.state_dim();
        Ok(match &self.field {
            FieldKind::NeuralNdde { hidden, .. } => Arc::new(NeuralNdde::new(d, hidden)?),
            FieldKind::NeuralNode { hidden, .. } => Arc::new(NeuralNode::new(d, hidden)?),
            FieldKind::MackeyGlass => Arc::new(MackeyGlass),
            FieldKind::Population => Arc::new(Population),
            FieldKind::LinearTanh { .. } => Arc::new(LinearTanh::new(d)),
            FieldKind::ScalarDelay { .. } => Arc::new(ScalarDelay::new(d)),
            FieldKind::AnnulusSeparator { .. } => Arc::new(AnnulusSeparator::new(d)),
        })
    }

    /// Initial parameters: uniform fan-in scaling for neural fields; analytic
    /// fields have no canonical initialization and start at zero.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let d = self.state_dim();
        Ok(match &self.field {
            FieldKind::NeuralNdde { hidden, .. } => {
                NeuralNdde::new(d, hidden)?.layout().init_uniform(rng).flatten()
            }
            FieldKind::NeuralNode { hidden, .. } => {
                NeuralNode::new(d, hidden)?.layout().init_uniform(rng).flatten()
            }
            _ => vec![0.0; self.build_field()?.param_count()],
        })
    }

    /// Clamps `tau` into `[tau_min, tau_max]`; returns whether it moved.
    pub fn project_tau(&self, tau: &mut f64) -> bool {
        let clamped = tau.clamp(self.tau_min, self.tau_max);
        let moved = clamped != *tau;
        *tau = clamped;
        moved
    }
}
