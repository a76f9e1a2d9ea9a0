use std::sync::Arc;

use super::integrate::integrate_node;
use super::spline::NaturalCubicSpline;
use super::trajectory::Trajectory;
use crate::error::{NddeError, Result};
use crate::models::VectorField;
use crate::numerics::RealVector;

/// Initial function on `[-tau, 0]` generated by an ODE `h' = phi(h; w_phi)`
/// started at `h(-span) = base`.
#[derive(Clone)]
pub struct OdeHistory {
    field: Arc<dyn VectorField>,
    params: Vec<f64>,
    base: RealVector,
    span: f64,
    traj: Trajectory,
}

impl std::fmt::Debug for OdeHistory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OdeHistory")
            .field("field", &self.field.name())
            .field("base", &self.base)
            .field("span", &self.span)
            .finish()
    }
}

impl OdeHistory {
    pub fn new(
        field: Arc<dyn VectorField>,
        params: Vec<f64>,
        base: RealVector,
        span: f64,
        steps: usize,
    ) -> Result<Self> {
        if !(span > 0.0) {
            return Err(NddeError::Input(format!("history span must be positive, got {span}")));
        }
        let traj = integrate_node(field.as_ref(), &params, &base, -span, 0.0, steps)?;
        Ok(Self {
            field,
            params,
            base,
            span,
            traj,
        })
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.traj
    }
}

/// The initial function `phi(t)` for `t <= 0`.
#[derive(Debug, Clone)]
pub enum HistoryFunction {
    /// `phi(t) = h0`; its derivative vanishes identically.
    Constant(RealVector),
    Spline(NaturalCubicSpline),
    OdeGenerated(OdeHistory),
}

impl HistoryFunction {
    pub fn constant(h0: Vec<f64>) -> Result<Self> {
        Ok(Self::Constant(RealVector::new(h0)?))
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Constant(v) => v.len(),
            Self::Spline(s) => s.dim(),
            Self::OdeGenerated(o) => o.base.len(),
        }
    }

    /// Closed interval on which the history may be evaluated.
    pub fn domain(&self) -> (f64, f64) {
        match self {
            Self::Constant(_) => (f64::NEG_INFINITY, 0.0),
            Self::Spline(s) => {
                let (lo, hi) = s.domain();
                (lo, hi.min(0.0))
            }
            Self::OdeGenerated(o) => (-o.span, 0.0),
        }
    }

    /// Whether `[-tau, 0]` lies inside the domain.
    pub fn covers(&self, tau: f64) -> bool {
        let (lo, hi) = self.domain();
        let tol = 1e-12 * tau.abs().max(1.0);
        lo <= -tau + tol && hi >= -tol
    }

    fn check(&self, t: f64) -> Result<()> {
        let (lo, hi) = self.domain();
        let tol = 1e-12 * lo.abs().max(1.0).min(1e6);
        if t >= lo - tol && t <= hi + tol {
            Ok(())
        } else {
            Err(NddeError::Domain(format!(
                "history evaluated at t = {t}, outside [{lo}, {hi}]"
            )))
        }
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        self.check(t)?;
        match self {
            Self::Constant(v) => {
                out.copy_from_slice(v);
                Ok(())
            }
            Self::Spline(s) => s.eval_into(t.min(0.0), out),
            Self::OdeGenerated(o) => {
                let v = o.traj.dense_eval(t.clamp(-o.span, 0.0))?;
                out.copy_from_slice(&v);
                Ok(())
            }
        }
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }

    /// `phi'(t)`: zero for constants, analytic for splines, the generating
    /// field for ODE histories.
    pub fn derivative_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        self.check(t)?;
        match self {
            Self::Constant(_) => {
                out.fill(0.0);
                Ok(())
            }
            Self::Spline(s) => s.derivative_into(t.min(0.0), out),
            Self::OdeGenerated(o) => {
                let h = o.traj.dense_eval(t.clamp(-o.span, 0.0))?;
                o.field.eval(&o.params, &h, &h, t, out)
            }
        }
    }

    /// `phi(0)`, the default initial state of the delayed system.
    pub fn initial_state(&self) -> Result<Vec<f64>> {
        self.eval(0.0)
    }
}

/// Evaluates `phi(t)`; fails outside `[-tau, 0]`.
pub fn eval_history(history: &HistoryFunction, tau: f64, t: f64) -> Result<Vec<f64>> {
    if !(t >= -tau && t <= 0.0) {
        return Err(NddeError::Domain(format!(
            "history evaluated at t = {t}, outside [{}, 0]",
            -tau
        )));
    }
    history.eval(t)
}

/// Fits a natural cubic spline history through `samples`.
pub fn fit_natural_cubic_spline(samples: &[(f64, Vec<f64>)]) -> Result<HistoryFunction> {
    Ok(HistoryFunction::Spline(NaturalCubicSpline::fit(samples)?))
}
