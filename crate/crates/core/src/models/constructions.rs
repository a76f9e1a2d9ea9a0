use crate::error::{check_len, NddeError, Result};
use crate::models::field::{AnnulusSeparator, DelayedNeural};
use crate::numerics::{Activation, MlpLayout, MlpParams, RealMatrix};
use crate::solver::{integrate_ndde, HistoryFunction, SolverConfig};

/// Default delay and horizon of the annulus construction.
pub const ANNULUS_DEFAULT_TIME: f64 = 10.0;

/// The separator `h_1' = ||h(t - tau)|| - r` with `r = (r1 + r2) / 2` and
/// `tau = T`, mapping the disk `||x|| <= r1` to `h_1(T) < 0` and the annulus
/// `r2 <= ||x|| <= r3` to `h_1(T) > 0` when started from the constant history `x`.
#[derive(Debug, Clone)]
pub struct AnnulusConstruction {
    pub field: AnnulusSeparator,
    pub params: Vec<f64>,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub tau: f64,
    pub t_end: f64,
}

impl AnnulusConstruction {
    pub fn radius(&self) -> f64 {
        self.params[0]
    }

    /// Closed-form upper bound of `h_1(T)` over the inner disk.
    pub fn inner_bound(&self) -> f64 {
        self.r1 + self.t_end * (self.r1 - self.radius())
    }

    /// Closed-form lower bound of `h_1(T)` over the annulus.
    pub fn outer_bound(&self) -> f64 {
        -self.r3 + self.t_end * (self.r2 - self.radius())
    }

    /// `h(T)` for the constant history `x`.
    pub fn transform(&self, x: &[f64], config: &SolverConfig) -> Result<Vec<f64>> {
        let h = HistoryFunction::constant(x.to_vec())?;
        let traj = integrate_ndde(&self.field, &self.params, &h, self.tau, 1, config)?;
        Ok(traj.terminal_state().to_vec())
    }
}

pub fn build_annulus_separator(r1: f64, r2: f64, r3: f64, d: usize) -> Result<AnnulusConstruction> {
    build_annulus_separator_with_time(r1, r2, r3, d, ANNULUS_DEFAULT_TIME)
}

pub fn build_annulus_separator_with_time(
    r1: f64,
    r2: f64,
    r3: f64,
    d: usize,
    t_end: f64,
) -> Result<AnnulusConstruction> {
    if !(0.0 < r1 && r1 < r2 && r2 < r3 && r3.is_finite()) {
        return Err(NddeError::Input(format!(
            "need 0 < r1 < r2 < r3, got ({r1}, {r2}, {r3})"
        )));
    }
    if d == 0 || !(t_end > 0.0) {
        return Err(NddeError::Input("need d >= 1 and T > 0".into()));
    }
    Ok(AnnulusConstruction {
        field: AnnulusSeparator::new(d),
        params: vec![0.5 * (r1 + r2)],
        r1,
        r2,
        r3,
        tau: t_end,
        t_end,
    })
}

/// `h' = G(h(t - tau))` with `tau = T` and constant history `x`, so that
/// `h(T) = x + T G(x)`. With `G = (F - id) / T` this represents `F`.
#[derive(Debug, Clone)]
pub struct UniversalRepresentation {
    pub field: DelayedNeural,
    pub params: Vec<f64>,
    pub tau: f64,
    pub t_end: f64,
}

impl UniversalRepresentation {
    pub fn apply(&self, x: &[f64], config: &SolverConfig) -> Result<Vec<f64>> {
        let h = HistoryFunction::constant(x.to_vec())?;
        let traj = integrate_ndde(&self.field, &self.params, &h, self.tau, 1, config)?;
        Ok(traj.terminal_state().to_vec())
    }
}

pub fn build_universal_representation(g_net: &MlpParams, t_end: f64) -> Result<UniversalRepresentation> {
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(NddeError::Input(format!("T must be positive, got {t_end}")));
    }
    let layout = g_net.layout().clone();
    check_len(
        "representation network output width",
        layout.input_width(),
        layout.output_width(),
    )?;
    Ok(UniversalRepresentation {
        field: DelayedNeural::new(layout)?,
        params: g_net.flatten(),
        tau: t_end,
        t_end,
    })
}

/// A single identity-activation layer computing `G(x) = (F - I) x / T` for a
/// linear map `F`.
pub fn linear_residual_network(f: &RealMatrix, t_end: f64) -> Result<MlpParams> {
    if f.rows() != f.cols() {
        return Err(NddeError::Input("linear map must be square".into()));
    }
    let d = f.rows();
    let mut w = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            let eye = if i == j { 1.0 } else { 0.0 };
            w.push((f.get(i, j) - eye) / t_end);
        }
    }
    let layout = MlpLayout::new(vec![d, d], vec![Activation::Identity])?;
    w.extend(std::iter::repeat_n(0.0, d));
    MlpParams::unflatten(&layout, &w)
}

/// Appends `p` zero channels.
pub fn augment_state(h: &[f64], p: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h.len() + p);
    out.extend_from_slice(h);
    out.resize(h.len() + p, 0.0);
    out
}
