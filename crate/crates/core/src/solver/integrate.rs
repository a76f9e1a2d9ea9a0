use super::history::HistoryFunction;
use super::trajectory::Trajectory;
use crate::error::{check_len, NddeError, Result};
use crate::models::VectorField;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SolverConfig {
    pub steps_per_segment: usize,
    pub method: Method,
}

impl SolverConfig {
    pub const DEFAULT_STEPS: usize = 100;

    pub fn new(steps_per_segment: usize) -> Result<Self> {
        if steps_per_segment == 0 {
            return Err(NddeError::Input("steps_per_segment must be at least 1".into()));
        }
        Ok(Self {
            steps_per_segment,
            method: Method::Rk4,
        })
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            steps_per_segment: Self::DEFAULT_STEPS,
            method: Method::Rk4,
        }
    }
}

fn check_finite(y: &[f64], t: f64) -> Result<()> {
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(NddeError::Divergence {
            t,
            detail: format!("state component {i} is {}", y[i]),
        });
    }
    Ok(())
}

/// Classical fixed-step RK4 for `h' = f(h, h, t)`: the delay-free limit, where
/// the delayed argument coincides with the current state.
pub fn integrate_node<F: VectorField + ?Sized>(
    field: &F,
    params: &[f64],
    h0: &[f64],
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<Trajectory> {
    if !(t1 > t0) {
        return Err(NddeError::Input(format!("need t1 > t0, got [{t0}, {t1}]")));
    }
    if steps == 0 {
        return Err(NddeError::Input("steps must be at least 1".into()));
    }
    let d = field.dim();
    check_len("initial state", d, h0.len())?;
    check_finite(h0, t0)?;
    let dt = (t1 - t0) / steps as f64;
    let mut traj = Trajectory {
        t0,
        segment_len: t1 - t0,
        n_segments: 1,
        steps_per_segment: steps,
        dim: d,
        delay: None,
        states: vec![0.0; (steps + 1) * d],
        derivs: vec![0.0; (steps + 1) * d],
        stage_evaluations: 4 * steps,
        auxiliary_evaluations: 1,
    };
    traj.states[..d].copy_from_slice(h0);
    let mut k = vec![0.0; 4 * d];
    let mut tmp = vec![0.0; d];
    for j in 0..steps {
        let t = t0 + j as f64 * dt;
        let (y, rest) = traj.states.split_at_mut((j + 1) * d);
        let y = &y[j * d..];
        let (k1, k234) = k.split_at_mut(d);
        let (k2, k34) = k234.split_at_mut(d);
        let (k3, k4) = k34.split_at_mut(d);
        field.eval(params, y, y, t, k1)?;
        for i in 0..d {
            tmp[i] = y[i] + 0.5 * dt * k1[i];
        }
        field.eval(params, &tmp, &tmp, t + 0.5 * dt, k2)?;
        for i in 0..d {
            tmp[i] = y[i] + 0.5 * dt * k2[i];
        }
        field.eval(params, &tmp, &tmp, t + 0.5 * dt, k3)?;
        for i in 0..d {
            tmp[i] = y[i] + dt * k3[i];
        }
        field.eval(params, &tmp, &tmp, t + dt, k4)?;
        let next = &mut rest[..d];
        for i in 0..d {
            next[i] = y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        traj.derivs[j * d..(j + 1) * d].copy_from_slice(k1);
        let t_next = if j + 1 == steps { t1 } else { t0 + (j + 1) as f64 * dt };
        check_finite(next, t_next)?;
    }
    let last = steps * d;
    let y = traj.states[last..].to_vec();
    field.eval(params, &y, &y, t1, &mut traj.derivs[last..])?;
    Ok(traj)
}

/// Method-of-steps solve of `h' = f(h(t), h(t - tau), t)` on `[0, n * tau]`
/// with `h = phi` on `[-tau, 0]`.
///
/// Equivalent to RK4 on the stacked system where layer `k` holds
/// `h(k * tau + s)` for local time `s in [0, tau]` and is driven by layer
/// `k - 1` (layer 0 by `phi(s - tau)`, evaluated at the exact stage times). The
/// stacked Butcher tableau is block lower triangular, so each layer is
/// advanced in turn from the previous layer's stored stage states; the result
/// is bitwise the stacked solution.
pub fn integrate_ndde<F: VectorField + ?Sized>(
    field: &F,
    params: &[f64],
    history: &HistoryFunction,
    tau: f64,
    n_segments: usize,
    config: &SolverConfig,
) -> Result<Trajectory> {
    let h0 = history.initial_state()?;
    integrate_ndde_from(field, params, history, &h0, tau, n_segments, config)
}

/// As [`integrate_ndde`], with `h(0)` given separately from `phi` on `[-tau, 0)`.
pub fn integrate_ndde_from<F: VectorField + ?Sized>(
    field: &F,
    params: &[f64],
    history: &HistoryFunction,
    h0: &[f64],
    tau: f64,
    n_segments: usize,
    config: &SolverConfig,
) -> Result<Trajectory> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(NddeError::Input(format!("delay must be positive, got {tau}")));
    }
    if n_segments == 0 {
        return Err(NddeError::Input("need at least one segment".into()));
    }
    let d = field.dim();
    check_len("history width", d, history.dim())?;
    check_len("initial state", d, h0.len())?;
    check_len("field parameters", field.param_count(), params.len())?;
    if !history.covers(tau) {
        let (lo, hi) = history.domain();
        return Err(NddeError::Domain(format!(
            "history domain [{lo}, {hi}] does not cover [{}, 0]",
            -tau
        )));
    }
    check_finite(h0, 0.0)?;
    let m = config.steps_per_segment;
    if m == 0 {
        return Err(NddeError::Input("steps_per_segment must be at least 1".into()));
    }
    let total = n_segments * m;
    let mut traj = Trajectory {
        t0: 0.0,
        segment_len: tau,
        n_segments,
        steps_per_segment: m,
        dim: d,
        delay: Some(tau),
        states: vec![0.0; (total + 1) * d],
        derivs: vec![0.0; (total + 1) * d],
        stage_evaluations: 4 * total,
        auxiliary_evaluations: 1,
    };
    traj.states[..d].copy_from_slice(h0);

    // Delayed inputs for the current layer at every stage, `m x 4 x d`.
    let mut feed = vec![0.0; m * 4 * d];
    let mut next_feed = vec![0.0; m * 4 * d];
    history_stage_inputs(history, tau, m, &mut feed)?;
    let mut scratch = vec![0.0; 4 * d];
    for seg in 0..n_segments {
        let lo = seg * m * d;
        let hi = (seg + 1) * m * d + d;
        advance_layer(
            field,
            params,
            LayerGrid {
                t_start: seg as f64 * tau,
                tau,
                m,
                d,
            },
            &feed,
            Some(&mut next_feed),
            &mut traj.states[lo..hi],
            &mut traj.derivs[lo..hi - d],
            &mut scratch,
        )?;
        std::mem::swap(&mut feed, &mut next_feed);
    }
    // h'(T) needs h(T - tau), the stored checkpoint at (n - 1) tau (the state h0
    // itself when n = 1, matching the right limit used by the next layer).
    let hd = traj.checkpoint(n_segments - 1).to_vec();
    let last = total * d;
    let y = traj.states[last..].to_vec();
    field.eval(params, &y, &hd, traj.terminal_time(), &mut traj.derivs[last..])?;
    Ok(traj)
}

/// Uniform grid of one method-of-steps layer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerGrid {
    pub t_start: f64,
    pub tau: f64,
    pub m: usize,
    pub d: usize,
}

impl LayerGrid {
    pub fn dt(&self) -> f64 {
        self.tau / self.m as f64
    }

    /// Local time of grid point `i`, exact at both ends.
    pub fn local(&self, i: usize) -> f64 {
        if i == self.m {
            self.tau
        } else {
            i as f64 * self.dt()
        }
    }
}

/// Advances one layer over its segment with RK4.
///
/// `states` holds `m + 1` states with the initial state already in place;
/// `derivs[i]` receives the first-stage derivative of step `i` (`m` entries).
/// `feed` holds this layer's delayed input at each of the four stages of each
/// step; when `feed_out` is given it receives this layer's stage states, i.e.
/// the delayed inputs of the next layer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn advance_layer<F: VectorField + ?Sized>(
    field: &F,
    params: &[f64],
    grid: LayerGrid,
    feed: &[f64],
    mut feed_out: Option<&mut [f64]>,
    states: &mut [f64],
    derivs: &mut [f64],
    scratch: &mut [f64],
) -> Result<()> {
    let LayerGrid { m, d, .. } = grid;
    let dt = grid.dt();
    let mut stage = if feed_out.is_none() {
        vec![0.0; 4 * d]
    } else {
        Vec::new()
    };
    for i in 0..m {
        let t = grid.t_start + grid.local(i);
        let fb = i * 4 * d;
        let (head, tail) = states.split_at_mut((i + 1) * d);
        let y = &head[i * d..];
        let (k1, k234) = scratch.split_at_mut(d);
        let (k2, k34) = k234.split_at_mut(d);
        let (k3, k4) = k34.split_at_mut(d);
        let st: &mut [f64] = match feed_out.as_deref_mut() {
            Some(out) => &mut out[fb..fb + 4 * d],
            None => &mut stage,
        };
        let (s1, s234) = st.split_at_mut(d);
        let (s2, s34) = s234.split_at_mut(d);
        let (s3, s4) = s34.split_at_mut(d);

        s1.copy_from_slice(y);
        field.eval(params, s1, &feed[fb..fb + d], t, k1)?;
        for q in 0..d {
            s2[q] = y[q] + 0.5 * dt * k1[q];
        }
        field.eval(params, s2, &feed[fb + d..fb + 2 * d], t + 0.5 * dt, k2)?;
        for q in 0..d {
            s3[q] = y[q] + 0.5 * dt * k2[q];
        }
        field.eval(params, s3, &feed[fb + 2 * d..fb + 3 * d], t + 0.5 * dt, k3)?;
        for q in 0..d {
            s4[q] = y[q] + dt * k3[q];
        }
        field.eval(params, s4, &feed[fb + 3 * d..fb + 4 * d], t + dt, k4)?;
        let next = &mut tail[..d];
        for q in 0..d {
            next[q] = y[q] + dt / 6.0 * (k1[q] + 2.0 * k2[q] + 2.0 * k3[q] + k4[q]);
        }
        derivs[i * d..(i + 1) * d].copy_from_slice(k1);
        check_finite(next, grid.t_start + grid.local(i + 1))?;
    }
    Ok(())
}

/// Delayed inputs of the first layer: `phi(s - tau)` at the four stage times of
/// every step.
pub(crate) fn history_stage_inputs(
    history: &HistoryFunction,
    tau: f64,
    m: usize,
    out: &mut [f64],
) -> Result<()> {
    let d = history.dim();
    let dt = tau / m as f64;
    for i in 0..m {
        let s = i as f64 * dt;
        let s_end = if i + 1 == m { tau } else { (i + 1) as f64 * dt };
        let base = i * 4 * d;
        history.eval_into(s - tau, &mut out[base..base + d])?;
        history.eval_into(s + 0.5 * dt - tau, &mut out[base + d..base + 2 * d])?;
        out.copy_within(base + d..base + 2 * d, base + 2 * d);
        history.eval_into(s_end - tau, &mut out[base + 3 * d..base + 4 * d])?;
    }
    Ok(())
}
