//! Finite-difference oracle for [`GradientBundle`](super::GradientBundle).
//!
//! Perturbing the delay with `T` fixed (or `T` with the delay fixed) leaves the
//! `T = n * tau` lattice, so the oracle carries its own method-of-steps solver
//! whose last segment may be partial. It runs on a much finer grid than the
//! solve being checked so that discretization error stays far below the
//! finite-difference resolution.

use super::backward::{adjoint_backward, GradientBundle};
use super::loss::{loss_cotangents, loss_from_states, LossSpec, Observation};
use crate::error::{check_len, NddeError, Result};
use crate::models::VectorField;
use crate::solver::trajectory::hermite;
use crate::solver::{integrate_ndde, HistoryFunction, SolverConfig};

/// Grid solution on `[0, t_end]` with possibly non-uniform steps.
#[derive(Debug, Clone)]
pub struct GeneralSolution {
    times: Vec<f64>,
    states: Vec<f64>,
    derivs: Vec<f64>,
    dim: usize,
}

impl GeneralSolution {
    pub fn terminal_state(&self) -> &[f64] {
        &self.states[self.states.len() - self.dim..]
    }

    pub fn terminal_time(&self) -> f64 {
        *self.times.last().expect("nonempty grid")
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let d = self.dim;
        let t_end = self.terminal_time();
        let tol = 1e-12 * t_end.max(1.0);
        if !(t >= -tol && t <= t_end + tol) {
            return Err(NddeError::Domain(format!("t = {t} outside [0, {t_end}]")));
        }
        let t = t.clamp(0.0, t_end);
        let j = self.times.partition_point(|s| *s <= t).saturating_sub(1);
        let j = j.min(self.times.len() - 2);
        let dt = self.times[j + 1] - self.times[j];
        let mut out = vec![0.0; d];
        hermite(
            &self.states[j * d..(j + 1) * d],
            &self.derivs[j * d..(j + 1) * d],
            &self.states[(j + 1) * d..(j + 2) * d],
            &self.derivs[(j + 1) * d..(j + 2) * d],
            dt,
            (t - self.times[j]) / dt,
            &mut out,
        );
        Ok(out)
    }
}

/// Method of steps for arbitrary `t_end > 0`: `ceil(t_end / tau)` layers, the
/// last one stopping at `r = t_end - (layers - 1) tau`. About `steps_per_delay`
/// RK4 steps cover each delay interval; `h(0) = h0` is separate from `phi`.
#[allow(clippy::too_many_arguments)]
pub fn integrate_general<F: VectorField + ?Sized>(
    field: &F,
    params: &[f64],
    history: &HistoryFunction,
    h0: &[f64],
    tau: f64,
    t_end: f64,
    steps_per_delay: usize,
) -> Result<GeneralSolution> {
    if !(tau > 0.0 && t_end > 0.0) || steps_per_delay == 0 {
        return Err(NddeError::Input(format!(
            "need tau > 0, t_end > 0 and steps > 0 (tau = {tau}, t_end = {t_end})"
        )));
    }
    let d = field.dim();
    check_len("initial state", d, h0.len())?;
    let layers = ((t_end / tau - 1e-12).ceil() as usize).max(1);
    let r = t_end - (layers - 1) as f64 * tau;
    let big_m = steps_per_delay as f64;
    let m1 = ((big_m * r / tau - 1e-9).ceil() as usize).max(1);
    let m2 = if tau - r > 1e-14 * tau {
        ((big_m * (tau - r) / tau - 1e-9).ceil() as usize).max(1)
    } else {
        0
    };
    // Local grid on [0, tau]: m1 steps to r, then m2 to tau.
    let mut local: Vec<f64> = (0..=m1).map(|i| if i == m1 { r } else { r * i as f64 / m1 as f64 }).collect();
    for i in 1..=m2 {
        local.push(if i == m2 { tau } else { r + (tau - r) * i as f64 / m2 as f64 });
    }
    let steps_full = m1 + m2;

    let mut feed = vec![0.0; steps_full * 4 * d];
    for i in 0..steps_full {
        let (a, b) = (local[i], local[i + 1]);
        let base = i * 4 * d;
        history.eval_into(a - tau, &mut feed[base..base + d])?;
        history.eval_into(0.5 * (a + b) - tau, &mut feed[base + d..base + 2 * d])?;
        feed.copy_within(base + d..base + 2 * d, base + 2 * d);
        history.eval_into(b - tau, &mut feed[base + 3 * d..base + 4 * d])?;
    }
    let mut next = vec![0.0; steps_full * 4 * d];
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut derivs = Vec::new();
    let mut y = h0.to_vec();
    let mut tmp = vec![0.0; d];
    let mut k = vec![vec![0.0; d]; 4];
    let mut prev_layer_states: Vec<f64> = Vec::new();
    for layer in 0..layers {
        let steps = if layer + 1 == layers { m1 } else { steps_full };
        let t_off = layer as f64 * tau;
        let mut layer_states = y.clone();
        for i in 0..steps {
            let (a, b) = (local[i], local[i + 1]);
            let dt = b - a;
            let base = i * 4 * d;
            for q in 0..4 {
                let (c, ts) = [(0.0, a), (0.5, a + 0.5 * dt), (0.5, a + 0.5 * dt), (1.0, b)][q];
                for r in 0..d {
                    tmp[r] = if q == 0 { y[r] } else { y[r] + c * dt * k[q - 1][r] };
                }
                next[base + q * d..base + (q + 1) * d].copy_from_slice(&tmp);
                let hd = &feed[base + q * d..base + (q + 1) * d];
                field.eval(params, &tmp, hd, t_off + ts, &mut k[q])?;
            }
            if i > 0 || layer == 0 {
                times.push(t_off + a);
                states.extend_from_slice(&y);
                derivs.extend_from_slice(&k[0]);
            } else {
                // Boundary point: keep the right derivative from this layer.
                let n = derivs.len();
                derivs[n - d..].copy_from_slice(&k[0]);
            }
            for r in 0..d {
                y[r] += dt / 6.0 * (k[0][r] + 2.0 * k[1][r] + 2.0 * k[2][r] + k[3][r]);
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(NddeError::Divergence {
                    t: t_off + b,
                    detail: "non-finite state in reference solve".into(),
                });
            }
            layer_states.extend_from_slice(&y);
        }
        times.push(t_off + local[steps]);
        states.extend_from_slice(&y);
        // Placeholder derivative, replaced by the next layer or the terminal value.
        derivs.extend_from_slice(&k[0]);
        if layer + 1 == layers {
            let hd = if layer == 0 {
                if m2 == 0 {
                    h0.to_vec()
                } else {
                    history.eval(r - tau)?
                }
            } else {
                prev_layer_states[m1 * d..(m1 + 1) * d].to_vec()
            };
            let n = derivs.len();
            field.eval(params, &y, &hd, t_end, &mut derivs[n - d..])?;
        }
        prev_layer_states = layer_states;
        std::mem::swap(&mut feed, &mut next);
    }
    let n = times.len();
    times[n - 1] = t_end;
    Ok(GeneralSolution {
        times,
        states,
        derivs,
        dim: d,
    })
}

/// One analytic/finite-difference pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentCheck {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl ComponentCheck {
    pub fn abs_error(&self) -> f64 {
        (self.analytic - self.numeric).abs()
    }

    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            self.abs_error() / scale
        }
    }

    /// Relative error below `rel_tol`, or absolute error below `abs_tol` when
    /// the gradient itself is smaller than `small`.
    pub fn passes(&self, rel_tol: f64, abs_tol: f64, small: f64) -> bool {
        let scale = self.analytic.abs().max(self.numeric.abs());
        self.rel_error() < rel_tol || (scale < small && self.abs_error() < abs_tol)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checks: Vec<ComponentCheck>,
}

impl GradCheckReport {
    pub const REL_TOL: f64 = 1e-4;
    pub const ABS_TOL: f64 = 1e-7;
    pub const SMALL: f64 = 1e-3;

    pub fn passes(&self) -> bool {
        self.checks
            .iter()
            .all(|c| c.passes(Self::REL_TOL, Self::ABS_TOL, Self::SMALL))
    }

    pub fn failures(&self) -> Vec<&ComponentCheck> {
        self.checks
            .iter()
            .filter(|c| !c.passes(Self::REL_TOL, Self::ABS_TOL, Self::SMALL))
            .collect()
    }

    /// Largest relative error among checks whose name starts with `prefix`,
    /// counting small gradients that pass on absolute error as zero.
    pub fn max_rel_error(&self, prefix: &str) -> f64 {
        self.checks
            .iter()
            .filter(|c| c.name.starts_with(prefix))
            .map(|c| {
                if c.passes(0.0, Self::ABS_TOL, Self::SMALL) {
                    0.0
                } else {
                    c.rel_error()
                }
            })
            .fold(0.0, f64::max)
    }
}

/// A loss on one NDDE solve `h(0) = phi(0)`, `T = n tau`.
pub struct GradCheckCase<'a> {
    pub field: &'a dyn VectorField,
    pub params: Vec<f64>,
    pub history: HistoryFunction,
    pub tau: f64,
    pub n_segments: usize,
    pub steps_per_segment: usize,
    pub loss: LossSpec,
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub fd_step: f64,
    pub oracle_steps_per_delay: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            fd_step: 1e-5,
            oracle_steps_per_delay: 2000,
        }
    }
}

impl GradCheckCase<'_> {
    pub fn terminal_time(&self) -> f64 {
        self.n_segments as f64 * self.tau
    }

    /// The adjoint gradients under test.
    pub fn analytic(&self) -> Result<GradientBundle> {
        let cfg = SolverConfig::new(self.steps_per_segment)?;
        let traj = integrate_ndde(
            self.field,
            &self.params,
            &self.history,
            self.tau,
            self.n_segments,
            &cfg,
        )?;
        let eval = loss_cotangents(&self.loss, &traj, &self.observations)?;
        adjoint_backward(self.field, &self.params, &traj, &self.history, &eval.cotangents, &cfg)
    }

    /// Loss from the reference solver, observations at the nominal `T`
    /// following the perturbed terminal time.
    #[allow(clippy::too_many_arguments)]
    pub fn reference_loss(
        &self,
        params: &[f64],
        history: &HistoryFunction,
        h0: &[f64],
        tau: f64,
        t_end: f64,
        steps: usize,
    ) -> Result<f64> {
        let sol = integrate_general(self.field, params, history, h0, tau, t_end, steps)?;
        let t_nom = self.terminal_time();
        let states = self
            .observations
            .iter()
            .map(|o| {
                let at_end = (o.time - t_nom).abs() <= 1e-12 * t_nom.max(1.0);
                sol.eval(if at_end { t_end } else { o.time })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(loss_from_states(&self.loss, &states, &self.observations)?.0)
    }

    pub fn check(&self, opts: &GradCheckOptions) -> Result<GradCheckReport> {
        let g = self.analytic()?;
        let eps = opts.fd_step;
        let steps = opts.oracle_steps_per_delay;
        let h0 = self.history.initial_state()?;
        let t_end = self.terminal_time();
        let central = |plus: f64, minus: f64| (plus - minus) / (2.0 * eps);
        let mut checks = Vec::new();

        let mut p = self.params.clone();
        for i in 0..p.len() {
            let orig = p[i];
            p[i] = orig + eps;
            let lp = self.reference_loss(&p, &self.history, &h0, self.tau, t_end, steps)?;
            p[i] = orig - eps;
            let lm = self.reference_loss(&p, &self.history, &h0, self.tau, t_end, steps)?;
            p[i] = orig;
            checks.push(ComponentCheck {
                name: format!("w[{i}]"),
                analytic: g.grad_w[i],
                numeric: central(lp, lm),
            });
        }

        for i in 0..h0.len() {
            let shifted = |delta: f64| -> Result<f64> {
                let mut x = h0.clone();
                x[i] += delta;
                match &self.history {
                    HistoryFunction::Constant(_) => {
                        let hist = HistoryFunction::constant(x.clone())?;
                        self.reference_loss(&self.params, &hist, &x, self.tau, t_end, steps)
                    }
                    other => self.reference_loss(&self.params, other, &x, self.tau, t_end, steps),
                }
            };
            checks.push(ComponentCheck {
                name: format!("h0[{i}]"),
                analytic: g.grad_h0[i],
                numeric: central(shifted(eps)?, shifted(-eps)?),
            });
        }

        // The loss is only C^1 in tau and T across the T = n tau lattice, so
        // both use second-order one-sided differences from above.
        let one_sided = |l: &dyn Fn(f64) -> Result<f64>| -> Result<f64> {
            Ok((-3.0 * l(0.0)? + 4.0 * l(eps)? - l(2.0 * eps)?) / (2.0 * eps))
        };
        let numeric = one_sided(&|delta| {
            self.reference_loss(&self.params, &self.history, &h0, self.tau + delta, t_end, steps)
        })?;
        checks.push(ComponentCheck {
            name: "tau".into(),
            analytic: g.grad_tau,
            numeric,
        });
        let numeric = one_sided(&|delta| {
            self.reference_loss(&self.params, &self.history, &h0, self.tau, t_end + delta, steps)
        })?;
        checks.push(ComponentCheck {
            name: "T".into(),
            analytic: g.grad_t,
            numeric,
        });
        Ok(GradCheckReport { checks })
    }
}
