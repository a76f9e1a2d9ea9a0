use super::grid::BackwardGrid;
use super::loss::ObservationLossGrads;
use crate::error::{check_len, NddeError, Result};
use crate::models::VectorField;
use crate::solver::integrate::{advance_layer, history_stage_inputs, LayerGrid};
use crate::solver::trajectory::hermite;
use crate::solver::{HistoryFunction, SolverConfig, Trajectory};

/// `{dL/dw, dL/dtau, dL/dh0, dL/dT}` plus two by-products of the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub grad_w: Vec<f64>,
    /// Partial derivative in the delay with `T` and the observation times held fixed.
    pub grad_tau: f64,
    /// Derivative in the initial state. For a constant history the initial state
    /// is also the history value, and both contributions are included.
    pub grad_h0: Vec<f64>,
    pub grad_t: f64,
    /// `lambda(0)`: the sensitivity to `h(0)` alone.
    pub adjoint_initial: Vec<f64>,
    /// `int_0^tau lambda^T df/dh_delayed ds`: the sensitivity to a uniform shift
    /// of the history on `[-tau, 0)`.
    pub history_sensitivity: Vec<f64>,
}

impl GradientBundle {
    pub fn zeros(dim: usize, params: usize) -> Self {
        Self {
            grad_w: vec![0.0; params],
            grad_tau: 0.0,
            grad_h0: vec![0.0; dim],
            grad_t: 0.0,
            adjoint_initial: vec![0.0; dim],
            history_sensitivity: vec![0.0; dim],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grad_tau.is_finite()
            && self.grad_t.is_finite()
            && [&self.grad_w, &self.grad_h0, &self.adjoint_initial, &self.history_sensitivity]
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Componentwise `self += other`.
    pub fn accumulate(&mut self, other: &GradientBundle) -> Result<()> {
        check_len("gradient bundle weights", self.grad_w.len(), other.grad_w.len())?;
        check_len("gradient bundle state", self.grad_h0.len(), other.grad_h0.len())?;
        let add = |a: &mut Vec<f64>, b: &Vec<f64>| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.grad_w, &other.grad_w);
        add(&mut self.grad_h0, &other.grad_h0);
        add(&mut self.adjoint_initial, &other.adjoint_initial);
        add(&mut self.history_sensitivity, &other.history_sensitivity);
        self.grad_tau += other.grad_tau;
        self.grad_t += other.grad_t;
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for v in [
            &mut self.grad_w,
            &mut self.grad_h0,
            &mut self.adjoint_initial,
            &mut self.history_sensitivity,
        ] {
            v.iter_mut().for_each(|x| *x *= c);
        }
        self.grad_tau *= c;
        self.grad_t *= c;
    }
}

/// How the backward pass recovers forward states inside a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StateReplay {
    /// Re-integrate from the stored checkpoints `h(k tau)` (the default).
    #[default]
    FromCheckpoints,
    /// Read the dense states already held by the trajectory.
    Stored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AdjointOptions {
    pub replay: StateReplay,
    /// Ablation: keep the advanced term `lambda(t + tau)` alive for
    /// `t > T - tau`, frozen at `lambda(T)` and `h(T)`. Gives wrong gradients;
    /// exists to show the cutoff matters.
    pub include_advanced_past_cutoff: bool,
}

/// What the backward pass kept in memory and how much work it did.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardAudit {
    pub segments: usize,
    /// Number of forward states `h(k tau)` copied out of the trajectory.
    pub state_checkpoints: usize,
    /// Lengths (in `f64`s) of every work buffer, independent of the segment count.
    pub work_buffers: Vec<usize>,
    /// `lambda(k tau)` for `k = 0..=n` (right limits at observation jumps).
    pub adjoint_checkpoints: Vec<Vec<f64>>,
    pub replayed_layers: usize,
    pub field_evaluations: usize,
    pub vjp_evaluations: usize,
}

impl BackwardAudit {
    pub fn work_buffer_floats(&self) -> usize {
        self.work_buffers.iter().sum()
    }
}

struct LayerBuf {
    states: Vec<f64>,
    derivs: Vec<f64>,
}

/// Supplies the grid states and derivatives of individual layers.
enum Source<'a> {
    Stored(&'a Trajectory),
    Replay {
        ring: [LayerBuf; 3],
        feed: Vec<f64>,
        next_feed: Vec<f64>,
        scratch: Vec<f64>,
        hd: Vec<f64>,
        checkpoints: Vec<f64>,
    },
}

impl Source<'_> {
    fn layer(&self, k: usize, m: usize, d: usize) -> (&[f64], &[f64]) {
        match self {
            Source::Stored(traj) => {
                let lo = k * m * d;
                let hi = (k + 1) * m * d + d;
                (&traj.states[lo..hi], &traj.derivs[lo..hi])
            }
            Source::Replay { ring, .. } => {
                let b = &ring[k % 3];
                (&b.states, &b.derivs)
            }
        }
    }

    /// Makes layers `upto - 2 ..= upto` available; returns field evaluations spent.
    #[allow(clippy::too_many_arguments)]
    fn prepare<F: VectorField + ?Sized>(
        &mut self,
        field: &F,
        params: &[f64],
        history: Option<&HistoryFunction>,
        tau: f64,
        m: usize,
        d: usize,
        upto: usize,
    ) -> Result<(usize, usize)> {
        let Source::Replay {
            ring,
            feed,
            next_feed,
            scratch,
            hd,
            checkpoints,
        } = self
        else {
            return Ok((0, 0));
        };
        let history = history.expect("replay only runs for delayed systems");
        history_stage_inputs(history, tau, m, feed)?;
        for k in 0..=upto {
            let end = m * d;
            let slot = &mut ring[k % 3];
            slot.states[..d].copy_from_slice(&checkpoints[k * d..(k + 1) * d]);
            advance_layer(
                field,
                params,
                LayerGrid {
                    t_start: k as f64 * tau,
                    tau,
                    m,
                    d,
                },
                feed,
                Some(next_feed),
                &mut slot.states,
                &mut slot.derivs[..end],
                scratch,
            )?;
            // h'(end of layer k) = f(h_k(tau), h_{k-1}(tau)) and h_{k-1}(tau) = h_k(0).
            hd.copy_from_slice(&slot.states[..d]);
            let (y, dy) = (&slot.states[end..], &mut slot.derivs[end..]);
            field.eval(params, y, hd, (k + 1) as f64 * tau, dy)?;
            std::mem::swap(feed, next_feed);
        }
        Ok((upto + 1, (upto + 1) * (4 * m + 1)))
    }
}

/// Mode-specific parts of the backward pass.
struct Setup<'a> {
    history: Option<&'a HistoryFunction>,
    tau: f64,
    seg: f64,
    t0: f64,
    n: usize,
    m: usize,
    d: usize,
}

impl Setup<'_> {
    fn local(&self, j: usize) -> f64 {
        if j == self.m {
            self.seg
        } else {
            j as f64 * (self.seg / self.m as f64)
        }
    }
}

/// Interpolates the layer at local time `t` inside forward step `j`.
#[inline]
fn layer_at(states: &[f64], derivs: &[f64], d: usize, j: usize, sj: f64, dtj: f64, t: f64, out: &mut [f64]) {
    let theta = (t - sj) / dtj;
    if theta == 0.0 {
        out.copy_from_slice(&states[j * d..(j + 1) * d]);
    } else if theta == 1.0 {
        out.copy_from_slice(&states[(j + 1) * d..(j + 2) * d]);
    } else {
        hermite(
            &states[j * d..(j + 1) * d],
            &derivs[j * d..(j + 1) * d],
            &states[(j + 1) * d..(j + 2) * d],
            &derivs[(j + 1) * d..(j + 2) * d],
            dtj,
            theta,
            out,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn run<F: VectorField + ?Sized>(
    field: &F,
    params: &[f64],
    traj: &Trajectory,
    setup: Setup<'_>,
    loss_grads: &ObservationLossGrads,
    options: &AdjointOptions,
) -> Result<(GradientBundle, BackwardAudit)> {
    let Setup { history, tau, t0, n, m, d, .. } = setup;
    let p = field.param_count();
    check_len("field parameters", p, params.len())?;
    check_len("trajectory width", d, traj.dim())?;
    check_len("field width", d, field.dim())?;
    if loss_grads.is_empty() {
        return Err(NddeError::Input("backward pass needs at least one observation".into()));
    }
    check_len("cotangent width", d, loss_grads.dim().unwrap_or(d))?;

    let mut grid = BackwardGrid::build(loss_grads, t0, setup.seg, n, m, |j| setup.local(j))?;
    let nsub = grid.subintervals();
    let last_point = nsub;
    let node_mode = history.is_none();

    let mut source = match (options.replay, node_mode) {
        (StateReplay::Stored, _) | (_, true) => Source::Stored(traj),
        (StateReplay::FromCheckpoints, false) => {
            let mut checkpoints = vec![0.0; (n + 1) * d];
            for k in 0..=n {
                checkpoints[k * d..(k + 1) * d].copy_from_slice(traj.checkpoint(k));
            }
            let buf = || LayerBuf {
                states: vec![0.0; (m + 1) * d],
                derivs: vec![0.0; (m + 1) * d],
            };
            Source::Replay {
                ring: [buf(), buf(), buf()],
                feed: vec![0.0; m * 4 * d],
                next_feed: vec![0.0; m * 4 * d],
                scratch: vec![0.0; 4 * d],
                hd: vec![0.0; d],
                checkpoints,
            }
        }
    };

    // Adjoint feed: lambda_{i+1}^T df/dh_delayed at every stage of the shared grid.
    let mut ghd_in = vec![0.0; nsub * 4 * d];
    let mut ghd_out = vec![0.0; nsub * 4 * d];
    let mut lam = vec![0.0; d];
    let mut stage_lam = vec![0.0; d];
    let mut k_lam = vec![0.0; 4 * d];
    let mut gh = vec![0.0; d];
    let mut gp = vec![0.0; 4 * p];
    let mut h = vec![0.0; 3 * d];
    let mut hd = vec![0.0; 3 * d];
    let mut hdot = vec![0.0; 3 * d];
    let mut tmp = vec![0.0; d];
    let mut h_term = vec![0.0; d];
    let mut lam_term = vec![0.0; d];
    let mut junk_h = vec![0.0; d];
    let mut junk_p = vec![0.0; p];

    let mut bundle = GradientBundle::zeros(d, p);
    let mut lam_checkpoints = vec![vec![0.0; d]; n + 1];
    let mut replayed = 0;
    let mut f_evals = 0;
    let mut vjps = 0;

    grid.apply_jumps(n - 1, last_point, &mut lam);
    lam_checkpoints[n].copy_from_slice(&lam);
    bundle.grad_t = crate::numerics::linalg::dot(&lam, traj.terminal_derivative());
    h_term.copy_from_slice(traj.terminal_state());
    lam_term.copy_from_slice(&lam);
    let forced = options.include_advanced_past_cutoff && !node_mode;

    for i in (0..n).rev() {
        if !node_mode {
            let (layers, evals) = source.prepare(field, params, history, tau, m, d, i)?;
            replayed += layers;
            f_evals += evals;
        }
        if i + 1 < n {
            grid.apply_jumps(i, last_point, &mut lam);
        }
        let t_layer = t0 + i as f64 * setup.seg;
        let has_adv = i + 1 < n;
        for k in (0..nsub).rev() {
            let (a, b) = (grid.points[k], grid.points[k + 1]);
            let j = grid.fwd[k];
            let (sj, sj1) = (setup.local(j), setup.local(j + 1));
            let dtj = sj1 - sj;
            let mid = 0.5 * (a + b);
            let times = [b, mid, a];
            {
                let (st, dv) = source.layer(i, m, d);
                for (u, &t) in times.iter().enumerate() {
                    layer_at(st, dv, d, j, sj, dtj, t, &mut h[u * d..(u + 1) * d]);
                }
            }
            if node_mode {
                hd.copy_from_slice(&h);
            } else if i == 0 {
                let hist = history.expect("delayed mode");
                for (u, &t) in times.iter().enumerate() {
                    hist.eval_into(t - tau, &mut hd[u * d..(u + 1) * d])?;
                    hist.derivative_into(t - tau, &mut hdot[u * d..(u + 1) * d])?;
                }
            } else {
                {
                    let (st, dv) = source.layer(i - 1, m, d);
                    for (u, &t) in times.iter().enumerate() {
                        layer_at(st, dv, d, j, sj, dtj, t, &mut hd[u * d..(u + 1) * d]);
                    }
                }
                if field.uses_delay() {
                    for (u, &t) in times.iter().enumerate() {
                        if i == 1 {
                            history.expect("delayed mode").eval_into(t - tau, &mut tmp)?;
                        } else {
                            let (st, dv) = source.layer(i - 2, m, d);
                            layer_at(st, dv, d, j, sj, dtj, t, &mut tmp);
                        }
                        let hprev = &hd[u * d..(u + 1) * d];
                        field.eval(
                            params,
                            hprev,
                            &tmp,
                            t_layer - setup.seg + t,
                            &mut hdot[u * d..(u + 1) * d],
                        )?;
                        f_evals += 1;
                    }
                } else {
                    hdot.fill(0.0);
                }
            }

            // RK4 from b to a on lambda' = -lambda^T f_h - (advanced term).
            let step = a - b;
            let mut w_tau = 0.0;
            for q in 0..4 {
                let u = [0, 1, 1, 2][q];
                let coef = [0.0, 0.5, 0.5, 1.0][q];
                stage_lam.copy_from_slice(&lam);
                if q > 0 {
                    let prev = &k_lam[(q - 1) * d..q * d];
                    for r in 0..d {
                        stage_lam[r] += coef * step * prev[r];
                    }
                }
                let base = (k * 4 + q) * d;
                let hs = &h[u * d..(u + 1) * d];
                let hds = &hd[u * d..(u + 1) * d];
                let t = t_layer + times[u];
                field.vjp(
                    params,
                    hs,
                    hds,
                    t,
                    &stage_lam,
                    &mut gh,
                    &mut ghd_out[base..base + d],
                    &mut gp[q * p..(q + 1) * p],
                )?;
                vjps += 1;
                let kq = &mut k_lam[q * d..(q + 1) * d];
                let g_delay = &ghd_out[base..base + d];
                if node_mode {
                    for r in 0..d {
                        kq[r] = -(gh[r] + g_delay[r]);
                    }
                } else if has_adv {
                    let adv = &ghd_in[base..base + d];
                    for r in 0..d {
                        kq[r] = -(gh[r] + adv[r]);
                    }
                } else if forced {
                    field.vjp(params, &h_term, hs, t + tau, &lam_term, &mut junk_h, &mut tmp, &mut junk_p)?;
                    vjps += 1;
                    for r in 0..d {
                        kq[r] = -(gh[r] + tmp[r]);
                    }
                } else {
                    for r in 0..d {
                        kq[r] = -gh[r];
                    }
                }
                if !node_mode {
                    let wq = [1.0, 2.0, 2.0, 1.0][q];
                    let dh = &hdot[u * d..(u + 1) * d];
                    w_tau -= wq * crate::numerics::linalg::dot(g_delay, dh);
                    if i == 0 {
                        for r in 0..d {
                            bundle.history_sensitivity[r] += (b - a) / 6.0 * wq * g_delay[r];
                        }
                    }
                }
            }
            for r in 0..d {
                lam[r] += step / 6.0
                    * (k_lam[r] + 2.0 * k_lam[d + r] + 2.0 * k_lam[2 * d + r] + k_lam[3 * d + r]);
            }
            let wgt = (b - a) / 6.0;
            for r in 0..p {
                bundle.grad_w[r] +=
                    wgt * (gp[r] + 2.0 * gp[p + r] + 2.0 * gp[2 * p + r] + gp[3 * p + r]);
            }
            bundle.grad_tau += wgt * w_tau;
            if let Some(r) = lam.iter().position(|v| !v.is_finite()) {
                return Err(NddeError::Divergence {
                    t: t_layer + a,
                    detail: format!("adjoint component {r} is {}", lam[r]),
                });
            }
            grid.apply_jumps(i, k, &mut lam);
        }
        lam_checkpoints[i].copy_from_slice(&lam);
        std::mem::swap(&mut ghd_in, &mut ghd_out);
    }
    debug_assert!(!grid.has_pending());

    bundle.adjoint_initial.copy_from_slice(&lam);
    bundle.grad_h0.copy_from_slice(&lam);
    if matches!(history, Some(HistoryFunction::Constant(_))) {
        for r in 0..d {
            bundle.grad_h0[r] += bundle.history_sensitivity[r];
        }
    }
    if !bundle.is_finite() {
        return Err(NddeError::Numerical("non-finite gradient".into()));
    }

    let mut work_buffers = vec![ghd_in.len(), ghd_out.len(), k_lam.len(), gp.len()];
    work_buffers.extend([h.len(), hd.len(), hdot.len(), 9 * d, 2 * p]);
    let state_checkpoints = match &source {
        Source::Replay { ring, feed, next_feed, scratch, checkpoints, .. } => {
            for b in ring {
                work_buffers.extend([b.states.len(), b.derivs.len()]);
            }
            work_buffers.extend([feed.len(), next_feed.len(), scratch.len(), d]);
            checkpoints.len() / d
        }
        Source::Stored(_) => 0,
    };
    let audit = BackwardAudit {
        segments: n,
        state_checkpoints,
        work_buffers,
        adjoint_checkpoints: lam_checkpoints,
        replayed_layers: replayed,
        field_evaluations: f_evals,
        vjp_evaluations: vjps,
    };
    Ok((bundle, audit))
}

/// Reverse-mode gradients of a loss observed along an NDDE trajectory.
///
/// Segments are processed from last to first. Within segment `i` the states of
/// layers `i`, `i-1`, `i-2` are re-integrated from the stored checkpoints and
/// the adjoint `lambda_i` is integrated backward with RK4 on the same grid.
/// The advanced term `lambda(t + tau)^T df/dh_delayed` is read from the stage
/// values saved while integrating `lambda_{i+1}`, so the result equals the
/// stacked backward system exactly; it is absent on the last segment.
pub fn adjoint_backward<F: VectorField + ?Sized>(
    field: &F,
    params: &[f64],
    traj: &Trajectory,
    history: &HistoryFunction,
    loss_grads: &ObservationLossGrads,
    config: &SolverConfig,
) -> Result<GradientBundle> {
    adjoint_backward_with(field, params, traj, history, loss_grads, config, &AdjointOptions::default())
        .map(|(g, _)| g)
}

/// [`adjoint_backward`] with explicit options, also returning the audit.
pub fn adjoint_backward_with<F: VectorField + ?Sized>(
    field: &F,
    params: &[f64],
    traj: &Trajectory,
    history: &HistoryFunction,
    loss_grads: &ObservationLossGrads,
    config: &SolverConfig,
    options: &AdjointOptions,
) -> Result<(GradientBundle, BackwardAudit)> {
    let tau = traj
        .delay()
        .ok_or_else(|| NddeError::State("trajectory has no delay checkpoints".into()))?;
    if traj.steps_per_segment() != config.steps_per_segment {
        return Err(NddeError::State(format!(
            "trajectory grid has {} steps per segment, config asks for {}",
            traj.steps_per_segment(),
            config.steps_per_segment
        )));
    }
    if traj.start_time() != 0.0 {
        return Err(NddeError::State("delayed trajectory must start at t = 0".into()));
    }
    check_len("history width", traj.dim(), history.dim())?;
    let setup = Setup {
        history: Some(history),
        tau,
        seg: tau,
        t0: 0.0,
        n: traj.n_segments(),
        m: traj.steps_per_segment(),
        d: traj.dim(),
    };
    run(field, params, traj, setup, loss_grads, options)
}

/// Gradients of a NODE trajectory: `(dL/dw, dL/dh0, dL/dt1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeGradients {
    pub grad_w: Vec<f64>,
    pub grad_h0: Vec<f64>,
    pub grad_t: f64,
}

/// Classical adjoint `lambda' = -lambda^T df/dh` for `h' = f(h, h, t)`.
pub fn node_adjoint_backward<F: VectorField + ?Sized>(
    field: &F,
    params: &[f64],
    traj: &Trajectory,
    loss_grads: &ObservationLossGrads,
) -> Result<NodeGradients> {
    if traj.delay().is_some() {
        return Err(NddeError::State(
            "delayed trajectory passed to the NODE adjoint; use adjoint_backward".into(),
        ));
    }
    let setup = Setup {
        history: None,
        tau: 0.0,
        seg: traj.segment_len(),
        t0: traj.start_time(),
        n: traj.n_segments(),
        m: traj.steps_per_segment(),
        d: traj.dim(),
    };
    let (g, _) = run(field, params, traj, setup, loss_grads, &AdjointOptions::default())?;
    Ok(NodeGradients {
        grad_w: g.grad_w,
        grad_h0: g.adjoint_initial,
        grad_t: g.grad_t,
    })
}
