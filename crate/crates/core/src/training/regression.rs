use std::sync::Arc;

use super::config::TrainConfig;
use super::engine::{train, ItemEval, Objective};
use super::record::TrainRecord;
use crate::adjoint::{adjoint_backward, loss_from_states, node_adjoint_backward, LossSpec, Observation, ObservationLossGrads};
use crate::error::{check_len, NddeError, Result};
use crate::models::{augment_state, HistoryKind, ModelSpec, VectorField};
use crate::solver::{fit_natural_cubic_spline, integrate_ndde_from, integrate_node, HistoryFunction, SolverConfig, Trajectory};

/// One observed trajectory in local time: samples at `t <= 0` give the history
/// (the last one is the value at `t = 0`), observations lie in `(0, t_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub history: Vec<(f64, Vec<f64>)>,
    pub observations: Vec<Observation>,
}

impl Series {
    pub fn initial_value(&self) -> Result<&[f64]> {
        self.history
            .last()
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| NddeError::Input("series has no history samples".into()))
    }

    pub fn horizon(&self) -> f64 {
        self.observations.iter().map(|o| o.time).fold(0.0, f64::max)
    }

    /// A sampled trajectory starting at its first sample, which becomes the
    /// constant history value.
    pub fn from_trajectory(samples: &[(f64, Vec<f64>)]) -> Result<Self> {
        let (t0, v0) = samples
            .first()
            .ok_or_else(|| NddeError::Input("empty sample list".into()))?;
        Ok(Self {
            history: vec![(0.0, v0.clone())],
            observations: samples[1..]
                .iter()
                .map(|(t, v)| Observation::new(t - t0, v.clone()))
                .collect(),
        })
    }
}

/// Cuts a uniformly sampled series into windows starting every `stride`. Each
/// window carries the samples of the preceding `history_span` as its history
/// and the following `horizon` as observations, all shifted to local time.
pub fn windows(
    samples: &[(f64, Vec<f64>)],
    history_span: f64,
    horizon: f64,
    stride: f64,
) -> Result<Vec<Series>> {
    if !(history_span >= 0.0 && horizon > 0.0 && stride > 0.0) {
        return Err(NddeError::Input("window lengths must be positive".into()));
    }
    let Some(first) = samples.first() else {
        return Ok(Vec::new());
    };
    let last = samples.last().map_or(first.0, |s| s.0);
    let tol = 1e-9 * (last - first.0).abs().max(1.0);
    let mut out = Vec::new();
    let mut start = first.0 + history_span;
    while start + horizon <= last + tol {
        let history: Vec<(f64, Vec<f64>)> = samples
            .iter()
            .filter(|(t, _)| *t >= start - history_span - tol && *t <= start + tol)
            .map(|(t, v)| (t - start, v.clone()))
            .collect();
        let observations: Vec<Observation> = samples
            .iter()
            .filter(|(t, _)| *t > start + tol && *t <= start + horizon + tol)
            .map(|(t, v)| Observation::new(t - start, v.clone()))
            .collect();
        if !observations.is_empty() && !history.is_empty() {
            out.push(Series {
                history,
                observations,
            });
        }
        start += stride;
    }
    Ok(out)
}

/// A quantity reported per epoch, divided by `normalizer`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracked {
    pub name: String,
    pub source: TrackedSource,
    pub normalizer: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackedSource {
    Param(usize),
    Tau,
}

struct Prepared {
    history: HistoryFunction,
    h0: Vec<f64>,
    observations: Vec<Observation>,
    t_max: f64,
}

/// Fits a model to one or more series by minimizing the mean squared error at
/// the observation times.
///
/// `theta` holds, in order, the weights (if trainable), the delay (if
/// trainable) and the initial state (if trainable). Weights and delay may be
/// stored relative to a scale so that parameters of different magnitude move
/// at comparable rates. Delayed models integrate `ceil(t_max / tau)` segments
/// for each series.
pub struct RegressionProblem {
    spec: ModelSpec,
    field: Arc<dyn VectorField>,
    solver: SolverConfig,
    series: Vec<Prepared>,
    weights: Vec<f64>,
    w_scale: Vec<f64>,
    tau_scale: f64,
    train_w: bool,
    train_tau: bool,
    train_h0: bool,
    tracked: Vec<Tracked>,
    tau_lr_scale: f64,
}

impl RegressionProblem {
    pub fn new(
        spec: &ModelSpec,
        weights: Vec<f64>,
        series: &[Series],
        solver: SolverConfig,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let field = spec.build_field()?;
        check_len("model parameters", field.param_count(), weights.len())?;
        let train_tau = spec.train_tau || cfg.trainable.tau;
        if train_tau && spec.is_node() {
            return Err(NddeError::Config("a NODE has no delay to train".into()));
        }
        if train_tau && !(spec.tau_min > 0.0 && spec.tau_min < spec.tau_max) {
            return Err(NddeError::Config(
                "trainable delay needs 0 < tau_min < tau_max".into(),
            ));
        }
        if cfg.trainable.h0 && (series.len() != 1 || spec.history != HistoryKind::Constant) {
            return Err(NddeError::Config(
                "a trainable initial state needs a single series with constant history".into(),
            ));
        }
        let d = spec.data_dim();
        let p = spec.augment;
        let tau_reach = if train_tau { spec.tau_max } else { spec.tau };
        let series = series
            .iter()
            .map(|s| {
                for o in &s.observations {
                    check_len("observation width", d, o.target.len())?;
                    if !(o.time >= 0.0) {
                        return Err(NddeError::Input(format!(
                            "observation time {} is negative",
                            o.time
                        )));
                    }
                }
                if s.observations.is_empty() {
                    return Err(NddeError::Input("series has no observations".into()));
                }
                let h0 = augment_state(s.initial_value()?, p);
                let history = match spec.history {
                    HistoryKind::Constant => HistoryFunction::constant(h0.clone())?,
                    HistoryKind::Spline => {
                        let samples: Vec<(f64, Vec<f64>)> =
                            s.history.iter().map(|(t, v)| (*t, augment_state(v, p))).collect();
                        let hf = fit_natural_cubic_spline(&samples)?;
                        if !spec.is_node() && !hf.covers(tau_reach) {
                            return Err(NddeError::Input(format!(
                                "history samples do not cover [-{tau_reach}, 0]"
                            )));
                        }
                        hf
                    }
                };
                Ok(Prepared {
                    history,
                    h0,
                    observations: s.observations.clone(),
                    t_max: s.horizon(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: spec.clone(),
            w_scale: vec![1.0; weights.len()],
            field,
            solver,
            series,
            weights,
            tau_scale: 1.0,
            train_w: cfg.trainable.weights,
            train_tau,
            train_h0: cfg.trainable.h0,
            tracked: Vec::new(),
            tau_lr_scale: cfg.tau_lr_scale,
        })
    }

    /// Stores weights as `w / scale` and the delay as `tau / tau_scale`.
    pub fn with_scaling(mut self, w_scale: Vec<f64>, tau_scale: f64) -> Result<Self> {
        check_len("weight scale", self.weights.len(), w_scale.len())?;
        if w_scale.iter().chain([&tau_scale]).any(|s| !(s.is_finite() && *s != 0.0)) {
            return Err(NddeError::Input("scales must be finite and nonzero".into()));
        }
        self.w_scale = w_scale;
        self.tau_scale = tau_scale;
        Ok(self)
    }

    /// Replaces the field built from the `ModelSpec`, e.g. by an instrumented wrapper
    /// with the same shape.
    pub fn with_field(mut self, field: Arc<dyn VectorField>) -> Result<Self> {
        check_len("replacement field dimension", self.field.dim(), field.dim())?;
        check_len("replacement field parameters", self.field.param_count(), field.param_count())?;
        self.field = field;
        Ok(self)
    }

    pub fn with_tracked(mut self, tracked: Vec<Tracked>) -> Self {
        self.tracked = tracked;
        self
    }

    pub fn initial_theta(&self) -> Vec<f64> {
        let mut theta = Vec::new();
        if self.train_w {
            theta.extend(self.weights.iter().zip(&self.w_scale).map(|(w, s)| w / s));
        }
        if self.train_tau {
            theta.push(self.spec.tau / self.tau_scale);
        }
        if self.train_h0 {
            theta.extend_from_slice(&self.series[0].h0);
        }
        theta
    }

    /// `(weights, tau, h0 override)` encoded by `theta`.
    pub fn decode<'a>(&'a self, theta: &'a [f64]) -> (Vec<f64>, f64, Option<&'a [f64]>) {
        let mut at = 0;
        let w = if self.train_w {
            at = self.weights.len();
            theta[..at].iter().zip(&self.w_scale).map(|(t, s)| t * s).collect()
        } else {
            self.weights.clone()
        };
        let tau = if self.train_tau {
            at += 1;
            theta[at - 1] * self.tau_scale
        } else {
            self.spec.tau
        };
        let h0 = self.train_h0.then(|| &theta[at..at + self.spec.state_dim()]);
        (w, tau, h0)
    }

    pub fn field(&self) -> &dyn VectorField {
        self.field.as_ref()
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    fn segments(&self, t_max: f64, tau: f64) -> usize {
        ((t_max / tau) - 1e-9).ceil().max(1.0) as usize
    }

    /// Forward solve of series `i` under `theta`.
    pub fn solve(&self, theta: &[f64], i: usize) -> Result<Trajectory> {
        let (w, tau, h0) = self.decode(theta);
        self.solve_with(&w, tau, h0, i).map(|(t, _)| t)
    }

    fn solve_with(
        &self,
        w: &[f64],
        tau: f64,
        h0: Option<&[f64]>,
        i: usize,
    ) -> Result<(Trajectory, Option<HistoryFunction>)> {
        let s = &self.series[i];
        let h0 = h0.unwrap_or(&s.h0);
        if self.spec.is_node() {
            let n = self.segments(s.t_max, self.spec.tau);
            let traj = integrate_node(
                self.field.as_ref(),
                w,
                h0,
                0.0,
                s.t_max,
                n * self.solver.steps_per_segment,
            )?;
            return Ok((traj, None));
        }
        let n = self.segments(s.t_max, tau);
        let own = self.train_h0.then(|| HistoryFunction::constant(h0.to_vec())).transpose()?;
        let hist = own.as_ref().unwrap_or(&s.history);
        let traj = integrate_ndde_from(self.field.as_ref(), w, hist, h0, tau, n, &self.solver)?;
        Ok((traj, own))
    }

    /// Model states at the observation times of series `i`, data coordinates only.
    pub fn predict(&self, theta: &[f64], i: usize) -> Result<Vec<(f64, Vec<f64>)>> {
        let traj = self.solve(theta, i)?;
        let d = self.spec.data_dim();
        self.series[i]
            .observations
            .iter()
            .map(|o| Ok((o.time, traj.dense_eval(o.time)?[..d].to_vec())))
            .collect()
    }
}

impl Objective for RegressionProblem {
    fn len(&self) -> usize {
        self.series.len()
    }

    fn theta_len(&self) -> usize {
        (if self.train_w { self.weights.len() } else { 0 })
            + usize::from(self.train_tau)
            + if self.train_h0 { self.spec.state_dim() } else { 0 }
    }

    fn evaluate(&self, theta: &[f64], item: usize, grad: Option<&mut [f64]>) -> Result<ItemEval> {
        let (w, tau, h0) = self.decode(theta);
        let (traj, own_history) = self.solve_with(&w, tau, h0, item)?;
        let s = &self.series[item];
        let d = self.spec.data_dim();
        let states = s
            .observations
            .iter()
            .map(|o| Ok(traj.dense_eval(o.time)?[..d].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let (loss, cots, _) = loss_from_states(&LossSpec::Mse, &states, &s.observations)?;
        let eval = ItemEval {
            loss,
            nfe: traj.stage_evaluations() as u64,
        };
        let Some(grad) = grad else {
            return Ok(eval);
        };
        let entries = s
            .observations
            .iter()
            .zip(cots)
            .map(|(o, c)| (o.time, augment_state(&c, self.spec.augment)))
            .collect();
        let lg = ObservationLossGrads::new(entries)?;
        let (gw, gtau, gh0) = if self.spec.is_node() {
            let g = node_adjoint_backward(self.field.as_ref(), &w, &traj, &lg)?;
            (g.grad_w, 0.0, g.grad_h0)
        } else {
            let hist = own_history.as_ref().unwrap_or(&s.history);
            let g = adjoint_backward(self.field.as_ref(), &w, &traj, hist, &lg, &self.solver)?;
            (g.grad_w, g.grad_tau, g.grad_h0)
        };
        let mut at = 0;
        if self.train_w {
            for (k, (g, sc)) in gw.iter().zip(&self.w_scale).enumerate() {
                grad[k] = g * sc;
            }
            at = gw.len();
        }
        if self.train_tau {
            grad[at] = gtau * self.tau_scale;
            at += 1;
        }
        if self.train_h0 {
            grad[at..].copy_from_slice(&gh0);
        }
        Ok(eval)
    }

    fn lr_scale(&self) -> Option<Vec<f64>> {
        if !self.train_tau || self.tau_lr_scale == 1.0 {
            return None;
        }
        let mut s = vec![1.0; self.theta_len()];
        let at = if self.train_w { self.weights.len() } else { 0 };
        s[at] = self.tau_lr_scale;
        Some(s)
    }

    fn project(&self, theta: &mut [f64]) -> Option<f64> {
        if !self.train_tau {
            return None;
        }
        let at = if self.train_w { self.weights.len() } else { 0 };
        let mut tau = theta[at] * self.tau_scale;
        if self.spec.project_tau(&mut tau) {
            theta[at] = tau / self.tau_scale;
            Some(tau)
        } else {
            None
        }
    }

    fn tau(&self, theta: &[f64]) -> Option<f64> {
        (!self.spec.is_node()).then(|| self.decode(theta).1)
    }

    fn tracked(&self, theta: &[f64]) -> Vec<(String, f64)> {
        if self.tracked.is_empty() {
            return Vec::new();
        }
        let (w, tau, _) = self.decode(theta);
        self.tracked
            .iter()
            .map(|t| {
                let v = match t.source {
                    TrackedSource::Param(k) => w[k],
                    TrackedSource::Tau => tau,
                };
                (t.name.clone(), v / t.normalizer)
            })
            .collect()
    }
}

/// Trains `spec` from `weights` on `train_series`, reporting the loss on
/// `test_series` each epoch when given.
pub fn train_regression(
    spec: &ModelSpec,
    weights: Vec<f64>,
    train_series: &[Series],
    test_series: Option<&[Series]>,
    solver: SolverConfig,
    cfg: &TrainConfig,
) -> Result<TrainRecord> {
    let problem = RegressionProblem::new(spec, weights.clone(), train_series, solver, cfg)?;
    let test = test_series
        .map(|s| RegressionProblem::new(spec, weights, s, solver, cfg))
        .transpose()?;
    let theta0 = problem.initial_theta();
    train(&problem, test.as_ref(), theta0, cfg)
}
