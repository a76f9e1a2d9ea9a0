use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::engine::{train, ItemEval, Objective};
use super::record::TrainRecord;
use crate::adjoint::loss::{sigmoid, softplus};
use crate::adjoint::{adjoint_backward, node_adjoint_backward, ObservationLossGrads};
use crate::error::{check_len, NddeError, Result};
use crate::models::{augment_state, ModelSpec, VectorField};
use crate::numerics::linalg::dot;
use crate::solver::{integrate_ndde, integrate_node, HistoryFunction, SolverConfig, Trajectory};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoint {
    pub x: Vec<f64>,
    /// `+1` or `-1`.
    pub label: f64,
}

/// Uniform samples from the disk `||x|| <= r1` (label `+1`) and the annulus
/// `r2 <= ||x|| <= r3` (label `-1`), `per_class` each, interleaved.
pub fn concentric_dataset(
    r1: f64,
    r2: f64,
    r3: f64,
    d: usize,
    per_class: usize,
    seed: u64,
) -> Result<Vec<LabeledPoint>> {
    if !(0.0 < r1 && r1 < r2 && r2 < r3) || d == 0 {
        return Err(NddeError::Input(format!(
            "need 0 < r1 < r2 < r3 and d >= 1, got ({r1}, {r2}, {r3}), d = {d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * per_class);
    for _ in 0..per_class {
        out.push(LabeledPoint {
            x: sample_shell(&mut rng, d, 0.0, r1),
            label: 1.0,
        });
        out.push(LabeledPoint {
            x: sample_shell(&mut rng, d, r2, r3),
            label: -1.0,
        });
    }
    Ok(out)
}

/// Uniform in volume on `lo <= ||x|| <= hi`.
pub fn sample_shell<R: Rng + ?Sized>(rng: &mut R, d: usize, lo: f64, hi: f64) -> Vec<f64> {
    let dir: Vec<f64> = loop {
        let v: Vec<f64> = (0..d)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let n = crate::numerics::linalg::norm(&v);
        if n > 1e-12 {
            break v.iter().map(|x| x / n).collect();
        }
    };
    let u: f64 = rng.random_range(0.0..1.0);
    let dd = d as f64;
    let r = (lo.powf(dd) + u * (hi.powf(dd) - lo.powf(dd))).powf(1.0 / dd);
    dir.iter().map(|x| r * x).collect()
}

/// Logistic loss of a linear readout of `h(T)`, where `h` starts from the
/// constant history given by the (augmented) input point.
///
/// `theta` holds the weights, the terminal time and the readout
/// `[w_1..w_D, b]`, each when trainable. The number of segments is fixed, so
/// a trainable `T` moves the delay with it.
pub struct ClassifierProblem {
    spec: ModelSpec,
    field: Arc<dyn VectorField>,
    solver: SolverConfig,
    points: Vec<LabeledPoint>,
    weights: Vec<f64>,
    readout: Vec<f64>,
    train_w: bool,
    train_t: bool,
    train_readout: bool,
    t_lr_scale: f64,
}

impl ClassifierProblem {
    pub fn new(
        spec: &ModelSpec,
        weights: Vec<f64>,
        readout: Vec<f64>,
        points: &[LabeledPoint],
        solver: SolverConfig,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let field = spec.build_field()?;
        check_len("model parameters", field.param_count(), weights.len())?;
        check_len("readout", spec.state_dim() + 1, readout.len())?;
        if spec.train_tau || cfg.trainable.tau {
            return Err(NddeError::Config(
                "classification keeps T = n tau; train T instead of tau".into(),
            ));
        }
        for p in points {
            check_len("input point", spec.data_dim(), p.x.len())?;
            if p.label != 1.0 && p.label != -1.0 {
                return Err(NddeError::Input(format!("labels must be +1 or -1, got {}", p.label)));
            }
        }
        Ok(Self {
            spec: spec.clone(),
            field,
            solver,
            points: points.to_vec(),
            weights,
            readout,
            train_w: cfg.trainable.weights,
            train_t: cfg.trainable.t || spec.train_t,
            train_readout: cfg.trainable.readout,
            t_lr_scale: cfg.t_lr_scale,
        })
    }

    pub fn initial_theta(&self) -> Vec<f64> {
        let mut theta = Vec::new();
        if self.train_w {
            theta.extend_from_slice(&self.weights);
        }
        if self.train_t {
            theta.push(self.spec.terminal_time());
        }
        if self.train_readout {
            theta.extend_from_slice(&self.readout);
        }
        theta
    }

    /// `(weights, T, readout)` encoded by `theta`.
    pub fn decode<'a>(&'a self, theta: &'a [f64]) -> (&'a [f64], f64, &'a [f64]) {
        let mut at = 0;
        let w = if self.train_w {
            at = self.weights.len();
            &theta[..at]
        } else {
            &self.weights
        };
        let t_end = if self.train_t {
            at += 1;
            theta[at - 1]
        } else {
            self.spec.terminal_time()
        };
        let r = if self.train_readout {
            &theta[at..]
        } else {
            &self.readout
        };
        (w, t_end, r)
    }

    fn solve(&self, w: &[f64], t_end: f64, x: &[f64]) -> Result<Trajectory> {
        if !(t_end > 0.0) {
            return Err(NddeError::Numerical(format!("terminal time {t_end} is not positive")));
        }
        let h0 = augment_state(x, self.spec.augment);
        let n = self.spec.n_segments;
        if self.spec.is_node() {
            integrate_node(self.field.as_ref(), w, &h0, 0.0, t_end, n * self.solver.steps_per_segment)
        } else {
            let hist = HistoryFunction::constant(h0)?;
            integrate_ndde(self.field.as_ref(), w, &hist, t_end / n as f64, n, &self.solver)
        }
    }

    /// `h(T)` for input `x`.
    pub fn features(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let (w, t_end, _) = self.decode(theta);
        Ok(self.solve(w, t_end, x)?.terminal_state().to_vec())
    }

    /// Readout logit `z = r . h(T) + b`.
    pub fn logit(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        let (_, _, r) = self.decode(theta);
        let h = self.features(theta, x)?;
        let dd = h.len();
        Ok(dot(&r[..dd], &h) + r[dd])
    }

    /// Fraction of `points` whose logit has the sign of the label.
    pub fn accuracy(&self, theta: &[f64], points: &[LabeledPoint]) -> Result<f64> {
        let mut correct = 0usize;
        for p in points {
            if self.logit(theta, &p.x)? * p.label > 0.0 {
                correct += 1;
            }
        }
        Ok(correct as f64 / points.len().max(1) as f64)
    }
}

impl Objective for ClassifierProblem {
    fn len(&self) -> usize {
        self.points.len()
    }

    fn theta_len(&self) -> usize {
        (if self.train_w { self.weights.len() } else { 0 })
            + usize::from(self.train_t)
            + if self.train_readout { self.readout.len() } else { 0 }
    }

    fn evaluate(&self, theta: &[f64], item: usize, grad: Option<&mut [f64]>) -> Result<ItemEval> {
        let (w, t_end, r) = self.decode(theta);
        let p = &self.points[item];
        let traj = self.solve(w, t_end, &p.x)?;
        let h = traj.terminal_state();
        let dd = h.len();
        let z = dot(&r[..dd], h) + r[dd];
        let y = p.label;
        let eval = ItemEval {
            loss: softplus(-y * z),
            nfe: traj.stage_evaluations() as u64,
        };
        let Some(grad) = grad else {
            return Ok(eval);
        };
        let dz = -y * sigmoid(-y * z);
        let mut at = 0;
        if self.train_w || self.train_t {
            let cot: Vec<f64> = r[..dd].iter().map(|ri| dz * ri).collect();
            let lg = ObservationLossGrads::single(t_end, cot)?;
            let (gw, gt) = if self.spec.is_node() {
                let g = node_adjoint_backward(self.field.as_ref(), w, &traj, &lg)?;
                (g.grad_w, g.grad_t)
            } else {
                let hist = HistoryFunction::constant(augment_state(&p.x, self.spec.augment))?;
                let g = adjoint_backward(self.field.as_ref(), w, &traj, &hist, &lg, &self.solver)?;
                (g.grad_w, g.grad_t + g.grad_tau / self.spec.n_segments as f64)
            };
            if self.train_w {
                grad[..gw.len()].copy_from_slice(&gw);
                at = gw.len();
            }
            if self.train_t {
                grad[at] = gt;
                at += 1;
            }
        }
        if self.train_readout {
            for (g, hv) in grad[at..at + dd].iter_mut().zip(h) {
                *g = dz * hv;
            }
            grad[at + dd] = dz;
        }
        Ok(eval)
    }

    fn lr_scale(&self) -> Option<Vec<f64>> {
        if !self.train_t || self.t_lr_scale == 1.0 {
            return None;
        }
        let mut s = vec![1.0; self.theta_len()];
        s[if self.train_w { self.weights.len() } else { 0 }] = self.t_lr_scale;
        Some(s)
    }

    fn tau(&self, theta: &[f64]) -> Option<f64> {
        (!self.spec.is_node()).then(|| self.decode(theta).1 / self.spec.n_segments as f64)
    }
}

pub fn train_classifier(
    spec: &ModelSpec,
    weights: Vec<f64>,
    readout: Vec<f64>,
    points: &[LabeledPoint],
    solver: SolverConfig,
    cfg: &TrainConfig,
) -> Result<(TrainRecord, ClassifierProblem)> {
    let problem = ClassifierProblem::new(spec, weights, readout, points, solver, cfg)?;
    let theta0 = problem.initial_theta();
    let record = train(&problem, None, theta0, cfg)?;
    Ok((record, problem))
}
