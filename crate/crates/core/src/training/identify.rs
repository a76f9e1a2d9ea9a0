use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::engine::train;
use super::record::TrainRecord;
use super::regression::{RegressionProblem, Series, Tracked, TrackedSource};
use crate::error::{check_len, NddeError, Result};
use crate::models::{FieldKind, HistoryKind, ModelSpec};
use crate::solver::SolverConfig;

/// Known-structure identification target: true parameter values are only used
/// to build the initial guess `(1 + DL) p` and to normalize the report.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentificationTarget {
    pub names: Vec<String>,
    pub truth: Vec<f64>,
    pub true_tau: f64,
}

impl IdentificationTarget {
    /// `beta, n, gamma` with delay `tau`.
    pub fn mackey_glass(beta: f64, n: f64, gamma: f64, tau: f64) -> Self {
        Self {
            names: vec!["beta".into(), "n".into(), "gamma".into()],
            truth: vec![beta, n, gamma],
            true_tau: tau,
        }
    }

    fn tracked(&self) -> Vec<Tracked> {
        let mut t: Vec<Tracked> = self
            .names
            .iter()
            .zip(&self.truth)
            .enumerate()
            .map(|(k, (name, v))| Tracked {
                name: name.clone(),
                source: TrackedSource::Param(k),
                normalizer: *v,
            })
            .collect();
        t.push(Tracked {
            name: "tau".into(),
            source: TrackedSource::Tau,
            normalizer: self.true_tau,
        });
        t
    }
}

/// Jointly fits the analytic parameters and the delay of `spec` from the
/// deviated start `(1 + deviation) p_true`. Parameters are optimized relative
/// to their initial values, so one learning rate suits all of them. Tracked
/// outputs are `p / p_true` for every parameter and `tau / tau_true`.
pub fn identify_parameters(
    spec: &ModelSpec,
    target: &IdentificationTarget,
    deviation: f64,
    series: &[Series],
    solver: SolverConfig,
    cfg: &TrainConfig,
) -> Result<(TrainRecord, RegressionProblem)> {
    if !(deviation > -1.0) {
        return Err(NddeError::Input(format!("deviation must exceed -1, got {deviation}")));
    }
    if matches!(spec.field, FieldKind::NeuralNdde { .. } | FieldKind::NeuralNode { .. }) {
        return Err(NddeError::Input("identification needs an analytic field".into()));
    }
    check_len("true parameters", target.names.len(), target.truth.len())?;
    let init: Vec<f64> = target.truth.iter().map(|p| (1.0 + deviation) * p).collect();
    let tau0 = (1.0 + deviation) * target.true_tau;
    let mut spec = spec.clone();
    spec.tau = tau0;
    spec.train_tau = true;
    spec.tau = spec.tau.clamp(spec.tau_min, spec.tau_max);
    let problem = RegressionProblem::new(&spec, init.clone(), series, solver, cfg)?
        .with_scaling(init, tau0)?
        .with_tracked(target.tracked());
    let theta0 = problem.initial_theta();
    let record = train(&problem, None, theta0, cfg)?;
    Ok((record, problem))
}

/// Model-free delay inference: a neural NDDE with tanh hidden layers of the
/// given widths and a trainable delay started at `(1 + deviation) tau_true`,
/// fitted to windows with spline histories. The tracked output is
/// `tau / tau_true`.
pub fn infer_delay_model_free(
    hidden: &[usize],
    dim: usize,
    tau_true: f64,
    deviation: f64,
    tau_bounds: (f64, f64),
    series: &[Series],
    solver: SolverConfig,
    cfg: &TrainConfig,
) -> Result<(TrainRecord, RegressionProblem)> {
    let mut spec = ModelSpec::new(
        FieldKind::NeuralNdde {
            dim,
            hidden: hidden.to_vec(),
        },
        (1.0 + deviation) * tau_true,
        1,
    );
    spec.history = HistoryKind::Spline;
    spec.train_tau = true;
    spec.tau_min = tau_bounds.0;
    spec.tau_max = tau_bounds.1;
    spec.tau = spec.tau.clamp(spec.tau_min, spec.tau_max);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let weights = spec.init_params(&mut rng)?;
    let tracked = vec![Tracked {
        name: "tau".into(),
        source: TrackedSource::Tau,
        normalizer: tau_true,
    }];
    let problem =
        RegressionProblem::new(&spec, weights, series, solver, cfg)?.with_tracked(tracked);
    let theta0 = problem.initial_theta();
    let record = train(&problem, None, theta0, cfg)?;
    Ok((record, problem))
}
