use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{NddeError, Result};
use crate::models::{
    build_annulus_separator, build_universal_representation, FieldKind, HistoryKind, ModelSpec,
    Population, ScalarDelay, VectorField,
};
use crate::numerics::{mlp_forward, MlpLayout};
use crate::solver::{integrate_ndde, HistoryFunction, SolverConfig};

fn sample_ndde(
    field: &dyn VectorField,
    p: &[f64],
    history: &HistoryFunction,
    tau: f64,
    t_end: f64,
    dt: f64,
    steps: usize,
) -> Vec<(f64, Vec<f64>)> {
    let n = ((t_end / tau) - 1e-9).ceil() as usize;
    let traj = integrate_ndde(field, p, history, tau, n, &SolverConfig::new(steps).unwrap()).unwrap();
    let k = (t_end / dt).round() as usize;
    (0..=k)
        .map(|j| {
            let t = j as f64 * dt;
            (t, traj.dense_eval(t).unwrap())
        })
        .collect()
}

/// Central differences of `Objective::evaluate` in every coordinate of theta.
fn objective_fd_check<O: Objective>(obj: &O, theta: &[f64], item: usize, eps: f64, tol: f64) {
    let mut g = vec![0.0; theta.len()];
    obj.evaluate(theta, item, Some(&mut g)).unwrap();
    for k in 0..theta.len() {
        let mut a = theta.to_vec();
        let mut b = theta.to_vec();
        a[k] += eps;
        b[k] -= eps;
        let fa = obj.evaluate(&a, item, None).unwrap().loss;
        let fb = obj.evaluate(&b, item, None).unwrap().loss;
        let num = (fa - fb) / (2.0 * eps);
        let err = (g[k] - num).abs() / num.abs().max(1e-6);
        assert!(
            err < tol || (g[k] - num).abs() < 1e-9,
            "coordinate {k}: analytic {} vs fd {num}",
            g[k]
        );
    }
}

fn spiral_like_series(seed: u64, t_end: f64) -> Vec<Series> {
    let a = crate::models::LinearTanh::default_spiral_matrix();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
    let hist = HistoryFunction::constant(x0).unwrap();
    let data = sample_ndde(&crate::models::LinearTanh::new(2), &a, &hist, 1.0, t_end, 0.25, 200);
    vec![Series::from_trajectory(&data).unwrap()]
}

#[test]
fn windows_shift_and_cover() {
    let samples: Vec<(f64, Vec<f64>)> = (0..=40).map(|j| (j as f64 * 0.25, vec![j as f64])).collect();
    let w = windows(&samples, 2.0, 1.0, 1.5).unwrap();
    assert_eq!(w.len(), 5);
    let first = &w[0];
    assert_eq!(first.history.first().unwrap().0, -2.0);
    assert_eq!(first.history.last().unwrap(), &(0.0, vec![8.0]));
    assert_eq!(first.observations.len(), 4);
    assert_eq!(first.observations[3].time, 1.0);
    assert_eq!(first.observations[3].target, vec![12.0]);
    assert!(windows(&samples, 1.0, 0.0, 1.0).is_err());
}

#[test]
fn regression_gradients_match_finite_differences() {
    let series = spiral_like_series(4, 2.6);
    let mut spec = ModelSpec::new(FieldKind::NeuralNdde { dim: 2, hidden: vec![6] }, 0.9, 1);
    spec.tau_min = 0.1;
    spec.tau_max = 3.0;
    let mut cfg = TrainConfig::adam(1e-3, 1);
    cfg.trainable.tau = true;
    cfg.trainable.h0 = true;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = spec.init_params(&mut rng).unwrap();
    let problem = RegressionProblem::new(&spec, w, &series, SolverConfig::new(200).unwrap(), &cfg).unwrap();
    let theta = problem.initial_theta();
    assert_eq!(theta.len(), problem.theta_len());
    objective_fd_check(&problem, &theta, 0, 1e-6, 1e-4);
}

#[test]
fn spline_history_regression_gradients() {
    let a = crate::models::LinearTanh::default_spiral_matrix();
    let hist = HistoryFunction::constant(vec![0.3, -0.2]).unwrap();
    let data = sample_ndde(&crate::models::LinearTanh::new(2), &a, &hist, 1.0, 8.0, 0.1, 200);
    let series = windows(&data, 2.0, 1.5, 2.0).unwrap();
    let mut spec = ModelSpec::new(FieldKind::LinearTanh { dim: 2 }, 1.3, 1);
    spec.history = HistoryKind::Spline;
    spec.train_tau = true;
    spec.tau_min = 0.2;
    spec.tau_max = 2.0;
    let cfg = TrainConfig::adam(1e-2, 1);
    let problem =
        RegressionProblem::new(&spec, vec![-0.2, 1.5, -1.8, 0.1], &series, SolverConfig::new(200).unwrap(), &cfg)
            .unwrap()
            .with_scaling(vec![2.0, 1.0, 1.0, 0.5], 1.3)
            .unwrap();
    let theta = problem.initial_theta();
    for item in 0..2 {
        objective_fd_check(&problem, &theta, item, 1e-6, 1e-4);
    }
}

#[test]
fn node_regression_gradients() {
    let series = spiral_like_series(9, 2.0);
    let mut spec = ModelSpec::new(FieldKind::NeuralNode { dim: 2, hidden: vec![5] }, 1.0, 1);
    spec.augment = 1;
    let mut cfg = TrainConfig::adam(1e-3, 1);
    cfg.trainable.h0 = true;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = spec.init_params(&mut rng).unwrap();
    let problem = RegressionProblem::new(&spec, w, &series, SolverConfig::new(50).unwrap(), &cfg).unwrap();
    objective_fd_check(&problem, &problem.initial_theta(), 0, 1e-6, 1e-5);
}

#[test]
fn classifier_gradients_match_finite_differences() {
    let pts = concentric_dataset(1.0, 2.0, 3.0, 2, 3, 1).unwrap();
    for kind in [
        FieldKind::NeuralNdde { dim: 2, hidden: vec![5] },
        FieldKind::NeuralNode { dim: 2, hidden: vec![5] },
    ] {
        let mut spec = ModelSpec::new(kind, 0.6, 2);
        spec.augment = 1;
        let mut cfg = TrainConfig::adam(1e-3, 1);
        cfg.trainable.t = true;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = spec.init_params(&mut rng).unwrap();
        let problem =
            ClassifierProblem::new(&spec, w, vec![0.7, -0.4, 0.3, 0.1], &pts, SolverConfig::new(100).unwrap(), &cfg)
                .unwrap();
        let theta = problem.initial_theta();
        for item in 0..pts.len() {
            objective_fd_check(&problem, &theta, item, 1e-6, 1e-5);
        }
    }
}

#[test]
fn classifier_rejects_bad_inputs() {
    let spec = ModelSpec::new(FieldKind::AnnulusSeparator { dim: 2 }, 10.0, 1);
    let cfg = TrainConfig::adam(1e-2, 1);
    let bad = vec![LabeledPoint { x: vec![0.0, 0.0], label: 0.5 }];
    assert!(ClassifierProblem::new(&spec, vec![1.5], vec![0.0; 3], &bad, SolverConfig::default(), &cfg).is_err());
    let mut cfg = cfg;
    cfg.trainable.tau = true;
    let pts = concentric_dataset(1.0, 2.0, 3.0, 2, 2, 0).unwrap();
    let err = ClassifierProblem::new(&spec, vec![1.5], vec![0.0; 3], &pts, SolverConfig::default(), &cfg);
    assert!(matches!(err, Err(NddeError::Config(_))));
}

#[test]
fn frozen_separator_with_trained_readout_is_perfect() {
    let a = build_annulus_separator(1.0, 2.0, 3.0, 2).unwrap();
    let spec = ModelSpec::new(FieldKind::AnnulusSeparator { dim: 2 }, a.tau, 1);
    let pts = concentric_dataset(1.0, 2.0, 3.0, 2, 200, 8).unwrap();
    let mut cfg = TrainConfig::adam(5e-2, 60);
    cfg.trainable.weights = false;
    let (rec, problem) =
        train_classifier(&spec, a.params.clone(), vec![0.0; 3], &pts, SolverConfig::new(4).unwrap(), &cfg)
            .unwrap();
    assert!(rec.completed());
    assert_eq!(problem.accuracy(&rec.final_theta, &pts).unwrap(), 1.0);
    assert_eq!(rec.final_theta.len(), 3);
}

fn scalar_delay_series() -> (Vec<Series>, SolverConfig) {
    let solver = SolverConfig::new(20).unwrap();
    let hist = HistoryFunction::constant(vec![1.0]).unwrap();
    let traj = integrate_ndde(&ScalarDelay::default(), &[-2.0], &hist, 1.0, 3, &solver).unwrap();
    let obs: Vec<(f64, Vec<f64>)> = (0..=30).map(|j| (j as f64 * 0.1, traj.dense_eval(j as f64 * 0.1).unwrap())).collect();
    (vec![Series::from_trajectory(&obs).unwrap()], solver)
}

#[test]
fn self_consistent_start_is_a_fixed_point() {
    let (series, solver) = scalar_delay_series();
    let mut spec = ModelSpec::new(FieldKind::ScalarDelay { dim: 1 }, 1.0, 1);
    spec.tau_min = 0.1;
    spec.tau_max = 2.0;
    let mut cfg = TrainConfig::adam(1e-2, 50);
    cfg.trainable.tau = true;
    let rec = train_regression(&spec, vec![-2.0], &series, None, solver, &cfg).unwrap();
    assert!(rec.epochs[0].train_loss < 1e-10, "{}", rec.epochs[0].train_loss);
    assert!(rec.losses().iter().all(|&l| l <= 1e-8), "{:?}", rec.losses());
    assert_eq!(rec.epochs.len(), 51);
}

#[test]
fn identification_at_zero_deviation_stays_put() {
    let solver = SolverConfig::new(50).unwrap();
    let hist = HistoryFunction::constant(vec![0.4]).unwrap();
    let traj = integrate_ndde(&Population, &[1.8], &hist, 1.0, 6, &solver).unwrap();
    let obs: Vec<(f64, Vec<f64>)> = (0..=30).map(|j| (j as f64 * 0.2, traj.dense_eval(j as f64 * 0.2).unwrap())).collect();
    let series = vec![Series::from_trajectory(&obs).unwrap()];
    let mut spec = ModelSpec::new(FieldKind::Population, 1.0, 1);
    spec.tau_min = 0.2;
    spec.tau_max = 3.0;
    let target = IdentificationTarget {
        names: vec!["r".into()],
        truth: vec![1.8],
        true_tau: 1.0,
    };
    let (rec, _) = identify_parameters(&spec, &target, 0.0, &series, solver, &TrainConfig::adam(1e-2, 30)).unwrap();
    for e in &rec.epochs {
        for (_, v) in &e.tracked {
            assert!((v - 1.0).abs() < 1e-6, "{v}");
        }
    }
    assert!(identify_parameters(&spec, &target, -1.0, &series, solver, &TrainConfig::adam(1e-2, 1)).is_err());
}

#[test]
fn identification_recovers_population_parameters() {
    let solver = SolverConfig::new(50).unwrap();
    let hist = HistoryFunction::constant(vec![0.4]).unwrap();
    let data = sample_ndde(&Population, &[1.8], &hist, 1.0, 8.0, 0.1, 500);
    let series = vec![Series::from_trajectory(&data).unwrap()];
    let mut spec = ModelSpec::new(FieldKind::Population, 1.0, 1);
    spec.tau_min = 0.2;
    spec.tau_max = 3.0;
    let target = IdentificationTarget {
        names: vec!["r".into()],
        truth: vec![1.8],
        true_tau: 1.0,
    };
    let (rec, _) = identify_parameters(&spec, &target, 0.2, &series, solver, &TrainConfig::adam(1e-2, 300)).unwrap();
    assert!(rec.completed());
    assert!((rec.final_tracked("r").unwrap() - 1.0).abs() < 0.01, "{:?}", rec.epochs.last());
    assert!((rec.final_tracked("tau").unwrap() - 1.0).abs() < 0.01);
}

#[test]
fn small_learning_rate_decreases_loss() {
    let series = spiral_like_series(1, 3.0);
    for kind in [
        FieldKind::NeuralNdde { dim: 2, hidden: vec![8] },
        FieldKind::NeuralNode { dim: 2, hidden: vec![8] },
    ] {
        let spec = ModelSpec::new(kind, 1.0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = spec.init_params(&mut rng).unwrap();
        let rec = train_regression(&spec, w, &series, None, SolverConfig::new(10).unwrap(), &TrainConfig::adam(1e-4, 1))
            .unwrap();
        assert!(rec.epochs[1].train_loss < rec.epochs[0].train_loss);
    }
    let pts = concentric_dataset(1.0, 2.0, 3.0, 2, 20, 3).unwrap();
    let spec = ModelSpec::new(FieldKind::NeuralNdde { dim: 2, hidden: vec![8] }, 1.0, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = spec.init_params(&mut rng).unwrap();
    let (rec, _) =
        train_classifier(&spec, w, vec![0.3, -0.2, 0.1], &pts, SolverConfig::new(10).unwrap(), &TrainConfig::adam(1e-4, 1))
            .unwrap();
    assert!(rec.epochs[1].train_loss < rec.epochs[0].train_loss);
}

#[test]
fn training_is_deterministic() {
    let pts = concentric_dataset(1.0, 2.0, 3.0, 2, 16, 3).unwrap();
    let spec = ModelSpec::new(FieldKind::NeuralNdde { dim: 2, hidden: vec![6] }, 1.0, 1);
    let run = |threads| {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w = spec.init_params(&mut rng).unwrap();
        let mut cfg = TrainConfig::adam(1e-2, 5);
        cfg.batch_size = 7;
        cfg.seed = 9;
        cfg.threads = Some(threads);
        train_classifier(&spec, w, vec![0.1, 0.1, 0.0], &pts, SolverConfig::new(8).unwrap(), &cfg)
            .unwrap()
            .0
    };
    let a = run(1);
    let b = run(1);
    let c = run(3);
    assert_eq!(a.losses(), b.losses());
    assert_eq!(a.final_theta, b.final_theta);
    assert_eq!(a.losses(), c.losses());
    let mut ja = Vec::new();
    let mut jb = Vec::new();
    a.write_jsonl(&mut ja).unwrap();
    b.write_jsonl(&mut jb).unwrap();
    assert_eq!(ja, jb);
}

struct Counting<F> {
    inner: F,
    evals: AtomicUsize,
}

impl<F: VectorField> VectorField for Counting<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }
    fn eval(&self, p: &[f64], h: &[f64], hd: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        self.evals.fetch_add(1, Ordering::Relaxed);
        self.inner.eval(p, h, hd, t, out)
    }
    fn vjp(
        &self,
        p: &[f64],
        h: &[f64],
        hd: &[f64],
        t: f64,
        c: &[f64],
        gh: &mut [f64],
        ghd: &mut [f64],
        gp: &mut [f64],
    ) -> Result<()> {
        self.inner.vjp(p, h, hd, t, c, gh, ghd, gp)
    }
    fn name(&self) -> &'static str {
        "counting"
    }
}

#[test]
fn nfe_accounting_matches_instrumented_field() {
    let (series, _) = scalar_delay_series();
    let m = 12;
    let solver = SolverConfig::new(m).unwrap();
    let mut spec = ModelSpec::new(FieldKind::ScalarDelay { dim: 1 }, 0.7, 1);
    spec.tau_min = 0.1;
    spec.tau_max = 2.0;
    let cfg = TrainConfig::adam(1e-2, 3);
    let counting = Arc::new(Counting {
        inner: ScalarDelay::default(),
        evals: AtomicUsize::new(0),
    });
    let problem = RegressionProblem::new(&spec, vec![-1.5], &series, solver, &cfg)
        .unwrap()
        .with_field(counting.clone())
        .unwrap();
    let (_, nfe) = evaluate_loss(&problem, &problem.initial_theta()).unwrap();
    let n = (3.0f64 / 0.7).ceil() as u64;
    assert_eq!(nfe, 4 * m as u64 * n);
    assert_eq!(counting.evals.load(Ordering::Relaxed) as u64, nfe + 1);

    let rec = train(&problem, None, problem.initial_theta(), &cfg).unwrap();
    assert_eq!(rec.forward_solves, 4);
    assert_eq!(rec.total_nfe(), 4 * m as u64 * n * rec.forward_solves);
    let per_epoch: Vec<u64> = rec.epochs.iter().map(|e| e.nfe).collect();
    let unit = 4 * m as u64 * n;
    assert_eq!(per_epoch, vec![unit, 2 * unit, 3 * unit, 4 * unit]);
}

/// Fails once the single coordinate leaves `(-limit, limit)`.
struct Cliff {
    limit: f64,
}

impl Objective for Cliff {
    fn len(&self) -> usize {
        1
    }
    fn theta_len(&self) -> usize {
        1
    }
    fn evaluate(&self, theta: &[f64], _item: usize, grad: Option<&mut [f64]>) -> Result<ItemEval> {
        if theta[0].abs() >= self.limit {
            return Err(NddeError::Divergence {
                t: 0.0,
                detail: "left the basin".into(),
            });
        }
        if let Some(g) = grad {
            g[0] = -1.0;
        }
        Ok(ItemEval {
            loss: -theta[0],
            nfe: 0,
        })
    }
}

#[test]
fn divergence_rolls_back_and_halves_the_learning_rate() {
    let mut cfg = TrainConfig::adam(1.0, 6);
    cfg.optimizer = Optimizer::Sgd { lr: 1.0 };
    let rec = train(&Cliff { limit: 0.01 }, None, vec![0.0], &cfg).unwrap();
    assert!(matches!(rec.status, TrainStatus::Diverged { epoch: 1, .. }), "{:?}", rec.status);
    let halvings: Vec<f64> = rec
        .events
        .iter()
        .filter_map(|e| match e {
            TrainEvent::Divergence { new_lr, .. } => Some(*new_lr),
            _ => None,
        })
        .collect();
    assert_eq!(halvings, [0.5, 0.25, 0.125, 0.0625, 0.03125]);
    assert_eq!(rec.final_theta, vec![0.0]);
    assert_eq!(rec.epochs.len(), 1);

    let cfg = {
        let mut c = TrainConfig::adam(1.0, 3);
        c.optimizer = Optimizer::Sgd { lr: 1.0 };
        c
    };
    let rec = train(&Cliff { limit: 1.6 }, None, vec![0.0], &cfg).unwrap();
    assert!(rec.completed(), "{:?}", rec.status);
    assert_eq!(rec.events.len(), 2);
    assert!(rec.final_theta[0] < 1.6);
    assert!(rec.epochs.iter().all(|e| e.train_loss.is_finite()));

    let rec = train(&Cliff { limit: 0.0 }, None, vec![0.0], &cfg).unwrap();
    assert!(matches!(rec.status, TrainStatus::Diverged { epoch: 0, .. }));
    assert!(rec.epochs.is_empty());
}

#[test]
fn tau_projection_is_recorded() {
    let (series, solver) = scalar_delay_series();
    let mut spec = ModelSpec::new(FieldKind::ScalarDelay { dim: 1 }, 0.6, 1);
    spec.tau_min = 0.3;
    spec.tau_max = 0.75;
    let mut cfg = TrainConfig::adam(0.1, 3);
    cfg.trainable.tau = true;
    cfg.trainable.weights = false;
    let rec = train_regression(&spec, vec![-2.0], &series, None, solver, &cfg).unwrap();
    let taus: Vec<f64> = rec.epochs.iter().filter_map(|e| e.tau).collect();
    assert!(taus.iter().all(|&t| (0.3..=0.75).contains(&t)));
    assert!(rec.events.iter().any(|e| matches!(e, TrainEvent::TauProjected { .. })));
}

#[test]
fn jsonl_lines_carry_epoch_metrics() {
    let (series, solver) = scalar_delay_series();
    let spec = ModelSpec::new(FieldKind::ScalarDelay { dim: 1 }, 1.0, 1);
    let rec = train_regression(&spec, vec![-1.0], &series, Some(&series), solver, &TrainConfig::adam(1e-2, 2))
        .unwrap();
    let mut buf = Vec::new();
    rec.write_jsonl(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    for (k, l) in lines.iter().enumerate() {
        assert_eq!(l["epoch"], k);
        assert!(l["train_loss"].is_f64());
        assert!(l["test_loss"].is_f64());
        assert_eq!(l["tau"], 1.0);
        assert!(l.get("wall_time_s").is_none());
    }
}

#[test]
fn universal_representation_of_a_trained_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let rot = |x: &[f64]| vec![-x[1], x[0]];
    let inputs: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    // G = (R x - x) / T with T = 1.
    let targets: Vec<Vec<f64>> = inputs.iter().map(|x| {
        let r = rot(x);
        vec![r[0] - x[0], r[1] - x[1]]
    }).collect();
    let layout = MlpLayout::tanh_hidden(&[2, 16, 2]).unwrap();
    let init = layout.init_uniform(&mut rng);
    let mut cfg = TrainConfig::adam(1e-2, 600);
    cfg.batch_size = 50;
    let (g, rec) = fit_mlp(&init, inputs, targets, &cfg).unwrap();
    assert!(rec.final_loss() < 1e-3, "{}", rec.final_loss());
    let rep = build_universal_representation(&g, 1.0).unwrap();
    let solver = SolverConfig::new(5).unwrap();
    let test: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let mut net_err: f64 = 0.0;
    let mut rep_err: f64 = 0.0;
    for x in &test {
        let gx = mlp_forward(&g, x).unwrap();
        let r = rot(x);
        let e = ((x[0] + gx.as_slice()[0] - r[0]).powi(2) + (x[1] + gx.as_slice()[1] - r[1]).powi(2)).sqrt();
        net_err = net_err.max(e);
        let y = rep.apply(x, &solver).unwrap();
        rep_err = rep_err.max(((y[0] - r[0]).powi(2) + (y[1] - r[1]).powi(2)).sqrt());
    }
    assert!(rep_err < 2.0 * net_err, "{rep_err} vs {net_err}");
}
