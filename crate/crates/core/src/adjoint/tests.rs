use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::NddeError;
use crate::models::{
    field_eval, AnnulusSeparator, DelayedNeural, LinearTanh, NeuralNdde, NeuralNode, ScalarDelay,
    VectorField,
};
use crate::numerics::MlpLayout;
use crate::solver::{
    fit_natural_cubic_spline, integrate_ndde, integrate_node, HistoryFunction, SolverConfig,
};

fn cfg(m: usize) -> SolverConfig {
    SolverConfig::new(m).unwrap()
}

fn constant(v: &[f64]) -> HistoryFunction {
    HistoryFunction::constant(v.to_vec()).unwrap()
}

fn random_params(field: &dyn VectorField, rng: &mut ChaCha8Rng, scale: f64) -> Vec<f64> {
    (0..field.param_count())
        .map(|_| rng.random_range(-scale..scale))
        .collect()
}

fn fast() -> GradCheckOptions {
    GradCheckOptions {
        fd_step: 1e-5,
        oracle_steps_per_delay: 1000,
    }
}

fn assert_report(report: &GradCheckReport) {
    if let Some(c) = report.failures().first() {
        panic!(
            "{}: analytic {:.10e} vs fd {:.10e} (rel {:.2e})",
            c.name,
            c.analytic,
            c.numeric,
            c.rel_error()
        );
    }
}

/// `f = 0` for every parameter value.
struct ZeroField(usize);

impl VectorField for ZeroField {
    fn dim(&self) -> usize {
        self.0
    }
    fn param_count(&self) -> usize {
        1
    }
    fn eval(&self, _: &[f64], _: &[f64], _: &[f64], _: f64, out: &mut [f64]) -> crate::Result<()> {
        out.fill(0.0);
        Ok(())
    }
    #[allow(clippy::too_many_arguments)]
    fn vjp(
        &self,
        _: &[f64],
        _: &[f64],
        _: &[f64],
        _: f64,
        _: &[f64],
        gh: &mut [f64],
        ghd: &mut [f64],
        gp: &mut [f64],
    ) -> crate::Result<()> {
        gh.fill(0.0);
        ghd.fill(0.0);
        gp.fill(0.0);
        Ok(())
    }
    fn name(&self) -> &'static str {
        "zero"
    }
}

#[test]
fn zero_field_adjoint_is_constant() {
    let field = ZeroField(2);
    let p = [0.3];
    let phi0 = [0.4, -1.1];
    let y = [1.0, 2.0];
    let traj = integrate_ndde(&field, &p, &constant(&phi0), 0.6, 2, &cfg(10)).unwrap();
    assert_eq!(traj.terminal_state(), &phi0);
    // L = 0.5 ||h(T) - y||^2
    let cot: Vec<f64> = phi0.iter().zip(&y).map(|(a, b)| a - b).collect();
    let grads = ObservationLossGrads::single(1.2, cot.clone()).unwrap();
    let g = adjoint_backward(&field, &p, &traj, &constant(&phi0), &grads, &cfg(10)).unwrap();
    assert_eq!(g.grad_h0, cot);
    assert_eq!(g.grad_w, vec![0.0]);
    assert_eq!(g.grad_t, 0.0);
    assert_eq!(g.grad_tau, 0.0);
    let node = integrate_node(&field, &p, &phi0, 0.0, 1.2, 12).unwrap();
    let g = node_adjoint_backward(&field, &p, &node, &grads).unwrap();
    assert_eq!(g.grad_h0, cot);
    assert_eq!(g.grad_w, vec![0.0]);
}

#[test]
fn sign_flip_initial_gradient() {
    let field = ScalarDelay::new(1);
    let h = constant(&[0.7]);
    let traj = integrate_ndde(&field, &[-2.0], &h, 1.0, 1, &cfg(100)).unwrap();
    let grads = ObservationLossGrads::single(1.0, vec![1.0]).unwrap();
    let g = adjoint_backward(&field, &[-2.0], &traj, &h, &grads, &cfg(100)).unwrap();
    assert!((g.grad_h0[0] + 1.0).abs() < 1e-10, "{}", g.grad_h0[0]);
    assert!((g.adjoint_initial[0] - 1.0).abs() < 1e-14);
    assert!((g.history_sensitivity[0] + 2.0).abs() < 1e-10);
    // dL/da = d/da (x0 + a x0) = x0
    assert!((g.grad_w[0] - 0.7).abs() < 1e-10);
}

#[test]
fn neural_ndde_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let field = NeuralNdde::new(2, &[8, 8]).unwrap();
    let p = field.layout().init_uniform(&mut rng).flatten();
    let h0 = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let case = GradCheckCase {
        field: &field,
        params: p,
        history: constant(&h0),
        tau: 0.8,
        n_segments: 2,
        steps_per_segment: 100,
        loss: LossSpec::SumSquares,
        observations: vec![Observation::new(1.6, vec![0.0, 0.0])],
    };
    assert_report(&case.check(&fast()).unwrap());
}

fn spline_history(rng: &mut ChaCha8Rng, d: usize, tau: f64) -> HistoryFunction {
    let knots: Vec<(f64, Vec<f64>)> = (0..8)
        .map(|i| {
            let t = -tau - 0.3 + (tau + 0.4) * i as f64 / 7.0;
            (t, (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        })
        .collect();
    fit_natural_cubic_spline(&knots).unwrap()
}

#[test]
fn random_instances_match_finite_differences() {
    for seed in 0..6u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let d = 1 + (seed as usize % 3);
        let n = 1 + (seed as usize % 3);
        let tau = rng.random_range(0.4..1.0);
        let field = NeuralNdde::new(d, &[6]).unwrap();
        let p = field.layout().init_uniform(&mut rng).flatten();
        let history = if seed % 2 == 0 {
            constant(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
        } else {
            spline_history(&mut rng, d, tau)
        };
        let t_end = n as f64 * tau;
        let target = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let case = GradCheckCase {
            field: &field,
            params: p,
            history,
            tau,
            n_segments: n,
            steps_per_segment: 100,
            loss: LossSpec::Mse,
            observations: vec![
                Observation::new(t_end, target(&mut rng)),
                Observation::new(0.37 * t_end, target(&mut rng)),
            ],
        };
        assert_report(&case.check(&fast()).unwrap());
    }
}

#[test]
fn analytic_fields_match_finite_differences() {
    let spiral = LinearTanh::new(2);
    let case = GradCheckCase {
        field: &spiral,
        params: LinearTanh::default_spiral_matrix(),
        history: fit_natural_cubic_spline(&[
            (-1.5, vec![1.0, 0.0]),
            (-1.0, vec![0.8, 0.5]),
            (-0.5, vec![0.3, 0.9]),
            (0.0, vec![-0.2, 1.0]),
        ])
        .unwrap(),
        tau: 1.0,
        n_segments: 3,
        steps_per_segment: 100,
        loss: LossSpec::Mse,
        observations: (1..=6)
            .map(|k| Observation::new(0.5 * k as f64, vec![0.1 * k as f64, -0.2]))
            .collect(),
    };
    assert_report(&case.check(&fast()).unwrap());

    let annulus = AnnulusSeparator::new(2);
    let case = GradCheckCase {
        field: &annulus,
        params: vec![1.5],
        history: constant(&[0.6, 0.9]),
        tau: 2.0,
        n_segments: 2,
        steps_per_segment: 50,
        loss: LossSpec::LogisticReadout {
            weights: vec![0.3, -0.1],
            bias: 0.05,
        },
        observations: vec![Observation::new(4.0, vec![1.0])],
    };
    assert_report(&case.check(&fast()).unwrap());
}

#[test]
fn delay_gradient_vanishes_for_constant_history_single_segment() {
    let layout = MlpLayout::tanh_hidden(&[2, 5, 2]).unwrap();
    let field = DelayedNeural::new(layout.clone()).unwrap();
    let p = layout.init_uniform(&mut ChaCha8Rng::seed_from_u64(3)).flatten();
    let h = constant(&[0.5, -0.4]);
    let traj = integrate_ndde(&field, &p, &h, 1.3, 1, &cfg(40)).unwrap();
    let eval = loss_cotangents(&LossSpec::SumSquares, &traj, &[Observation::new(1.3, vec![0.0, 0.0])])
        .unwrap();
    let g = adjoint_backward(&field, &p, &traj, &h, &eval.cotangents, &cfg(40)).unwrap();
    assert!(g.grad_tau.abs() < 1e-10, "{}", g.grad_tau);
}

#[test]
fn terminal_time_gradient_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let field = NeuralNdde::new(3, &[7]).unwrap();
    let p = random_params(&field, &mut rng, 0.5);
    let h = constant(&[0.2, 0.1, -0.3]);
    let (tau, n, m) = (0.7, 3, 30);
    let traj = integrate_ndde(&field, &p, &h, tau, n, &cfg(m)).unwrap();
    let lam_t = vec![0.3, -1.2, 0.8];
    let grads = ObservationLossGrads::new(vec![
        (2.1, lam_t.clone()),
        (1.0, vec![1.0, 1.0, 1.0]),
    ])
    .unwrap();
    let g = adjoint_backward(&field, &p, &traj, &h, &grads, &cfg(m)).unwrap();
    let f = field_eval(&field, &p, traj.terminal_state(), traj.checkpoint(n - 1), 2.1).unwrap();
    let expected: f64 = lam_t.iter().zip(&f).map(|(a, b)| a * b).sum();
    assert_eq!(g.grad_t, expected);
}

#[test]
fn cutoff_ablation_changes_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let field = NeuralNdde::new(2, &[6]).unwrap();
    let p = field.layout().init_uniform(&mut rng).flatten();
    let h = constant(&[0.9, -0.6]);
    let traj = integrate_ndde(&field, &p, &h, 0.9, 2, &cfg(50)).unwrap();
    let eval =
        loss_cotangents(&LossSpec::SumSquares, &traj, &[Observation::new(1.8, vec![0.0, 0.0])])
            .unwrap();
    let run = |forced| {
        adjoint_backward_with(
            &field,
            &p,
            &traj,
            &h,
            &eval.cotangents,
            &cfg(50),
            &AdjointOptions {
                include_advanced_past_cutoff: forced,
                ..Default::default()
            },
        )
        .unwrap()
        .0
    };
    let (plain, forced) = (run(false), run(true));
    let diff = plain
        .grad_h0
        .iter()
        .zip(&forced.grad_h0)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff > 1e-3, "ablation barely changed grad_h0: {diff}");
    assert_ne!(plain.grad_w, forced.grad_w);
}

#[test]
fn node_reduction_on_delay_blind_fields() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let field = NeuralNode::new(2, &[8]).unwrap();
    let p = field.layout().init_uniform(&mut rng).flatten();
    let h0 = [0.7, -0.3];
    let (tau, n, m) = (0.5, 3, 20);
    let ndde = integrate_ndde(&field, &p, &constant(&h0), tau, n, &cfg(m)).unwrap();
    let node = integrate_node(&field, &p, &h0, 0.0, 1.5, n * m).unwrap();
    let obs = vec![
        Observation::new(1.5, vec![0.2, 0.1]),
        Observation::new(0.5, vec![-0.1, 0.4]),
        Observation::new(0.75, vec![0.0, 0.3]),
    ];
    let e1 = loss_cotangents(&LossSpec::Mse, &ndde, &obs).unwrap();
    let e2 = loss_cotangents(&LossSpec::Mse, &node, &obs).unwrap();
    let g1 = adjoint_backward(&field, &p, &ndde, &constant(&h0), &e1.cotangents, &cfg(m)).unwrap();
    let g2 = node_adjoint_backward(&field, &p, &node, &e2.cotangents).unwrap();
    for (a, b) in g1.grad_w.iter().zip(&g2.grad_w) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    for (a, b) in g1.adjoint_initial.iter().zip(&g2.grad_h0) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((g1.grad_t - g2.grad_t).abs() < 1e-12);
    assert_eq!(g1.grad_tau, 0.0);
}

#[test]
fn node_linear_closed_form() {
    let field = ScalarDelay::new(1);
    let traj = integrate_node(&field, &[-1.0], &[1.0], 0.0, 1.0, 200).unwrap();
    let grads = ObservationLossGrads::single(1.0, vec![1.0]).unwrap();
    let g = node_adjoint_backward(&field, &[-1.0], &traj, &grads).unwrap();
    // d/da h(1) = T h0 e^{aT} = e^-1 at a = -1.
    assert!((g.grad_w[0] - (-1.0f64).exp()).abs() < 1e-6, "{}", g.grad_w[0]);
    assert!((g.grad_h0[0] - (-1.0f64).exp()).abs() < 1e-8);
}

#[test]
fn node_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let field = NeuralNode::new(2, &[5]).unwrap();
    let p = field.layout().init_uniform(&mut rng).flatten();
    let h0 = vec![0.3, 0.8];
    let loss = |p: &[f64], h0: &[f64]| {
        let t = integrate_node(&field, p, h0, 0.0, 1.2, 1200).unwrap();
        t.terminal_state().iter().map(|v| v * v).sum::<f64>()
    };
    let traj = integrate_node(&field, &p, &h0, 0.0, 1.2, 100).unwrap();
    let cot = traj.terminal_state().iter().map(|v| 2.0 * v).collect();
    let g = node_adjoint_backward(&field, &p, &traj, &ObservationLossGrads::single(1.2, cot).unwrap())
        .unwrap();
    let fd_w = crate::numerics::finite_difference_gradient(|q| Ok(loss(q, &h0)), &p, 1e-5).unwrap();
    let fd_h = crate::numerics::finite_difference_gradient(|x| Ok(loss(&p, x)), &h0, 1e-5).unwrap();
    for (a, b) in g.grad_w.iter().zip(fd_w.iter()).chain(g.grad_h0.iter().zip(fd_h.iter())) {
        let c = ComponentCheck {
            name: String::new(),
            analytic: *a,
            numeric: *b,
        };
        assert!(c.passes(1e-4, 1e-7, 1e-3), "{a} vs {b}");
    }
}

#[test]
fn loss_cotangent_examples() {
    let traj = integrate_node(&ScalarDelay::new(1), &[0.0], &[2.0], 0.0, 1.0, 4).unwrap();
    let e = loss_cotangents(&LossSpec::Mse, &traj, &[Observation::new(1.0, vec![0.0])]).unwrap();
    assert_eq!(e.value, 4.0);
    assert_eq!(e.cotangents.entries()[0].1, vec![4.0]);
    let e = loss_cotangents(&LossSpec::Mse, &traj, &[Observation::new(1.0, vec![2.0])]).unwrap();
    assert_eq!(e.cotangents.entries()[0].1, vec![0.0]);
    let r = loss_cotangents(&LossSpec::Mse, &traj, &[Observation::new(1.5, vec![2.0])]);
    assert!(matches!(r, Err(NddeError::Domain(_))));
    let g = ObservationLossGrads::new(vec![(0.1, vec![1.0]), (0.9, vec![2.0]), (0.5, vec![3.0])])
        .unwrap();
    let times: Vec<f64> = g.entries().iter().map(|e| e.0).collect();
    assert_eq!(times, vec![0.9, 0.5, 0.1]);
}

#[test]
fn two_observations_jump_matches_fd() {
    let field = LinearTanh::new(2);
    let case = GradCheckCase {
        field: &field,
        params: vec![-0.3, 1.2, -0.9, 0.1],
        history: constant(&[0.5, 1.0]),
        tau: 1.0,
        n_segments: 1,
        steps_per_segment: 100,
        loss: LossSpec::Mse,
        observations: vec![
            Observation::new(1.0, vec![0.2, 0.0]),
            Observation::new(0.5, vec![-0.4, 0.7]),
        ],
    };
    assert_report(&case.check(&fast()).unwrap());
}

#[test]
fn observation_at_zero_feeds_initial_gradient() {
    let field = ScalarDelay::new(1);
    let h = constant(&[1.0]);
    let traj = integrate_ndde(&field, &[-2.0], &h, 1.0, 1, &cfg(10)).unwrap();
    let grads = ObservationLossGrads::new(vec![(0.0, vec![0.5]), (1.0, vec![1.0])]).unwrap();
    let g = adjoint_backward(&field, &[-2.0], &traj, &h, &grads, &cfg(10)).unwrap();
    assert!((g.adjoint_initial[0] - 1.5).abs() < 1e-14);
    assert!((g.grad_h0[0] + 0.5).abs() < 1e-12);
}

#[test]
fn derivative_along_lattice_combines_tau_and_t() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let field = NeuralNdde::new(2, &[5]).unwrap();
    let p = field.layout().init_uniform(&mut rng).flatten();
    let h = spline_history(&mut rng, 2, 0.8);
    let (n, m) = (2, 100);
    let loss = |tau: f64| {
        let t = integrate_ndde(&field, &p, &h, tau, n, &cfg(m)).unwrap();
        t.terminal_state().iter().map(|v| v * v).sum::<f64>()
    };
    let traj = integrate_ndde(&field, &p, &h, 0.8, n, &cfg(m)).unwrap();
    let cot = traj.terminal_state().iter().map(|v| 2.0 * v).collect();
    let g = adjoint_backward(&field, &p, &traj, &h, &ObservationLossGrads::single(1.6, cot).unwrap(), &cfg(m))
        .unwrap();
    let fd = (loss(0.8 + 1e-5) - loss(0.8 - 1e-5)) / 2e-5;
    let combined = g.grad_tau + n as f64 * g.grad_t;
    assert!((combined - fd).abs() < 1e-5 * fd.abs().max(1.0), "{combined} vs {fd}");
}

#[test]
fn replay_and_stored_states_agree_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let field = NeuralNdde::new(2, &[6]).unwrap();
    let p = field.layout().init_uniform(&mut rng).flatten();
    let h = spline_history(&mut rng, 2, 0.5);
    let n = 4;
    let traj = integrate_ndde(&field, &p, &h, 0.5, n, &cfg(16)).unwrap();
    let obs: Vec<Observation> = (1..=8)
        .map(|k| Observation::new(0.25 * k as f64 - 0.03, vec![0.0, 0.1]))
        .collect();
    let e = loss_cotangents(&LossSpec::Mse, &traj, &obs).unwrap();
    let run = |replay| {
        adjoint_backward_with(
            &field,
            &p,
            &traj,
            &h,
            &e.cotangents,
            &cfg(16),
            &AdjointOptions {
                replay,
                ..Default::default()
            },
        )
        .unwrap()
    };
    let (a, audit) = run(StateReplay::FromCheckpoints);
    let (b, _) = run(StateReplay::Stored);
    assert_eq!(a, b);
    assert_eq!(audit.state_checkpoints, n + 1);
    assert_eq!(audit.adjoint_checkpoints.len(), n + 1);
    assert_eq!(audit.replayed_layers, n * (n + 1) / 2);
}

#[test]
fn work_buffers_do_not_grow_with_segments() {
    let field = NeuralNdde::new(2, &[4]).unwrap();
    let p = vec![0.05; field.param_count()];
    let h = constant(&[0.3, 0.2]);
    let mut sizes = Vec::new();
    for n in 1..=8 {
        let traj = integrate_ndde(&field, &p, &h, 0.4, n, &cfg(10)).unwrap();
        let t = traj.terminal_time();
        let grads = ObservationLossGrads::single(t, vec![1.0, -1.0]).unwrap();
        let (_, audit) =
            adjoint_backward_with(&field, &p, &traj, &h, &grads, &cfg(10), &AdjointOptions::default())
                .unwrap();
        assert_eq!(audit.state_checkpoints, n + 1);
        sizes.push(audit.work_buffers.clone());
    }
    assert!(sizes.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn permuted_batch_reduction_is_stable() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let field = NeuralNdde::new(2, &[6]).unwrap();
    let p = field.layout().init_uniform(&mut rng).flatten();
    let bundles: Vec<GradientBundle> = (0..12)
        .map(|_| {
            let h = constant(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            let traj = integrate_ndde(&field, &p, &h, 0.5, 2, &cfg(20)).unwrap();
            let cot = traj.terminal_state().to_vec();
            adjoint_backward(&field, &p, &traj, &h, &ObservationLossGrads::single(1.0, cot).unwrap(), &cfg(20))
                .unwrap()
        })
        .collect();
    let sum = |order: &[usize]| {
        let mut acc = GradientBundle::zeros(2, p.len());
        for &i in order {
            acc.accumulate(&bundles[i]).unwrap();
        }
        acc
    };
    let fwd: Vec<usize> = (0..12).collect();
    let rev: Vec<usize> = (0..12).rev().collect();
    let (a, b) = (sum(&fwd), sum(&rev));
    for (x, y) in a.grad_w.iter().zip(&b.grad_w) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!((a.grad_tau - b.grad_tau).abs() < 1e-12);
}

#[test]
fn general_solver_agrees_with_lattice_solver() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let field = NeuralNdde::new(2, &[5]).unwrap();
    let p = field.layout().init_uniform(&mut rng).flatten();
    let h = spline_history(&mut rng, 2, 0.6);
    let h0 = h.initial_state().unwrap();
    let lattice = integrate_ndde(&field, &p, &h, 0.6, 3, &cfg(40)).unwrap();
    let general = integrate_general(&field, &p, &h, &h0, 0.6, 1.8, 40).unwrap();
    for (a, b) in lattice.terminal_state().iter().zip(general.terminal_state()) {
        assert!((a - b).abs() < 1e-13, "{a} vs {b}");
    }
    // A partial last segment converges to the fine-grid answer.
    let coarse = integrate_general(&field, &p, &h, &h0, 0.6, 1.45, 100).unwrap();
    let fine = integrate_general(&field, &p, &h, &h0, 0.6, 1.45, 1600).unwrap();
    for (a, b) in coarse.terminal_state().iter().zip(fine.terminal_state()) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn backward_errors() {
    let field = ScalarDelay::new(1);
    let h = constant(&[1.0]);
    let traj = integrate_ndde(&field, &[-1.0], &h, 1.0, 1, &cfg(10)).unwrap();
    let empty = ObservationLossGrads::default();
    assert!(matches!(
        adjoint_backward(&field, &[-1.0], &traj, &h, &empty, &cfg(10)),
        Err(NddeError::Input(_))
    ));
    let one = ObservationLossGrads::single(1.0, vec![1.0]).unwrap();
    assert!(matches!(
        adjoint_backward(&field, &[-1.0], &traj, &h, &one, &cfg(20)),
        Err(NddeError::State(_))
    ));
    let node = integrate_node(&field, &[-1.0], &[1.0], 0.0, 1.0, 10).unwrap();
    assert!(matches!(
        adjoint_backward(&field, &[-1.0], &node, &h, &one, &cfg(10)),
        Err(NddeError::State(_))
    ));
    assert!(matches!(
        node_adjoint_backward(&field, &[-1.0], &traj, &one),
        Err(NddeError::State(_))
    ));
    let late = ObservationLossGrads::single(2.0, vec![1.0]).unwrap();
    assert!(matches!(
        adjoint_backward(&field, &[-1.0], &traj, &h, &late, &cfg(10)),
        Err(NddeError::Domain(_))
    ));
}
