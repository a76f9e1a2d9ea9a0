use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::NddeError;
use crate::numerics::{Activation, MlpLayout, RealMatrix};
use crate::solver::{integrate_ndde, HistoryFunction, SolverConfig};

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Checks all three VJP outputs against central differences of `c . f`.
fn check_vjp_fd(field: &dyn VectorField, p: &[f64], h: &[f64], hd: &[f64], t: f64, c: &[f64]) {
    let d = field.dim();
    let vjp = field_vjp(field, p, h, hd, t, c).unwrap();
    let obj = |p: &[f64], h: &[f64], hd: &[f64]| -> f64 {
        let f = field_eval(field, p, h, hd, t).unwrap();
        f.iter().zip(c).map(|(a, b)| a * b).sum()
    };
    let eps = 1e-6;
    let cmp = |name: &str, i: usize, analytic: f64, numeric: f64| {
        let err = (analytic - numeric).abs() / numeric.abs().max(1e-3);
        assert!(
            err < 1e-6,
            "{} {name}[{i}]: analytic {analytic} vs fd {numeric}",
            field.name()
        );
    };
    for i in 0..d {
        let (mut a, mut b) = (h.to_vec(), h.to_vec());
        a[i] += eps;
        b[i] -= eps;
        cmp("grad_h", i, vjp.grad_h[i], (obj(p, &a, hd) - obj(p, &b, hd)) / (2.0 * eps));
        let (mut a, mut b) = (hd.to_vec(), hd.to_vec());
        a[i] += eps;
        b[i] -= eps;
        cmp("grad_hd", i, vjp.grad_h_delayed[i], (obj(p, h, &a) - obj(p, h, &b)) / (2.0 * eps));
    }
    for i in 0..p.len() {
        let (mut a, mut b) = (p.to_vec(), p.to_vec());
        a[i] += eps;
        b[i] -= eps;
        cmp("grad_w", i, vjp.grad_params[i], (obj(&a, h, hd) - obj(&b, h, hd)) / (2.0 * eps));
    }
}

#[test]
fn analytic_field_examples() {
    let f = field_eval(&ScalarDelay::default(), &[-2.0], &[0.3], &[-1.0], 0.0).unwrap();
    assert_eq!(f, vec![2.0]);
    let f = field_eval(&Population, &[1.8], &[1.0], &[1.0], 0.0).unwrap();
    assert_eq!(f, vec![0.0]);
    let f = field_eval(&MackeyGlass, &[4.0, 9.65, 2.0], &[1.0], &[1.0], 0.0).unwrap();
    assert!(f[0].abs() < 1e-15);
}

#[test]
fn mackey_glass_rejects_nonpositive_delayed_state() {
    for hd in [0.0, -0.5] {
        let err = field_eval(&MackeyGlass, &[4.0, 9.65, 2.0], &[1.0], &[hd], 0.0).unwrap_err();
        assert!(matches!(err, NddeError::Domain(_)), "{err}");
        let err = field_vjp(&MackeyGlass, &[4.0, 9.65, 2.0], &[1.0], &[hd], 0.0, &[1.0]).unwrap_err();
        assert!(matches!(err, NddeError::Domain(_)));
    }
}

#[test]
fn trivial_vjp_structure() {
    let v = field_vjp(&ScalarDelay::new(2), &[1.5], &[7.0, 8.0], &[2.0, -1.0], 0.0, &[0.5, 2.0])
        .unwrap();
    assert_eq!(v.grad_h, vec![0.0, 0.0]);
    assert_eq!(v.grad_h_delayed, vec![0.75, 3.0]);
    assert_eq!(v.grad_params, vec![2.0 * 0.5 - 2.0]);
    let v = field_vjp(&AnnulusSeparator::new(3), &[1.5], &[1.0, 2.0, 3.0], &[0.3, -0.4, 1.2], 0.0, &[
        1.0, 4.0, 5.0,
    ])
    .unwrap();
    assert_eq!(v.grad_h, vec![0.0; 3]);
}

#[test]
fn dimension_mismatch_is_an_error() {
    let err = field_eval(&LinearTanh::new(2), &[0.0; 4], &[0.0; 3], &[0.0; 2], 0.0).unwrap_err();
    assert!(matches!(err, NddeError::Dimension { .. }));
    let err = field_eval(&Population, &[1.0, 2.0], &[0.0], &[0.0], 0.0).unwrap_err();
    assert!(matches!(err, NddeError::Dimension { .. }));
}

#[test]
fn vjp_matches_finite_differences_for_every_variant() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..20 {
        let d = 1 + case % 3;
        let h = uniform(&mut rng, d, -1.5, 1.5);
        let hd = uniform(&mut rng, d, -1.5, 1.5);
        let c = uniform(&mut rng, d, -1.0, 1.0);
        let t = rng.random_range(0.0..3.0);

        let nn = NeuralNdde::new(d, &[5, 4]).unwrap();
        let p = nn.layout().init_uniform(&mut rng).flatten();
        check_vjp_fd(&nn, &p, &h, &hd, t, &c);

        let node = NeuralNode::new(d, &[6]).unwrap();
        let p = node.layout().init_uniform(&mut rng).flatten();
        check_vjp_fd(&node, &p, &h, &hd, t, &c);

        let dn = DelayedNeural::new(MlpLayout::tanh_hidden(&[d, 7, d]).unwrap()).unwrap();
        let p = dn.layout().init_uniform(&mut rng).flatten();
        check_vjp_fd(&dn, &p, &h, &hd, t, &c);

        let lt = LinearTanh::new(d);
        let p = uniform(&mut rng, d * d, -2.0, 2.0);
        check_vjp_fd(&lt, &p, &h, &hd, t, &c);

        check_vjp_fd(&ScalarDelay::new(d), &uniform(&mut rng, 1, -3.0, 3.0), &h, &hd, t, &c);
        check_vjp_fd(&AnnulusSeparator::new(d), &[rng.random_range(0.5..2.0)], &h, &hd, t, &c);

        let (x, xd) = ([h[0]], [rng.random_range(0.2..2.0)]);
        let mg = [
            rng.random_range(1.0..5.0),
            rng.random_range(1.0..10.0),
            rng.random_range(0.5..3.0),
        ];
        check_vjp_fd(&MackeyGlass, &mg, &x, &xd, t, &c[..1]);
        check_vjp_fd(&Population, &[rng.random_range(0.5..3.0)], &x, &[hd[0]], t, &c[..1]);
    }
}

#[test]
fn annulus_construction_parameters() {
    let a = build_annulus_separator(1.0, 2.0, 3.0, 2).unwrap();
    assert_eq!(a.radius(), 1.5);
    assert_eq!(a.tau, 10.0);
    assert_eq!(a.t_end, 10.0);
    assert_eq!(a.inner_bound(), -4.0);
    assert_eq!(a.outer_bound(), 2.0);
    for bad in [(2.0, 1.0, 3.0), (1.0, 3.0, 2.0), (0.0, 1.0, 2.0), (1.0, 1.0, 2.0)] {
        let err = build_annulus_separator(bad.0, bad.1, bad.2, 2).unwrap_err();
        assert!(matches!(err, NddeError::Input(_)));
    }
}

#[test]
fn annulus_point_examples() {
    let a = build_annulus_separator(1.0, 2.0, 3.0, 2).unwrap();
    let cfg = SolverConfig::default();
    let y = a.transform(&[1.0, 0.0], &cfg).unwrap();
    assert!((y[0] + 4.0).abs() < 1e-12 && y[1] == 0.0);
    // h_1 starts at x_1, so the radius-r2 point on the second axis ends at
    // 0 + 10 (2 - 1.5) and the one on the first axis at 2 + 10 (2 - 1.5).
    let y = a.transform(&[0.0, 2.0], &cfg).unwrap();
    assert!((y[0] - 5.0).abs() < 1e-12 && y[1] == 2.0);
    let y = a.transform(&[2.0, 0.0], &cfg).unwrap();
    assert!((y[0] - 7.0).abs() < 1e-12);
}

fn sample_shell(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 2] {
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let u: f64 = rng.random_range(0.0..1.0);
    let r = (lo * lo + u * (hi * hi - lo * lo)).sqrt();
    [r * theta.cos(), r * theta.sin()]
}

#[test]
fn annulus_transform_is_linearly_separable() {
    let a = build_annulus_separator(1.0, 2.0, 3.0, 2).unwrap();
    let cfg = SolverConfig::new(4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let x = sample_shell(&mut rng, 0.0, 1.0);
        let y = a.transform(&x, &cfg).unwrap();
        assert!(y[0] <= a.inner_bound() + 1e-12, "inner {x:?} -> {}", y[0]);
        let x = sample_shell(&mut rng, 2.0, 3.0);
        let y = a.transform(&x, &cfg).unwrap();
        assert!(y[0] >= a.outer_bound() - 1e-12, "outer {x:?} -> {}", y[0]);
    }
}

#[test]
fn universal_representation_negation() {
    let g = linear_residual_network(&RealMatrix::new(1, 1, vec![-1.0]).unwrap(), 1.0).unwrap();
    let rep = build_universal_representation(&g, 1.0).unwrap();
    let cfg = SolverConfig::default();
    for x in [1.0, -1.0, 0.25, 3.0] {
        let y = rep.apply(&[x], &cfg).unwrap();
        assert!((y[0] + x).abs() < 1e-12, "{x} -> {}", y[0]);
    }
}

#[test]
fn universal_representation_zero_net_is_identity() {
    let layout = MlpLayout::tanh_hidden(&[2, 8, 2]).unwrap();
    let rep = build_universal_representation(&layout.zeros(), 2.5).unwrap();
    let y = rep.apply(&[0.7, -1.1], &SolverConfig::default()).unwrap();
    assert_eq!(y, vec![0.7, -1.1]);
}

#[test]
fn universal_representation_is_x_plus_t_g() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layout = MlpLayout::tanh_hidden(&[3, 10, 3]).unwrap();
    let g = layout.init_uniform(&mut rng);
    let rep = build_universal_representation(&g, 1.7).unwrap();
    for _ in 0..5 {
        let x = uniform(&mut rng, 3, -1.0, 1.0);
        let gx = crate::numerics::mlp_forward(&g, &x).unwrap();
        let y = rep.apply(&x, &SolverConfig::new(3).unwrap()).unwrap();
        for i in 0..3 {
            assert!((y[i] - (x[i] + 1.7 * gx.as_slice()[i])).abs() < 1e-12);
        }
    }
}

#[test]
fn universal_representation_width_mismatch() {
    let layout = MlpLayout::new(vec![2, 3], vec![Activation::Tanh]).unwrap();
    let err = build_universal_representation(&layout.zeros(), 1.0).unwrap_err();
    assert!(matches!(err, NddeError::Dimension { .. }));
    let layout = MlpLayout::tanh_hidden(&[2, 2]).unwrap();
    let err = build_universal_representation(&layout.zeros(), 0.0).unwrap_err();
    assert!(matches!(err, NddeError::Input(_)));
}

#[test]
fn augment_state_examples() {
    assert_eq!(augment_state(&[1.0, 2.0], 0), vec![1.0, 2.0]);
    assert_eq!(augment_state(&[1.0, 2.0], 1), vec![1.0, 2.0, 0.0]);
    let v = augment_state(&[3.0, -4.0, 5.0], 4);
    assert_eq!(&v[..3], &[3.0, -4.0, 5.0]);
    assert_eq!(v.len(), 7);
}

#[test]
fn mackey_glass_stays_positive() {
    let h = HistoryFunction::constant(vec![0.5]).unwrap();
    let traj = integrate_ndde(&MackeyGlass, &[4.0, 9.65, 2.0], &h, 1.0, 20, &SolverConfig::default())
        .unwrap();
    assert!((0..traj.len()).all(|j| traj.state(j)[0] > 0.0));
}

#[test]
fn model_spec_builds_fields() {
    let mut spec = ModelSpec::new(FieldKind::NeuralNode { dim: 2, hidden: vec![8] }, 1.0, 3);
    spec.augment = 1;
    let f = spec.build_field().unwrap();
    assert_eq!(f.dim(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(spec.init_params(&mut rng).unwrap().len(), f.param_count());
    assert_eq!(spec.terminal_time(), 3.0);

    let spec = ModelSpec::new(FieldKind::LinearTanh { dim: 2 }, 0.5, 2);
    assert_eq!(spec.build_field().unwrap().param_count(), 4);

    let mut bad = ModelSpec::new(FieldKind::MackeyGlass, 1.0, 2);
    bad.augment = 1;
    assert!(bad.build_field().is_err());
    assert!(ModelSpec::new(FieldKind::Population, -1.0, 2).validate().is_err());
    assert!(ModelSpec::new(FieldKind::Population, 1.0, 0).validate().is_err());
}

#[test]
fn tau_projection() {
    let mut spec = ModelSpec::new(FieldKind::ScalarDelay { dim: 1 }, 1.0, 2);
    spec.train_tau = true;
    spec.tau_min = 0.1;
    spec.tau_max = 2.0;
    spec.validate().unwrap();
    let mut tau = 0.01;
    assert!(spec.project_tau(&mut tau));
    assert_eq!(tau, 0.1);
    let mut tau = 1.3;
    assert!(!spec.project_tau(&mut tau));
    spec.tau_min = 0.0;
    assert!(spec.validate().is_err());
}

proptest::proptest! {
    #[test]
    fn augment_preserves_prefix(v in proptest::collection::vec(-1e3f64..1e3, 0..6), p in 0usize..5) {
        let a = augment_state(&v, p);
        proptest::prop_assert_eq!(&a[..v.len()], &v[..]);
        proptest::prop_assert!(a[v.len()..].iter().all(|&x| x == 0.0));
    }
}
