use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Params, Value};
use super::data::{generate_series, SeriesOptions, SeriesSystem};
use super::{run_params, ExperimentName, RunContext};
use crate::adjoint::{GradCheckCase, GradCheckOptions, GradCheckReport, LossSpec, Observation};
use crate::error::{NddeError, Result};
use crate::models::{
    build_annulus_separator_with_time, build_universal_representation, linear_residual_network,
    FieldKind, HistoryKind, LinearTanh, MackeyGlass, ModelSpec, NeuralNdde, Population, ScalarDelay,
    VectorField,
};
use crate::numerics::RealMatrix;
use crate::solver::{fit_natural_cubic_spline, integrate_ndde, HistoryFunction, SolverConfig};
use crate::training::{
    concentric_dataset, evaluate_loss, identify_parameters, infer_delay_model_free,
    train_classifier, train_regression, windows, IdentificationTarget,
    RegressionProblem, Series, TrainConfig, TrainRecord,
};

use Value::{Float, Floats, Int, Ints};

pub(super) fn defaults(name: ExperimentName) -> Params {
    let p = run_params(name.as_str());
    match name {
        ExperimentName::Fig2SignFlip => p
            .define("system.a", Float(-2.0))
            .define("system.tau", Float(1.0))
            .define("system.x0", Floats(vec![-1.0, 1.0]))
            .define("system.segments", Int(3))
            .define("solver.steps_per_segment", Int(100))
            .define("check.tol", Float(1e-10)),
        ExperimentName::Fig3Annulus => p
            .define("geometry.r1", Float(1.0))
            .define("geometry.r2", Float(2.0))
            .define("geometry.r3", Float(3.0))
            .define("geometry.t_end", Float(10.0))
            .define("data.per_class", Int(1000))
            .define("solver.steps_per_segment", Int(4))
            .define("check.tol", Float(1e-8)),
        ExperimentName::Fig4Concentric => p
            .define("data.r1", Float(1.0))
            .define("data.r2", Float(2.0))
            .define("data.r3", Float(3.0))
            .define("data.per_class", Int(1000))
            .define("model.hidden", Ints(vec![16, 16]))
            .define("model.t_end", Float(1.0))
            .define("model.segments", Int(1))
            .define("model.readout_init", Floats(vec![0.1, 0.1, 0.0]))
            .define("solver.steps_per_segment", Int(10))
            .define("train.lr", Float(1e-2))
            .define("train.epochs", Int(60))
            .define("train.batch_size", Int(100))
            .define("grid.resolution", Int(200))
            .define("grid.extent", Float(4.0))
            .define("check.ndde_max_loss", Float(1e-2))
            .define("check.node_factor", Float(5.0)),
        ExperimentName::Fig5Spiral => p
            .define("system.matrix", Floats(LinearTanh::default_spiral_matrix()))
            .define("system.tau", Float(3.5))
            .define("system.x0", Floats(vec![0.1, 0.0]))
            .define("data.t_end", Float(15.0))
            .define("data.dt", Float(0.1))
            .define("data.noise_sd", Float(0.0))
            .define("model.hidden", Ints(vec![32, 32]))
            .define("solver.steps_per_segment", Int(20))
            .define("train.lr", Float(3e-3))
            .define("train.epochs", Int(4000))
            .define("check.ndde_max_loss", Float(1e-2))
            .define("check.node_min_loss", Float(0.2)),
        ExperimentName::Fig6Population => forecast_defaults(p, "population", &[1.8], 1.0, 0.0, 60.0, 40.0, 0.5),
        ExperimentName::Fig6MackeyGlass => {
            forecast_defaults(p, "mackey-glass", &[4.0, 9.65, 2.0], 1.0, 0.0, 60.0, 40.0, 0.5)
        }
        ExperimentName::Fig7Identify => mackey_glass_data(p)
            .define("windows.horizon", Float(2.0))
            .define("windows.stride", Float(2.0))
            .define("solver.steps_per_segment", Int(50))
            .define("train.lr", Float(1e-2))
            .define("train.epochs", Int(600))
            .define("identify.deviations", Floats((1..=10).map(|k| k as f64 / 10.0).collect()))
            .define("check.tight_max_deviation", Float(0.3))
            .define("check.tight_tol", Float(0.02))
            .define("check.loose_max_deviation", Float(0.5))
            .define("check.loose_tol", Float(0.05)),
        ExperimentName::Fig8DelayFree => mackey_glass_data(p)
            .define("windows.horizon", Float(2.0))
            .define("windows.stride", Float(1.0))
            .define("model.widths", Ints(vec![8, 16]))
            .define("model.layers", Int(3))
            .define("solver.steps_per_segment", Int(20))
            .define("train.lr", Float(1e-3))
            .define("train.epochs", Int(600))
            .define("train.batch_size", Int(16))
            .define("train.tau_lr_scale", Float(3.0))
            .define("delay.deviations", Floats(vec![0.2, 0.4, 0.6, 0.8]))
            .define("check.width", Int(16))
            .define("check.max_deviation", Float(0.4))
            .define("check.tol", Float(0.05)),
        ExperimentName::Thm2Universal => p
            .define("map.t_end", Float(1.0))
            .define("map.points", Int(101))
            .define("map.extent", Float(2.0))
            .define("map.rotation", Float(std::f64::consts::FRAC_PI_2))
            .define("solver.steps_per_segment", Int(10))
            .define("check.tol", Float(1e-8)),
        ExperimentName::GradCheck => p
            .define("cases.count", Int(24))
            .define("cases.hidden", Int(6))
            .define("cases.max_dim", Int(4))
            .define("cases.max_segments", Int(3))
            .define("solver.steps_per_segment", Int(100))
            .define("oracle.steps_per_delay", Int(1000))
            .define("oracle.fd_step", Float(1e-5)),
    }
}

#[allow(clippy::too_many_arguments)]
fn forecast_defaults(
    p: Params,
    system: &str,
    params: &[f64],
    tau: f64,
    burn_in: f64,
    t_data: f64,
    t_train: f64,
    stride: f64,
) -> Params {
    p.define("system.kind", Value::Text(system.into()))
        .define("system.params", Floats(params.to_vec()))
        .define("system.tau", Float(tau))
        .define("system.x0", Float(0.5))
        .define("data.burn_in", Float(burn_in))
        .define("data.t_data", Float(t_data))
        .define("data.t_train", Float(t_train))
        .define("data.dt", Float(0.1))
        .define("data.noise_sd", Float(0.0))
        .define("windows.stride", Float(stride))
        .define("test.horizons", Floats(vec![1.0, 2.0, 5.0]))
        .define("model.hidden", Ints(vec![16, 16, 16]))
        .define("solver.steps_per_segment", Int(20))
        .define("train.lr", Float(3e-3))
        .define("train.epochs", Int(600))
        .define("train.batch_size", Int(16))
        .define("check.ndde_max_train_loss", Float(1e-3))
        .define("check.forecast_factor", Float(10.0))
}

fn mackey_glass_data(p: Params) -> Params {
    p.define("system.beta", Float(2.0))
        .define("system.n", Float(10.0))
        .define("system.gamma", Float(1.0))
        .define("system.tau", Float(3.18))
        .define("system.x0", Float(0.5))
        .define("data.burn_in", Float(50.0))
        .define("data.t_data", Float(100.0))
        .define("data.dt", Float(0.1))
        .define("data.noise_sd", Float(0.0))
        .define("windows.history_span", Float(6.0))
        .define("model.tau_min", Float(1.0))
        .define("model.tau_max", Float(6.0))
}

pub(super) fn run(name: ExperimentName, ctx: &mut RunContext) -> Result<()> {
    match name {
        ExperimentName::Fig2SignFlip => fig2(ctx),
        ExperimentName::Fig3Annulus => fig3(ctx),
        ExperimentName::Fig4Concentric => fig4(ctx),
        ExperimentName::Fig5Spiral => fig5(ctx),
        ExperimentName::Fig6Population | ExperimentName::Fig6MackeyGlass => fig6(ctx),
        ExperimentName::Fig7Identify => fig7(ctx),
        ExperimentName::Fig8DelayFree => fig8(ctx),
        ExperimentName::Thm2Universal => thm2(ctx),
        ExperimentName::GradCheck => gradcheck(ctx),
    }
}

pub(super) fn solver(p: &Params) -> Result<SolverConfig> {
    SolverConfig::new(p.usize("solver.steps_per_segment")?)
}

pub(super) fn train_config(ctx: &RunContext) -> Result<TrainConfig> {
    let p = &ctx.params;
    let mut cfg = TrainConfig::adam(p.f64("train.lr")?, p.usize("train.epochs")?);
    cfg.seed = ctx.seed()?;
    cfg.threads = ctx.threads()?;
    if p.contains("train.batch_size") {
        cfg.batch_size = p.usize("train.batch_size")?;
    }
    if p.contains("train.tau_lr_scale") {
        cfg.tau_lr_scale = p.f64("train.tau_lr_scale")?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Independent RNG streams derived from the run seed.
pub(super) fn rng(ctx: &RunContext, stream: u64) -> Result<ChaCha8Rng> {
    let mut r = ChaCha8Rng::seed_from_u64(ctx.seed()?);
    r.set_stream(stream);
    Ok(r)
}

fn tag(x: f64) -> String {
    format!("{x}")
}

pub(super) fn save_record(ctx: &mut RunContext, name: &str, rec: &TrainRecord) -> Result<()> {
    let path = ctx.output(name);
    rec.save_jsonl(&path)
}

fn fig2(ctx: &mut RunContext) -> Result<()> {
    let p = ctx.params.clone();
    let (a, tau, tol) = (p.f64("system.a")?, p.f64("system.tau")?, p.f64("check.tol")?);
    let n = p.usize("system.segments")?.max(1);
    let cfg = solver(&p)?;
    ctx.stage("integrate");
    for (i, &x0) in p.floats("system.x0")?.iter().enumerate() {
        let hist = HistoryFunction::constant(vec![x0])?;
        let traj = integrate_ndde(&ScalarDelay::default(), &[a], &hist, tau, n, &cfg)?;
        traj.save_csv(&ctx.output(&format!("trajectory_{i}.csv")), 1)?;
        // On the first segment the delayed state is the constant history.
        let exact = x0 * (1.0 + a * tau);
        let got = traj.checkpoint(1)[0];
        ctx.metric(&format!("x_tau[x0={}]", tag(x0)), got);
        let err = (got - exact).abs();
        ctx.check(
            &format!("x(tau) for x0 = {}", tag(x0)),
            err < tol,
            format!("x(tau) = {got:.17e}, closed form {exact}, error {err:.2e}"),
        );
    }
    Ok(())
}

fn fig3(ctx: &mut RunContext) -> Result<()> {
    let p = ctx.params.clone();
    let (r1, r2, r3) = (p.f64("geometry.r1")?, p.f64("geometry.r2")?, p.f64("geometry.r3")?);
    let tol = p.f64("check.tol")?;
    let c = build_annulus_separator_with_time(r1, r2, r3, 2, p.f64("geometry.t_end")?)?;
    ctx.stage("data");
    let points = concentric_dataset(r1, r2, r3, 2, p.usize("data.per_class")?, ctx.seed()?)?;
    ctx.stage("transform");
    let cfg = solver(&p)?;
    let mut rows = Vec::with_capacity(points.len());
    let (mut inner_max, mut outer_min, mut max_err) = (f64::NEG_INFINITY, f64::INFINITY, 0.0f64);
    for pt in &points {
        let y = c.transform(&pt.x, &cfg)?;
        let norm = pt.x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let closed = pt.x[0] + c.t_end * (norm - c.radius());
        max_err = max_err.max((y[0] - closed).abs());
        if pt.label > 0.0 {
            inner_max = inner_max.max(y[0]);
        } else {
            outer_min = outer_min.min(y[0]);
        }
        rows.push(vec![pt.x[0], pt.x[1], pt.label, y[0], y[1]]);
    }
    let header: Vec<String> = ["x1", "x2", "label", "h1", "h2"].map(String::from).into();
    ctx.write_csv("points.csv", &header, &rows)?;
    ctx.metric("inner_max_h1", inner_max);
    ctx.metric("outer_min_h1", outer_min);
    ctx.metric("closed_form_error", max_err);
    ctx.check(
        "separable by h1 = 0",
        inner_max < 0.0 && outer_min > 0.0,
        format!("inner max {inner_max:.6}, annulus min {outer_min:.6}"),
    );
    ctx.check(
        "inner bound",
        inner_max <= c.inner_bound() + tol,
        format!("max h1(T) on the disk {inner_max:.12} vs bound {}", c.inner_bound()),
    );
    ctx.check(
        "annulus bound",
        outer_min >= c.outer_bound() - tol,
        format!("min h1(T) on the annulus {outer_min:.12} vs bound {}", c.outer_bound()),
    );
    ctx.check(
        "closed form",
        max_err < tol,
        format!("max |h1(T) - (x1 + T(|x| - r))| = {max_err:.2e}"),
    );
    Ok(())
}

fn fig4(ctx: &mut RunContext) -> Result<()> {
    let p = ctx.params.clone();
    let (r1, r2, r3) = (p.f64("data.r1")?, p.f64("data.r2")?, p.f64("data.r3")?);
    ctx.stage("data");
    let points = concentric_dataset(r1, r2, r3, 2, p.usize("data.per_class")?, ctx.seed()?)?;
    let rows: Vec<Vec<f64>> = points.iter().map(|q| vec![q.x[0], q.x[1], q.label]).collect();
    ctx.write_csv("data.csv", &["x1", "x2", "label"].map(String::from), &rows)?;

    let hidden = p.ints("model.hidden")?.to_vec();
    let n = p.usize("model.segments")?.max(1);
    let tau = p.f64("model.t_end")? / n as f64;
    let cfg = train_config(ctx)?;
    let solver = solver(&p)?;
    let res = p.usize("grid.resolution")?.max(2);
    let ext = p.f64("grid.extent")?;
    let grid: Vec<Vec<f64>> = (0..res * res)
        .map(|k| {
            let (i, j) = (k / res, k % res);
            let s = |i: usize| -ext + 2.0 * ext * i as f64 / (res - 1) as f64;
            vec![s(j), s(i)]
        })
        .collect();
    let mut logits = vec![Vec::new(); 2];
    let mut finals = [0.0; 2];
    for (slot, (label, kind)) in [
        ("ndde", FieldKind::NeuralNdde { dim: 2, hidden: hidden.clone() }),
        ("node", FieldKind::NeuralNode { dim: 2, hidden: hidden.clone() }),
    ]
    .into_iter()
    .enumerate()
    {
        ctx.stage(&format!("train {label}"));
        let spec = ModelSpec::new(kind, tau, n);
        let w = spec.init_params(&mut rng(ctx, 1)?)?;
        let readout = p.floats("model.readout_init")?.to_vec();
        let (rec, problem) = train_classifier(&spec, w, readout, &points, solver, &cfg)?;
        save_record(ctx, &format!("metrics_{label}.jsonl"), &rec)?;
        let acc = problem.accuracy(&rec.final_theta, &points)?;
        finals[slot] = rec.final_loss();
        ctx.metric(&format!("{label}.final_loss"), rec.final_loss());
        ctx.metric(&format!("{label}.accuracy"), acc);
        ctx.log(&format!("{label}: loss {:.3e}, accuracy {acc:.4}", rec.final_loss()));
        ctx.stage(&format!("decision grid {label}"));
        logits[slot] = grid
            .iter()
            .map(|x| problem.logit(&rec.final_theta, x))
            .collect::<Result<Vec<f64>>>()?;
    }
    let rows: Vec<Vec<f64>> = grid
        .iter()
        .enumerate()
        .map(|(k, x)| vec![x[0], x[1], logits[0][k], logits[1][k]])
        .collect();
    ctx.write_csv("decision_grid.csv", &["x1", "x2", "ndde_logit", "node_logit"].map(String::from), &rows)?;
    let max_loss = p.f64("check.ndde_max_loss")?;
    let factor = p.f64("check.node_factor")?;
    ctx.check(
        "ndde separates",
        finals[0] < max_loss,
        format!("NDDE final loss {:.3e} (threshold {max_loss})", finals[0]),
    );
    ctx.check(
        "node lags ndde",
        finals[1] >= factor * finals[0],
        format!("NODE {:.3e} vs NDDE {:.3e}: ratio {:.1}", finals[1], finals[0], finals[1] / finals[0]),
    );
    Ok(())
}

fn fig5(ctx: &mut RunContext) -> Result<()> {
    let p = ctx.params.clone();
    let a = p.floats("system.matrix")?.to_vec();
    if a.len() != 4 {
        return Err(NddeError::Config("system.matrix needs 4 entries".into()));
    }
    let tau = p.f64("system.tau")?;
    ctx.stage("data");
    let mut opts = SeriesOptions::new(p.f64("data.t_end")?, p.f64("data.dt")?);
    opts.noise_sd = p.f64("data.noise_sd")?;
    opts.seed = ctx.seed()?;
    let sys = SeriesSystem {
        field: &LinearTanh::new(2),
        params: &a,
        history: HistoryFunction::constant(p.floats("system.x0")?.to_vec())?,
        tau,
    };
    let data = generate_series(&sys, &opts)?;
    super::save_series_csv(&ctx.output("data.csv"), &data)?;
    let series = vec![Series::from_trajectory(&data)?];
    let hidden = p.ints("model.hidden")?.to_vec();
    let cfg = train_config(ctx)?;
    let solver = solver(&p)?;
    let mut preds = Vec::new();
    let mut finals = [0.0; 2];
    for (slot, (label, kind)) in [
        ("ndde", FieldKind::NeuralNdde { dim: 2, hidden: hidden.clone() }),
        ("node", FieldKind::NeuralNode { dim: 2, hidden: hidden.clone() }),
    ]
    .into_iter()
    .enumerate()
    {
        ctx.stage(&format!("train {label}"));
        let spec = ModelSpec::new(kind, tau, 1);
        let w = spec.init_params(&mut rng(ctx, 1)?)?;
        let rec = train_regression(&spec, w, &series, None, solver, &cfg)?;
        save_record(ctx, &format!("metrics_{label}.jsonl"), &rec)?;
        finals[slot] = rec.final_loss();
        let min = rec.losses().into_iter().fold(f64::INFINITY, f64::min);
        ctx.metric(&format!("{label}.final_loss"), finals[slot]);
        ctx.metric(&format!("{label}.min_loss"), min);
        ctx.log(&format!("{label}: final loss {:.3e}, min {min:.3e}", finals[slot]));
        let problem = RegressionProblem::new(&spec, rec.final_theta.clone(), &series, solver, &cfg)?;
        preds.push(problem.predict(&problem.initial_theta(), 0)?);
    }
    let rows: Vec<Vec<f64>> = series[0]
        .observations
        .iter()
        .enumerate()
        .map(|(k, o)| {
            let mut r = vec![o.time];
            r.extend(&o.target);
            r.extend(&preds[0][k].1);
            r.extend(&preds[1][k].1);
            r
        })
        .collect();
    let header = ["t", "x1", "x2", "ndde_x1", "ndde_x2", "node_x1", "node_x2"].map(String::from);
    ctx.write_csv("predictions.csv", &header, &rows)?;
    let (ndde_max, node_min) = (p.f64("check.ndde_max_loss")?, p.f64("check.node_min_loss")?);
    ctx.check(
        "ndde fits",
        finals[0] < ndde_max,
        format!("NDDE final MSE {:.3e} (threshold {ndde_max})", finals[0]),
    );
    ctx.check(
        "node plateaus",
        finals[1] > node_min,
        format!("NODE final MSE {:.3e} (floor {node_min})", finals[1]),
    );
    Ok(())
}

pub(super) fn analytic_system(kind: &str) -> Result<(Box<dyn VectorField>, usize)> {
    Ok(match kind {
        "population" => (Box::new(Population), 1),
        "mackey-glass" => (Box::new(MackeyGlass), 3),
        "scalar-delay" => (Box::new(ScalarDelay::default()), 1),
        other => {
            return Err(NddeError::Config(format!(
                "unknown system `{other}`; expected population, mackey-glass or scalar-delay"
            )))
        }
    })
}

/// Grid-aligned history span covering one delay.
/// `x` rounded up to a multiple of the sample spacing.
fn on_grid(x: f64, dt: f64) -> f64 {
    (x / dt - 1e-9).ceil() * dt
}

fn history_span(tau: f64, dt: f64) -> f64 {
    on_grid(tau, dt) + dt
}

fn fig6(ctx: &mut RunContext) -> Result<()> {
    let p = ctx.params.clone();
    let (field, n_params) = analytic_system(p.text("system.kind")?)?;
    let params = p.floats("system.params")?.to_vec();
    if params.len() != n_params {
        return Err(NddeError::Config(format!("system.params needs {n_params} values")));
    }
    let tau = p.f64("system.tau")?;
    let dt = p.f64("data.dt")?;
    ctx.stage("data");
    let mut opts = SeriesOptions::new(p.f64("data.t_data")?, dt);
    opts.burn_in = p.f64("data.burn_in")?;
    opts.noise_sd = p.f64("data.noise_sd")?;
    opts.seed = ctx.seed()?;
    let sys = SeriesSystem {
        field: field.as_ref(),
        params: &params,
        history: HistoryFunction::constant(vec![p.f64("system.x0")?])?,
        tau,
    };
    let data = generate_series(&sys, &opts)?;
    super::save_series_csv(&ctx.output("data.csv"), &data)?;

    let span = history_span(tau, dt);
    let split = (p.f64("data.t_train")? / dt).round() as usize;
    let back = (span / dt).round() as usize;
    if split >= data.len() || split < back {
        return Err(NddeError::Config("data.t_train must leave room for a history and a test set".into()));
    }
    let train_set = windows(&data[..=split], span, tau, p.f64("windows.stride")?)?;
    let horizons = p.floats("test.horizons")?.to_vec();
    let tests: Vec<Vec<Series>> = horizons
        .iter()
        .map(|&h| windows(&data[split - back..], span, h * tau, on_grid(h * tau, dt)))
        .collect::<Result<_>>()?;
    if train_set.is_empty() || tests.iter().any(Vec::is_empty) {
        return Err(NddeError::Config("series too short for the requested windows".into()));
    }
    ctx.log(&format!("{} training windows", train_set.len()));
    let longest = tests.last().expect("at least one horizon");

    let hidden = p.ints("model.hidden")?.to_vec();
    let cfg = train_config(ctx)?;
    let solver = solver(&p)?;
    let mut train_loss = [0.0; 3];
    let mut forecast = [0.0; 3];
    // The augmented NODE is reported but not checked.
    for (slot, (label, kind, augment)) in [
        ("ndde", FieldKind::NeuralNdde { dim: 1, hidden: hidden.clone() }, 0),
        ("node", FieldKind::NeuralNode { dim: 1, hidden: hidden.clone() }, 0),
        ("anode", FieldKind::NeuralNode { dim: 1, hidden: hidden.clone() }, 1),
    ]
    .into_iter()
    .enumerate()
    {
        ctx.stage(&format!("train {label}"));
        let mut spec = ModelSpec::new(kind, tau, 1);
        spec.history = HistoryKind::Spline;
        spec.augment = augment;
        let w = spec.init_params(&mut rng(ctx, 1)?)?;
        let rec = train_regression(&spec, w, &train_set, Some(longest), solver, &cfg)?;
        save_record(ctx, &format!("metrics_{label}.jsonl"), &rec)?;
        train_loss[slot] = rec.final_loss();
        ctx.metric(&format!("{label}.train_loss"), train_loss[slot]);
        ctx.stage(&format!("forecast {label}"));
        for (h, set) in horizons.iter().zip(&tests) {
            let problem = RegressionProblem::new(&spec, rec.final_theta.clone(), set, solver, &cfg)?;
            let (mse, _) = evaluate_loss(&problem, &problem.initial_theta())?;
            ctx.metric(&format!("{label}.test_mse[{}tau]", tag(*h)), mse);
            forecast[slot] = mse;
        }
        let problem = RegressionProblem::new(&spec, rec.final_theta.clone(), longest, solver, &cfg)?;
        let pred = problem.predict(&problem.initial_theta(), 0)?;
        let rows: Vec<Vec<f64>> = longest[0]
            .observations
            .iter()
            .zip(&pred)
            .map(|(o, (t, x))| vec![*t, o.target[0], x[0]])
            .collect();
        ctx.write_csv(&format!("forecast_{label}.csv"), &["t", "x", "prediction"].map(String::from), &rows)?;
        ctx.log(&format!("{label}: train {:.3e}, longest forecast {:.3e}", train_loss[slot], forecast[slot]));
    }
    let max_train = p.f64("check.ndde_max_train_loss")?;
    let factor = p.f64("check.forecast_factor")?;
    let longest_h = tag(*horizons.last().expect("at least one horizon"));
    ctx.check(
        "ndde fits",
        train_loss[0] < max_train,
        format!("NDDE train MSE {:.3e} (threshold {max_train})", train_loss[0]),
    );
    ctx.check(
        "ndde forecasts",
        factor * forecast[0] <= forecast[1],
        format!(
            "{longest_h} tau forecast MSE: NDDE {:.3e}, NODE {:.3e} (ratio {:.1})",
            forecast[0],
            forecast[1],
            forecast[1] / forecast[0]
        ),
    );
    Ok(())
}

/// Mackey-Glass samples and their training windows.
fn mackey_glass_windows(ctx: &mut RunContext) -> Result<Vec<Series>> {
    let p = ctx.params.clone();
    let params = [p.f64("system.beta")?, p.f64("system.n")?, p.f64("system.gamma")?];
    ctx.stage("data");
    let mut opts = SeriesOptions::new(p.f64("data.t_data")?, p.f64("data.dt")?);
    opts.burn_in = p.f64("data.burn_in")?;
    opts.noise_sd = p.f64("data.noise_sd")?;
    opts.seed = ctx.seed()?;
    let sys = SeriesSystem {
        field: &MackeyGlass,
        params: &params,
        history: HistoryFunction::constant(vec![p.f64("system.x0")?])?,
        tau: p.f64("system.tau")?,
    };
    let data = generate_series(&sys, &opts)?;
    if data.iter().any(|(_, x)| x[0] <= 0.0) {
        return Err(NddeError::Domain("Mackey-Glass samples must stay positive".into()));
    }
    super::save_series_csv(&ctx.output("data.csv"), &data)?;
    let series = windows(
        &data,
        p.f64("windows.history_span")?,
        p.f64("windows.horizon")?,
        p.f64("windows.stride")?,
    )?;
    if series.is_empty() {
        return Err(NddeError::Config("no complete windows in the series".into()));
    }
    ctx.log(&format!("{} windows", series.len()));
    Ok(series)
}

fn fig7(ctx: &mut RunContext) -> Result<()> {
    let series = mackey_glass_windows(ctx)?;
    let p = ctx.params.clone();
    let tau = p.f64("system.tau")?;
    let target = IdentificationTarget::mackey_glass(p.f64("system.beta")?, p.f64("system.n")?, p.f64("system.gamma")?, tau);
    let mut spec = ModelSpec::new(FieldKind::MackeyGlass, tau, 1);
    spec.history = HistoryKind::Spline;
    spec.tau_min = p.f64("model.tau_min")?;
    spec.tau_max = p.f64("model.tau_max")?;
    let cfg = train_config(ctx)?;
    let solver = solver(&p)?;
    let mut rows = Vec::new();
    let mut worst = Vec::new();
    for &dl in p.floats("identify.deviations")? {
        ctx.stage(&format!("identify DL = {}", tag(dl)));
        let (rec, _) = identify_parameters(&spec, &target, dl, &series, solver, &cfg)?;
        save_record(ctx, &format!("metrics_dl{}.jsonl", tag(dl)), &rec)?;
        let last = rec.epochs.last().map(|e| e.tracked.clone()).unwrap_or_default();
        let dev = last.iter().map(|(_, v)| (v - 1.0).abs()).fold(0.0, f64::max);
        let dev = if rec.completed() && !last.is_empty() { dev } else { f64::INFINITY };
        ctx.metric(&format!("max_deviation[dl={}]", tag(dl)), dev);
        let mut row = vec![dl];
        row.extend(last.iter().map(|(_, v)| *v));
        row.push(rec.final_loss());
        rows.push(row);
        ctx.log(&format!("DL {dl}: max |p/p_true - 1| = {dev:.4}"));
        worst.push((dl, dev));
    }
    let mut header: Vec<String> = vec!["deviation".into()];
    header.extend(target.names.iter().cloned());
    header.push("tau".into());
    header.push("loss".into());
    if rows.iter().all(|r| r.len() == header.len()) {
        ctx.write_csv("summary.csv", &header, &rows)?;
    }
    for (bound_key, tol_key) in [("check.tight_max_deviation", "check.tight_tol"), ("check.loose_max_deviation", "check.loose_tol")] {
        let (bound, tol) = (p.f64(bound_key)?, p.f64(tol_key)?);
        let members: Vec<&(f64, f64)> = worst.iter().filter(|(dl, _)| *dl <= bound + 1e-12).collect();
        if members.is_empty() {
            continue;
        }
        let max = members.iter().map(|(_, d)| *d).fold(0.0, f64::max);
        ctx.check(
            &format!("DL <= {} within {}%", tag(bound), tag(tol * 100.0)),
            max < tol,
            format!("largest normalized deviation {max:.4} over {} runs", members.len()),
        );
    }
    Ok(())
}

fn fig8(ctx: &mut RunContext) -> Result<()> {
    let series = mackey_glass_windows(ctx)?;
    let p = ctx.params.clone();
    let tau = p.f64("system.tau")?;
    let bounds = (p.f64("model.tau_min")?, p.f64("model.tau_max")?);
    let layers = p.usize("model.layers")?;
    let mut cfg = train_config(ctx)?;
    let solver = solver(&p)?;
    let (check_width, check_dl, tol) = (p.usize("check.width")?, p.f64("check.max_deviation")?, p.f64("check.tol")?);
    let mut rows = Vec::new();
    let mut checked = Vec::new();
    for &width in p.ints("model.widths")? {
        for (k, &dl) in p.floats("delay.deviations")?.iter().enumerate() {
            ctx.stage(&format!("width {width}, DL = {}", tag(dl)));
            cfg.seed = ctx.seed()?.wrapping_add(k as u64);
            let hidden = vec![width; layers];
            let (rec, _) = infer_delay_model_free(&hidden, 1, tau, dl, bounds, &series, solver, &cfg)?;
            save_record(ctx, &format!("metrics_w{width}_dl{}.jsonl", tag(dl)), &rec)?;
            let ratio = rec.final_tau().map_or(f64::NAN, |t| t / tau);
            ctx.metric(&format!("tau_ratio[w={width},dl={}]", tag(dl)), ratio);
            ctx.log(&format!("width {width}, DL {dl}: tau/tau_true = {ratio:.4}, loss {:.3e}", rec.final_loss()));
            rows.push(vec![width as f64, dl, ratio, rec.final_loss(), if rec.completed() { 1.0 } else { 0.0 }]);
            if width == check_width && dl <= check_dl + 1e-12 {
                checked.push((dl, ratio));
            }
        }
    }
    ctx.write_csv(
        "summary.csv",
        &["width", "deviation", "tau_ratio", "loss", "completed"].map(String::from),
        &rows,
    )?;
    if !checked.is_empty() {
        let max = checked.iter().map(|(_, r)| (r - 1.0).abs()).fold(0.0, |a: f64, b| if b.is_nan() { f64::INFINITY } else { a.max(b) });
        ctx.check(
            &format!("width {check_width}, DL <= {} within {}%", tag(check_dl), tag(tol * 100.0)),
            max < tol,
            format!("largest |tau/tau_true - 1| = {max:.4} over {} runs", checked.len()),
        );
    }
    ctx.check("all runs reported", true, format!("{} runs", rows.len()));
    Ok(())
}

fn thm2(ctx: &mut RunContext) -> Result<()> {
    let p = ctx.params.clone();
    let t_end = p.f64("map.t_end")?;
    let tol = p.f64("check.tol")?;
    let cfg = solver(&p)?;
    let k = p.usize("map.points")?.max(2);
    let ext = p.f64("map.extent")?;
    ctx.stage("sign flip");
    let flip = build_universal_representation(&linear_residual_network(&RealMatrix::new(1, 1, vec![-1.0])?, t_end)?, t_end)?;
    let mut rows = Vec::new();
    let mut err = 0.0f64;
    for i in 0..k {
        let x = -ext + 2.0 * ext * i as f64 / (k - 1) as f64;
        let y = flip.apply(&[x], &cfg)?[0];
        err = err.max((y + x).abs());
        rows.push(vec![x, y, -x]);
    }
    ctx.write_csv("sign_flip.csv", &["x", "mapped", "target"].map(String::from), &rows)?;
    ctx.metric("sign_flip.max_error", err);
    ctx.check("x -> -x", err < tol, format!("max error {err:.2e} over {k} points"));

    ctx.stage("rotation");
    let th = p.f64("map.rotation")?;
    let rot = RealMatrix::new(2, 2, vec![th.cos(), -th.sin(), th.sin(), th.cos()])?;
    let rep = build_universal_representation(&linear_residual_network(&rot, t_end)?, t_end)?;
    let mut r = rng(ctx, 2)?;
    let mut rows = Vec::new();
    let mut err = 0.0f64;
    for _ in 0..k {
        let x = [r.random_range(-ext..ext), r.random_range(-ext..ext)];
        let want = [rot.get(0, 0) * x[0] + rot.get(0, 1) * x[1], rot.get(1, 0) * x[0] + rot.get(1, 1) * x[1]];
        let y = rep.apply(&x, &cfg)?;
        err = err.max((y[0] - want[0]).hypot(y[1] - want[1]));
        rows.push(vec![x[0], x[1], y[0], y[1], want[0], want[1]]);
    }
    ctx.write_csv("rotation.csv", &["x1", "x2", "y1", "y2", "target1", "target2"].map(String::from), &rows)?;
    ctx.metric("rotation.max_error", err);
    ctx.check("rotation", err < tol, format!("max error {err:.2e} over {k} points"));
    Ok(())
}

/// `count` random neural instances over dimensions, segment counts and both
/// history kinds, with observations inside the horizon and at `T`.
pub fn gradcheck_reports(
    count: usize,
    hidden: usize,
    max_dim: usize,
    max_segments: usize,
    steps: usize,
    opts: &GradCheckOptions,
    seed: u64,
) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(i as u64);
        let d = 1 + (i / 2) % max_dim.max(1);
        let n = 1 + i % max_segments.max(1);
        let spline = i % 2 == 1;
        let tau = r.random_range(0.4..1.0);
        let field = NeuralNdde::new(d, &[hidden])?;
        let params = field.layout().init_uniform(&mut r).flatten();
        let history = if spline {
            let knots: Vec<(f64, Vec<f64>)> = (0..8)
                .map(|k| {
                    let t = -tau - 0.3 + (tau + 0.4) * k as f64 / 7.0;
                    (t, (0..d).map(|_| r.random_range(-1.0..1.0)).collect())
                })
                .collect();
            fit_natural_cubic_spline(&knots)?
        } else {
            HistoryFunction::constant((0..d).map(|_| r.random_range(-1.0..1.0)).collect())?
        };
        let t_end = n as f64 * tau;
        let mut target = || -> Vec<f64> { (0..d).map(|_| r.random_range(-1.0..1.0)).collect() };
        let observations = vec![
            Observation::new(r_frac(i) * t_end, target()),
            Observation::new(t_end, target()),
        ];
        let case = GradCheckCase {
            field: &field,
            params,
            history,
            tau,
            n_segments: n,
            steps_per_segment: steps,
            loss: LossSpec::Mse,
            observations,
        };
        let label = format!("case{i}: d={d} n={n} {}", if spline { "spline" } else { "constant" });
        out.push((label, case.check(opts)?));
    }
    Ok(out)
}

/// Interior observation fraction, kept off the segment lattice.
fn r_frac(i: usize) -> f64 {
    0.23 + 0.11 * (i % 5) as f64
}

fn gradcheck(ctx: &mut RunContext) -> Result<()> {
    let p = ctx.params.clone();
    let opts = GradCheckOptions {
        fd_step: p.f64("oracle.fd_step")?,
        oracle_steps_per_delay: p.usize("oracle.steps_per_delay")?,
    };
    ctx.stage("finite differences");
    let reports = gradcheck_reports(
        p.usize("cases.count")?,
        p.usize("cases.hidden")?,
        p.usize("cases.max_dim")?,
        p.usize("cases.max_segments")?,
        p.usize("solver.steps_per_segment")?,
        &opts,
        ctx.seed()?,
    )?;
    let mut rows = Vec::new();
    let mut text_rows = Vec::new();
    for (i, (label, rep)) in reports.iter().enumerate() {
        for c in &rep.checks {
            rows.push(vec![i as f64, c.analytic, c.numeric, c.rel_error()]);
            text_rows.push(format!("{label}/{}", c.name));
        }
    }
    let path = ctx.output("gradcheck.csv");
    {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "case,component,analytic,numeric,rel_error")?;
        for (r, name) in rows.iter().zip(&text_rows) {
            let comp = name.rsplit('/').next().unwrap_or("");
            writeln!(w, "{},{comp},{:.16e},{:.16e},{:.6e}", r[0], r[1], r[2], r[3])?;
        }
        w.flush()?;
    }
    for prefix in ["w", "h0", "tau", "T"] {
        let max = reports.iter().map(|(_, r)| r.max_rel_error(prefix)).fold(0.0, f64::max);
        ctx.metric(&format!("max_rel_error.{prefix}"), max);
    }
    let failures: Vec<String> = reports
        .iter()
        .flat_map(|(l, r)| r.failures().into_iter().map(move |c| format!("{l}/{}", c.name)))
        .collect();
    ctx.check(
        "all components within tolerance",
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "{} cases, relative tolerance {:e}, absolute {:e} below {:e}",
                reports.len(),
                GradCheckReport::REL_TOL,
                GradCheckReport::ABS_TOL,
                GradCheckReport::SMALL
            )
        } else {
            format!("failing: {}", failures.join(", "))
        },
    );
    Ok(())
}
