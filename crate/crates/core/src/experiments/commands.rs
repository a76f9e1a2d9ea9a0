//! The one-off `integrate`, `train` and `identify` commands. They share the
//! parameter tables, output handling and manifest of the named experiments.

use std::path::Path;

use super::config::{Params, Value};
use super::data::{generate_series, SeriesOptions, SeriesSystem};
use super::runs::{analytic_system, rng, save_record, solver, train_config};
use super::{execute, run_params, RunContext, RunManifest};
use crate::error::{NddeError, Result};
use crate::models::{FieldKind, HistoryKind, LinearTanh, ModelSpec, VectorField};
use crate::solver::{integrate_ndde, read_series_csv, HistoryFunction};
use crate::training::{identify_parameters, train_regression, windows, IdentificationTarget, Series};

use Value::{Bool, Float, Floats, Int, Ints, Text};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Integrate,
    Train,
    Identify,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Integrate => "integrate",
            Command::Train => "train",
            Command::Identify => "identify",
        }
    }

    pub fn defaults(self) -> Params {
        let p = system_params(run_params(self.as_str()));
        match self {
            Command::Integrate => p
                .define("system.segments", Int(10))
                .define("solver.steps_per_segment", Int(100))
                .define("output.decimation", Int(1)),
            Command::Train => series_params(p)
                .define("model.kind", Text("ndde".into()))
                .define("model.hidden", Ints(vec![16, 16]))
                .define("model.tau", Float(1.0))
                .define("model.train_tau", Bool(false))
                .define("model.tau_min", Float(0.1))
                .define("model.tau_max", Float(10.0))
                .define("model.augment", Int(0))
                .define("solver.steps_per_segment", Int(20))
                .define("train.lr", Float(1e-3))
                .define("train.epochs", Int(200))
                .define("train.batch_size", Int(0))
                .define("train.tau_lr_scale", Float(1.0)),
            Command::Identify => series_params(p)
                .define("identify.deviation", Float(0.2))
                .define("model.tau_min", Float(1.0))
                .define("model.tau_max", Float(6.0))
                .define("solver.steps_per_segment", Int(50))
                .define("train.lr", Float(1e-2))
                .define("train.epochs", Int(600)),
        }
    }

    pub fn run(self, params: Params, dir: &Path, quiet: bool) -> Result<RunManifest> {
        execute(self.as_str(), params, dir, quiet, |ctx| match self {
            Command::Integrate => integrate(ctx),
            Command::Train => train(ctx),
            Command::Identify => identify(ctx),
        })
    }
}

/// `system.*` keys. Empty lists and a zero delay select the defaults of
/// the chosen system.
fn system_params(p: Params) -> Params {
    p.define("system.kind", Text("mackey-glass".into()))
        .define("system.params", Floats(Vec::new()))
        .define("system.tau", Float(0.0))
        .define("system.x0", Floats(Vec::new()))
}

fn series_params(p: Params) -> Params {
    p.define("data.csv", Text(String::new()))
        .define("data.t_data", Float(100.0))
        .define("data.dt", Float(0.1))
        .define("data.burn_in", Float(50.0))
        .define("data.noise_sd", Float(0.0))
        .define("windows.history_span", Float(6.0))
        .define("windows.horizon", Float(2.0))
        .define("windows.stride", Float(2.0))
}

struct System {
    field: Box<dyn VectorField>,
    params: Vec<f64>,
    tau: f64,
    x0: Vec<f64>,
}

fn system(p: &Params) -> Result<System> {
    let kind = p.text("system.kind")?;
    let (field, params, tau, x0): (Box<dyn VectorField>, Vec<f64>, f64, Vec<f64>) = match kind {
        "spiral" => (Box::new(LinearTanh::new(2)), LinearTanh::default_spiral_matrix(), 3.5, vec![0.1, 0.0]),
        other => {
            let (f, _) = analytic_system(other)?;
            match other {
                "population" => (f, vec![1.8], 1.0, vec![0.5]),
                "mackey-glass" => (f, vec![2.0, 10.0, 1.0], 3.18, vec![0.5]),
                _ => (f, vec![-2.0], 1.0, vec![1.0]),
            }
        }
    };
    let pick = |given: &[f64], default: Vec<f64>| if given.is_empty() { default } else { given.to_vec() };
    let params = pick(p.floats("system.params")?, params);
    let x0 = pick(p.floats("system.x0")?, x0);
    let tau = match p.f64("system.tau")? {
        0.0 => tau,
        t => t,
    };
    if params.len() != field.param_count() {
        return Err(NddeError::Config(format!(
            "system.params: `{kind}` takes {} values, got {}",
            field.param_count(),
            params.len()
        )));
    }
    if x0.len() != field.dim() {
        return Err(NddeError::Config(format!("system.x0: `{kind}` has dimension {}", field.dim())));
    }
    Ok(System { field, params, tau, x0 })
}

fn integrate(ctx: &mut RunContext) -> Result<()> {
    let p = ctx.params.clone();
    let sys = system(&p)?;
    ctx.stage("integrate");
    let hist = HistoryFunction::constant(sys.x0.clone())?;
    let traj = integrate_ndde(sys.field.as_ref(), &sys.params, &hist, sys.tau, p.usize("system.segments")?, &solver(&p)?)?;
    traj.save_csv(&ctx.output("trajectory.csv"), p.usize("output.decimation")?)?;
    ctx.metric("terminal_time", traj.terminal_time());
    for (i, v) in traj.terminal_state().iter().enumerate() {
        ctx.metric(&format!("terminal_state[{i}]"), *v);
    }
    ctx.metric("nfe", traj.stage_evaluations() as f64);
    Ok(())
}

/// The series from `data.csv`, or generated from `system.*` when that is empty.
fn load_samples(ctx: &mut RunContext) -> Result<(Vec<(f64, Vec<f64>)>, Option<System>)> {
    let p = ctx.params.clone();
    ctx.stage("data");
    let csv = p.text("data.csv")?;
    if !csv.is_empty() {
        let text = std::fs::read_to_string(csv)
            .map_err(|e| NddeError::Config(format!("cannot read data.csv `{csv}`: {e}")))?;
        return Ok((read_series_csv(&text)?, None));
    }
    let sys = system(&p)?;
    let mut opts = SeriesOptions::new(p.f64("data.t_data")?, p.f64("data.dt")?);
    opts.burn_in = p.f64("data.burn_in")?;
    opts.noise_sd = p.f64("data.noise_sd")?;
    opts.seed = ctx.seed()?;
    let samples = generate_series(
        &SeriesSystem {
            field: sys.field.as_ref(),
            params: &sys.params,
            history: HistoryFunction::constant(sys.x0.clone())?,
            tau: sys.tau,
        },
        &opts,
    )?;
    super::save_series_csv(&ctx.output("data.csv"), &samples)?;
    Ok((samples, Some(sys)))
}

/// Windows when `windows.history_span > 0`, otherwise the whole series from
/// its first sample.
fn make_series(p: &Params, samples: &[(f64, Vec<f64>)]) -> Result<(Vec<Series>, HistoryKind)> {
    let span = p.f64("windows.history_span")?;
    if span > 0.0 {
        let s = windows(samples, span, p.f64("windows.horizon")?, p.f64("windows.stride")?)?;
        if s.is_empty() {
            return Err(NddeError::Config("no complete windows in the series".into()));
        }
        Ok((s, HistoryKind::Spline))
    } else {
        Ok((vec![Series::from_trajectory(samples)?], HistoryKind::Constant))
    }
}

fn train(ctx: &mut RunContext) -> Result<()> {
    let (samples, _) = load_samples(ctx)?;
    let p = ctx.params.clone();
    let dim = samples.first().map_or(0, |s| s.1.len());
    let (series, history) = make_series(&p, &samples)?;
    let hidden = p.ints("model.hidden")?.to_vec();
    let kind = match p.text("model.kind")? {
        "ndde" => FieldKind::NeuralNdde { dim, hidden },
        "node" => FieldKind::NeuralNode { dim, hidden },
        other => return Err(NddeError::Config(format!("model.kind must be ndde or node, got `{other}`"))),
    };
    let mut spec = ModelSpec::new(kind, p.f64("model.tau")?, 1);
    spec.history = history;
    spec.train_tau = p.bool("model.train_tau")?;
    spec.tau_min = p.f64("model.tau_min")?;
    spec.tau_max = p.f64("model.tau_max")?;
    spec.augment = p.usize("model.augment")?;
    spec.validate()?;
    let cfg = train_config(ctx)?;
    ctx.stage("train");
    let w = spec.init_params(&mut rng(ctx, 1)?)?;
    let rec = train_regression(&spec, w, &series, None, solver(&p)?, &cfg)?;
    save_record(ctx, "metrics.jsonl", &rec)?;
    ctx.write_json(
        "final_params.json",
        &serde_json::json!({
            "theta": rec.final_theta,
            "tau": rec.final_tau(),
            "status": format!("{:?}", rec.status),
        }),
    )?;
    ctx.metric("final_loss", rec.final_loss());
    if let Some(t) = rec.final_tau() {
        ctx.metric("final_tau", t);
    }
    ctx.check("training completed", rec.completed(), format!("{:?}", rec.status));
    Ok(())
}

fn identify(ctx: &mut RunContext) -> Result<()> {
    let (samples, generated) = load_samples(ctx)?;
    let p = ctx.params.clone();
    // The truth used for normalization is the configured system.
    let sys = match generated {
        Some(s) => s,
        None => system(&p)?,
    };
    let (kind, target) = match p.text("system.kind")? {
        "mackey-glass" => (
            FieldKind::MackeyGlass,
            IdentificationTarget::mackey_glass(sys.params[0], sys.params[1], sys.params[2], sys.tau),
        ),
        "population" => (
            FieldKind::Population,
            IdentificationTarget {
                names: vec!["r".into()],
                truth: sys.params.clone(),
                true_tau: sys.tau,
            },
        ),
        other => return Err(NddeError::Config(format!("identify supports mackey-glass and population, got `{other}`"))),
    };
    let (series, history) = make_series(&p, &samples)?;
    let mut spec = ModelSpec::new(kind, sys.tau, 1);
    spec.history = history;
    spec.tau_min = p.f64("model.tau_min")?;
    spec.tau_max = p.f64("model.tau_max")?;
    let cfg = train_config(ctx)?;
    ctx.stage("identify");
    let (rec, _) = identify_parameters(&spec, &target, p.f64("identify.deviation")?, &series, solver(&p)?, &cfg)?;
    save_record(ctx, "metrics.jsonl", &rec)?;
    let last = rec.epochs.last().map(|e| e.tracked.clone()).unwrap_or_default();
    for (k, v) in &last {
        ctx.metric(&format!("normalized.{k}"), *v);
    }
    ctx.metric("final_loss", rec.final_loss());
    ctx.check("identification completed", rec.completed(), format!("{:?}", rec.status));
    Ok(())
}
