use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ndde::experiments::commands::Command;
use ndde::experiments::{
    default_out_root, load_config, ExperimentName, ExperimentSpec, Params, RunManifest,
};
use ndde::NddeError;

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "ndde", version, about = "Neural delay differential equations: solver, adjoint training and experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file of `[section]` headers and `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; each run writes to `<root>/<name>`. Defaults to $NDDE_OUT_DIR or `runs`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides `solver.steps_per_segment`.
    #[arg(long, global = true, value_name = "M")]
    steps_per_segment: Option<u64>,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve one delay system and write its trajectory as CSV.
    Integrate,
    /// Compare adjoint gradients with finite differences on random instances.
    Gradcheck,
    /// Fit a neural delay (or ordinary) model to a series.
    Train,
    /// Recover the parameters and delay of an analytic system from a series.
    Identify,
    /// Named experiments.
    Experiment {
        #[command(subcommand)]
        action: ExperimentCmd,
    },
}

#[derive(Subcommand)]
enum ExperimentCmd {
    /// Run one named experiment.
    Run { name: String },
    /// Print the experiment names.
    List,
}

fn apply_common(params: &mut Params, c: &Common) -> ndde::Result<()> {
    if let Some(path) = &c.config {
        params.apply(&load_config(path)?)?;
    }
    if let Some(seed) = c.seed {
        params.set_raw("run.seed", &seed.to_string())?;
    }
    if let Some(m) = c.steps_per_segment {
        params.set_raw("solver.steps_per_segment", &m.to_string())?;
    }
    Ok(())
}

fn report(m: &RunManifest, dir: &std::path::Path, quiet: bool) {
    if !quiet {
        for c in &m.checks {
            println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        println!("{}: {:?}, manifest {}", m.name, m.status, dir.join(RunManifest::FILE).display());
    }
    if let Some(e) = &m.error {
        eprintln!("error in stage `{}`: {e}", m.failure_stage.as_deref().unwrap_or("?"));
    }
}

fn usage_code(e: &NddeError) -> u8 {
    match e {
        NddeError::Config(_) | NddeError::Parse { .. } | NddeError::Input(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn run(cli: Cli) -> Result<u8, (u8, String)> {
    let c = cli.common.clone();
    let root = c.out.clone().unwrap_or_else(default_out_root);
    let fail = |e: NddeError| (usage_code(&e), e.to_string());
    let (name, params, body): (String, Params, Runner) =
        match cli.command {
            Cmd::Experiment { action: ExperimentCmd::List } => {
                for n in ExperimentName::ALL {
                    println!("{:<18} {}", n.as_str(), n.description());
                }
                return Ok(0);
            }
            Cmd::Experiment { action: ExperimentCmd::Run { name } } => {
                let exp: ExperimentName = name.parse().map_err(fail)?;
                experiment(exp, &c)
            }
            Cmd::Gradcheck => experiment(ExperimentName::GradCheck, &c),
            Cmd::Integrate => command(Command::Integrate, &c),
            Cmd::Train => command(Command::Train, &c),
            Cmd::Identify => command(Command::Identify, &c),
        };
    let mut params = params;
    apply_common(&mut params, &c).map_err(fail)?;
    let dir = root.join(&name);
    let manifest = body(params, dir.clone()).map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
    report(&manifest, &dir, c.quiet);
    Ok(manifest.exit_code() as u8)
}

type Runner = Box<dyn FnOnce(Params, PathBuf) -> ndde::Result<RunManifest>>;

fn experiment(name: ExperimentName, c: &Common) -> (String, Params, Runner) {
    let quiet = c.quiet;
    let spec = ExperimentSpec::new(name);
    let params = spec.params.clone();
    (
        name.as_str().to_string(),
        params,
        Box::new(move |params, dir| {
            ExperimentSpec { name, params, out_dir: dir }.run(quiet)
        }),
    )
}

fn command(cmd: Command, c: &Common) -> (String, Params, Runner) {
    let quiet = c.quiet;
    (
        cmd.as_str().to_string(),
        cmd.defaults(),
        Box::new(move |params, dir| cmd.run(params, &dir, quiet)),
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.common.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .format_target(false)
        .init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
