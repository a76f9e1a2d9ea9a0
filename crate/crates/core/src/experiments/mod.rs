//! Declarative experiment runner: named specs with typed defaults, data
//! generation, training, evaluation and a manifest of every emitted file.
//!
//! A run writes into its own directory. Metrics are JSON-lines (one object per
//! epoch), trajectories and point clouds are CSV, and `manifest.json` records
//! the parameter hash, timestamps, checks and the file list.

pub mod commands;
pub mod config;
pub mod data;
mod runs;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NddeError, Result};
pub use config::{load_config, parse_config, ConfigEntry, Params, Value};
pub use data::{generate_series, save_series_csv, write_series_csv, SeriesOptions, SeriesSystem};

/// Environment variable overriding the default output root.
pub const OUT_DIR_ENV: &str = "NDDE_OUT_DIR";
/// Output root used when neither `--out` nor the environment variable is set.
pub const DEFAULT_OUT_ROOT: &str = "runs";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExperimentName {
    Fig2SignFlip,
    Fig3Annulus,
    Fig4Concentric,
    Fig5Spiral,
    Fig6Population,
    Fig6MackeyGlass,
    Fig7Identify,
    Fig8DelayFree,
    Thm2Universal,
    GradCheck,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 10] = [
        ExperimentName::Fig2SignFlip,
        ExperimentName::Fig3Annulus,
        ExperimentName::Fig4Concentric,
        ExperimentName::Fig5Spiral,
        ExperimentName::Fig6Population,
        ExperimentName::Fig6MackeyGlass,
        ExperimentName::Fig7Identify,
        ExperimentName::Fig8DelayFree,
        ExperimentName::Thm2Universal,
        ExperimentName::GradCheck,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentName::Fig2SignFlip => "fig2-signflip",
            ExperimentName::Fig3Annulus => "fig3-annulus",
            ExperimentName::Fig4Concentric => "fig4-concentric",
            ExperimentName::Fig5Spiral => "fig5-spiral",
            ExperimentName::Fig6Population => "fig6-population",
            ExperimentName::Fig6MackeyGlass => "fig6-mackeyglass",
            ExperimentName::Fig7Identify => "fig7-identify",
            ExperimentName::Fig8DelayFree => "fig8-delayfree",
            ExperimentName::Thm2Universal => "thm2-universal",
            ExperimentName::GradCheck => "gradcheck",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            ExperimentName::Fig2SignFlip => "x' = -2 x(t-1) maps x0 to -x0 at t = 1",
            ExperimentName::Fig3Annulus => "hand-built delay field separating a disk from an annulus",
            ExperimentName::Fig4Concentric => "concentric-circle classification, NDDE vs NODE",
            ExperimentName::Fig5Spiral => "regression on a self-intersecting delayed spiral, NDDE vs NODE",
            ExperimentName::Fig6Population => "population dynamics fit and forecast, NDDE vs NODE",
            ExperimentName::Fig6MackeyGlass => "Mackey-Glass fit and forecast, NDDE vs NODE",
            ExperimentName::Fig7Identify => "Mackey-Glass parameter and delay identification",
            ExperimentName::Fig8DelayFree => "model-free delay inference with neural fields",
            ExperimentName::Thm2Universal => "constructive delay representation of maps a NODE cannot realize",
            ExperimentName::GradCheck => "adjoint gradients vs finite differences on random instances",
        }
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentName {
    type Err = NddeError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|n| n.as_str()).collect();
                NddeError::Config(format!("unknown experiment `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

/// Seed used when none is given: the first eight bytes of SHA-256 of the name.
pub fn default_seed(name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// `$NDDE_OUT_DIR` if set and non-empty, otherwise `runs`.
pub fn default_out_root() -> PathBuf {
    match std::env::var(OUT_DIR_ENV) {
        Ok(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(DEFAULT_OUT_ROOT),
    }
}

/// An experiment with its full parameter table and output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub name: ExperimentName,
    pub params: Params,
    pub out_dir: PathBuf,
}

impl ExperimentSpec {
    /// Defaults for `name`, writing under the default output root.
    pub fn new(name: ExperimentName) -> Self {
        Self {
            name,
            params: runs::defaults(name),
            out_dir: default_out_root().join(name.as_str()),
        }
    }

    pub fn with_out_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = dir.into();
        self
    }

    pub fn seed(&self) -> u64 {
        self.params.u64("run.seed").unwrap_or_else(|_| default_seed(self.name.as_str()))
    }

    pub fn spec_hash(&self) -> String {
        spec_hash(self.name.as_str(), &self.params)
    }

    pub fn run(&self, quiet: bool) -> Result<RunManifest> {
        run_experiment(self, quiet)
    }
}

/// Hex SHA-256 of the name and the canonical parameter listing; parameter
/// order in config files does not change it.
pub fn spec_hash(name: &str, params: &Params) -> String {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    h.update(b"\n");
    h.update(params.canonical().as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Parameters shared by every run.
pub(crate) fn run_params(name: &str) -> Params {
    Params::new()
        .define("run.seed", Value::Int(default_seed(name)))
        .define("run.threads", Value::Int(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Passed,
    ChecksFailed,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureKind {
    /// Bad parameters or inputs.
    Config,
    Runtime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub spec_hash: String,
    pub version: String,
    pub seed: u64,
    pub started: String,
    pub finished: String,
    pub status: RunStatus,
    pub failure_stage: Option<String>,
    pub failure_kind: Option<FailureKind>,
    pub error: Option<String>,
    pub checks: Vec<Check>,
    pub metrics: BTreeMap<String, f64>,
    pub params: serde_json::Value,
    /// Every file written by the run, relative to its directory, including
    /// `manifest.json`.
    pub files: Vec<String>,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(Self::FILE))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Process exit code: 0 passed, 1 runtime failure, 2 configuration
    /// failure, 3 failed checks.
    pub fn exit_code(&self) -> i32 {
        match (self.status, self.failure_kind) {
            (RunStatus::Passed, _) => 0,
            (RunStatus::ChecksFailed, _) => 3,
            (RunStatus::Failed, Some(FailureKind::Config)) => 2,
            (RunStatus::Failed, _) => 1,
        }
    }
}

/// Mutable state of a run in progress, handed to the experiment bodies.
pub struct RunContext {
    pub params: Params,
    dir: PathBuf,
    quiet: bool,
    files: Vec<String>,
    checks: Vec<Check>,
    metrics: BTreeMap<String, f64>,
    stage: String,
}

impl RunContext {
    fn new(params: Params, dir: PathBuf, quiet: bool) -> Self {
        Self {
            params,
            dir,
            quiet,
            files: Vec::new(),
            checks: Vec::new(),
            metrics: BTreeMap::new(),
            stage: "setup".into(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn stage(&mut self, stage: &str) {
        self.stage = stage.to_string();
        self.log(&format!("stage: {stage}"));
    }

    pub fn log(&self, msg: &str) {
        if !self.quiet {
            log::info!("{msg}");
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.params.u64("run.seed")
    }

    pub fn threads(&self) -> Result<Option<usize>> {
        Ok(match self.params.usize("run.threads")? {
            0 => None,
            k => Some(k),
        })
    }

    /// Registers `name` as an output file and returns its path.
    pub fn output(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        let detail = detail.into();
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            detail,
        });
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    pub fn write_csv(&mut self, name: &str, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
        use std::io::Write;
        let path = self.output(name);
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "{}", header.join(","))?;
        for r in rows {
            let cells: Vec<String> = r.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &serde_json::Value) -> Result<()> {
        let path = self.output(name);
        std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
        Ok(())
    }
}

fn failure_kind(e: &NddeError) -> FailureKind {
    match e {
        NddeError::Config(_) | NddeError::Parse { .. } | NddeError::Input(_) => FailureKind::Config,
        _ => FailureKind::Runtime,
    }
}

/// Deletes the files a previous manifest in `dir` listed, so the new manifest
/// stays complete.
fn clear_previous(dir: &Path) -> Result<()> {
    if let Ok(old) = RunManifest::load(dir) {
        for f in old.files {
            let p = dir.join(&f);
            if p.is_file() && !f.contains("..") {
                std::fs::remove_file(p)?;
            }
        }
    }
    Ok(())
}

/// Runs `body` in `dir` and writes the manifest; module errors are recorded
/// in the manifest rather than returned.
pub(crate) fn execute(
    name: &str,
    params: Params,
    dir: &Path,
    quiet: bool,
    body: impl FnOnce(&mut RunContext) -> Result<()>,
) -> Result<RunManifest> {
    std::fs::create_dir_all(dir)?;
    clear_previous(dir)?;
    let started = chrono::Utc::now().to_rfc3339();
    let hash = spec_hash(name, &params);
    let seed = params.u64("run.seed")?;
    let mut ctx = RunContext::new(params, dir.to_path_buf(), quiet);
    ctx.log(&format!("{name}: seed {seed}, writing to {}", dir.display()));
    let outcome = body(&mut ctx);
    let (status, failure_stage, kind, error) = match outcome {
        Ok(()) if ctx.checks.iter().all(|c| c.passed) => (RunStatus::Passed, None, None, None),
        Ok(()) => (RunStatus::ChecksFailed, None, None, None),
        Err(e) => (
            RunStatus::Failed,
            Some(ctx.stage.clone()),
            Some(failure_kind(&e)),
            Some(e.to_string()),
        ),
    };
    let mut files = ctx.files.clone();
    files.push(RunManifest::FILE.to_string());
    let manifest = RunManifest {
        name: name.to_string(),
        spec_hash: hash,
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        started,
        finished: chrono::Utc::now().to_rfc3339(),
        status,
        failure_stage,
        failure_kind: kind,
        error,
        checks: ctx.checks,
        metrics: ctx.metrics,
        params: ctx.params.to_json(),
        files,
    };
    std::fs::write(
        dir.join(RunManifest::FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

/// Executes generation, training and evaluation for `spec` and writes its
/// manifest. Errors inside the experiment are recorded there; only failures
/// to write the output directory are returned.
pub fn run_experiment(spec: &ExperimentSpec, quiet: bool) -> Result<RunManifest> {
    let name = spec.name;
    execute(name.as_str(), spec.params.clone(), &spec.out_dir, quiet, |ctx| {
        runs::run(name, ctx)
    })
}
