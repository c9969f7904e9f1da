//! Config-driven experiment runner for the `rtsrk` library.
//!
//! A run resolves a configuration (embedded default or user file, then
//! `--set` overrides, then `--seed`), validates it completely, runs the
//! experiment and writes its outputs together with a `manifest.json` that
//! `replay` can repeat byte for byte.

pub mod config;
pub mod experiments;
pub mod manifest;
pub mod output;

use std::path::{Path, PathBuf};
use std::time::Instant;

use config::{ConfigError, ExperimentConfig, RawConfig};
use experiments::{Experiment, Outcome, Plan, RunOptions};
use manifest::{Manifest, ManifestError, MANIFEST_FILE, MANIFEST_FORMAT};
use output::OutputDir;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Core(#[from] rtsrk::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("output: {0}")]
    Output(String),
    #[error("strict mode: {}", .0.join("; "))]
    Strict(Vec<String>),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    /// Process exit code: 2 for bad input, 3 for strict violations, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Manifest(_) => 2,
            CliError::Strict(_) => 3,
            _ => 1,
        }
    }
}

/// Everything a run needs besides the experiment's configuration.
#[derive(Debug, Clone, Default)]
pub struct RunRequest {
    pub config_file: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub strict: bool,
    pub extended: bool,
}

#[derive(Debug)]
pub struct RunSummary {
    pub out: PathBuf,
    pub manifest: Manifest,
    pub outcome: Outcome,
}

/// Builds the effective configuration for an experiment.
pub fn resolve_config(exp: Experiment, req: &RunRequest) -> Result<ExperimentConfig, CliError> {
    let text = match &req.config_file {
        Some(path) => std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?,
        None => exp.default_config().to_string(),
    };
    let mut raw = RawConfig::parse(&text)?;
    if raw.get("experiment").is_none() {
        raw.set("experiment", toml::Value::String(exp.name().into()))?;
    }
    for o in &req.overrides {
        raw.apply_override(o)?;
    }
    if let Some(seed) = req.seed {
        let seed = i64::try_from(seed).map_err(|_| ConfigError::key("seed", "must fit in a signed 64-bit integer"))?;
        raw.set("seed", toml::Value::Integer(seed))?;
    }
    Ok(ExperimentConfig::validate(&raw, &exp.keys())?)
}

pub fn run(exp: Experiment, req: &RunRequest) -> Result<RunSummary, CliError> {
    let cfg = resolve_config(exp, req)?;
    let plan = Plan::new(exp, &cfg, RunOptions { extended: req.extended })?;
    let out = req.out.clone().unwrap_or_else(|| Path::new("out").join(exp.name()));
    execute(exp, &cfg, &plan, req, &out)
}

/// Repeats the run recorded in a manifest. Outputs go to `out`, or next to
/// the manifest when not given.
pub fn replay(manifest_path: &Path, out: Option<PathBuf>) -> Result<RunSummary, CliError> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| CliError::io(manifest_path, e))?;
    let m = Manifest::parse(&text)?;
    let exp = m.experiment_kind()?;
    let cfg = ExperimentConfig::validate(&m.raw_config()?, &exp.keys())?;
    if cfg.int("seed") != m.seed {
        return Err(ManifestError("seed disagrees with the recorded configuration".into()).into());
    }
    let req = RunRequest { threads: m.threads, strict: m.strict, extended: m.extended, ..Default::default() };
    let plan = Plan::new(exp, &cfg, RunOptions { extended: m.extended })?;
    let out = out.unwrap_or_else(|| manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf());
    execute(exp, &cfg, &plan, &req, &out)
}

fn execute(
    exp: Experiment,
    cfg: &ExperimentConfig,
    plan: &Plan,
    req: &RunRequest,
    out: &Path,
) -> Result<RunSummary, CliError> {
    let mut dir = OutputDir::create(out)?;
    let start = Instant::now();
    let outcome = match req.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Output(format!("thread pool: {e}")))?
            .install(|| plan.run(&mut dir))?,
        None => plan.run(&mut dir)?,
    };
    let manifest = Manifest {
        format: MANIFEST_FORMAT,
        experiment: exp.name().to_string(),
        seed: cfg.int("seed"),
        config: cfg.to_raw().to_toml(),
        extended: req.extended,
        strict: req.strict,
        threads: req.threads,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        git_describe: manifest::git_describe(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
        outputs: dir.files().to_vec(),
    };
    let path = out.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_json()).map_err(|e| CliError::io(&path, e))?;
    if req.strict && !outcome.strict_violations.is_empty() {
        return Err(CliError::Strict(outcome.strict_violations));
    }
    Ok(RunSummary { out: out.to_path_buf(), manifest, outcome })
}
