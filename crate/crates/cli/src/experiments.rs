//! The named experiments, their key tables and their outputs.
//!
//! Each experiment first turns its validated config into a plan, so every
//! semantic check happens before any computation, and then runs the plan.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use rtsrk::analysis::{
    error_estimator_comparison, fit_broken_line, hamiltonian_error_longtime, initial_condition_fan, mse_theory_curve,
    positivity_report, BrokenLineFit, PositivityReport,
};
use rtsrk::bayes::{
    additive_limit, deterministic_limit, linear_analytic_posterior, pmmh, rts_limit_density, rts_limit_support, rwmh,
    synthetic_ivp, Chain, Covariance, GaussianPrior, InverseProblem, McmcConfig, PosteriorKind,
};
use rtsrk::{
    derive_seed, fit_order, integrate, make_problem, propagate, study_estimator_mse, study_mean_square, study_weak,
    ConvergenceStudy, EnsembleConfig, Error, OdeSystem, Params, ProblemName, Recording, RngStream, Scheme,
    StepDistribution, StepLaw, Stepper, StudySetup,
};

use crate::config::{ConfigError, ExperimentConfig, KeySpec, Kind};
use crate::output::{num, Csv, OutputDir};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Experiment {
    Integrate,
    LorenzFan,
    ErrEstimator,
    TableMs,
    TableWeak,
    McMse,
    Chemistry,
    KeplerInvariant,
    PendulumLongtime,
    LinearPosterior,
    InferHenon,
}

impl Experiment {
    pub const ALL: [Experiment; 11] = [
        Experiment::Integrate,
        Experiment::LorenzFan,
        Experiment::ErrEstimator,
        Experiment::TableMs,
        Experiment::TableWeak,
        Experiment::McMse,
        Experiment::Chemistry,
        Experiment::KeplerInvariant,
        Experiment::PendulumLongtime,
        Experiment::LinearPosterior,
        Experiment::InferHenon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Integrate => "integrate",
            Experiment::LorenzFan => "lorenz-fan",
            Experiment::ErrEstimator => "err-estimator",
            Experiment::TableMs => "table-ms",
            Experiment::TableWeak => "table-weak",
            Experiment::McMse => "mc-mse",
            Experiment::Chemistry => "chemistry",
            Experiment::KeplerInvariant => "kepler-invariant",
            Experiment::PendulumLongtime => "pendulum-longtime",
            Experiment::LinearPosterior => "linear-posterior",
            Experiment::InferHenon => "infer-henon",
        }
    }

    pub fn about(self) -> &'static str {
        match self {
            Experiment::Integrate => "Dump a single trajectory of any scheme",
            Experiment::LorenzFan => "Lorenz trajectories from Gaussian-perturbed initial conditions",
            Experiment::ErrEstimator => "Embedded Euler/Heun estimate and ensemble spread against the true error",
            Experiment::TableMs => "Mean-square convergence orders",
            Experiment::TableWeak => "Weak convergence orders",
            Experiment::McMse => "Mean-square error of the Monte Carlo estimator",
            Experiment::Chemistry => "Positivity of random-step and additive-noise RKC on the peroxide-oxide reaction",
            Experiment::KeplerInvariant => "Angular momentum drift on the perturbed Kepler problem",
            Experiment::PendulumLongtime => "Long-time mean energy error on the pendulum",
            Experiment::LinearPosterior => "Analytic posteriors of the scalar linear inverse problem",
            Experiment::InferHenon => "Initial-condition posteriors for Henon-Heiles",
        }
    }

    /// The committed default configuration.
    pub fn default_config(self) -> &'static str {
        match self {
            Experiment::Integrate => include_str!("../configs/integrate.toml"),
            Experiment::LorenzFan => include_str!("../configs/lorenz-fan.toml"),
            Experiment::ErrEstimator => include_str!("../configs/err-estimator.toml"),
            Experiment::TableMs => include_str!("../configs/table-ms.toml"),
            Experiment::TableWeak => include_str!("../configs/table-weak.toml"),
            Experiment::McMse => include_str!("../configs/mc-mse.toml"),
            Experiment::Chemistry => include_str!("../configs/chemistry.toml"),
            Experiment::KeplerInvariant => include_str!("../configs/kepler-invariant.toml"),
            Experiment::PendulumLongtime => include_str!("../configs/pendulum-longtime.toml"),
            Experiment::LinearPosterior => include_str!("../configs/linear-posterior.toml"),
            Experiment::InferHenon => include_str!("../configs/infer-henon.toml"),
        }
    }

    /// Accepted keys, common ones included.
    pub fn keys(self) -> Vec<KeySpec> {
        use Kind::*;
        let mut keys = vec![KeySpec::required("experiment", Str), KeySpec::optional("seed", Int, "0")];
        let specific: &[KeySpec] = match self {
            Experiment::Integrate => &[
                KeySpec::required("problem.name", Str),
                KeySpec::optional("problem.params.*", Float, "0"),
                KeySpec::optional("problem.y0", FloatList, "[]"),
                KeySpec::required("stepper", Str),
                KeySpec::optional("scheme", Str, "\"rts\""),
                KeySpec::optional("dist.law", Str, "\"uniform\""),
                KeySpec::required("dist.h", Float),
                KeySpec::optional("dist.p", Float, "1.0"),
                KeySpec::optional("noise.scale", Float, "1.0"),
                KeySpec::required("steps", Int),
            ],
            Experiment::LorenzFan => &[
                KeySpec::optional("problem.params.*", Float, "0"),
                KeySpec::required("stepper", Str),
                KeySpec::required("h", Float),
                KeySpec::required("t_final", Float),
                KeySpec::required("members", Int),
                KeySpec::required("sigmas", FloatList),
                KeySpec::optional("record_every", Int, "1"),
                KeySpec::optional("separation_threshold", Float, "1.0"),
            ],
            Experiment::ErrEstimator => &[
                KeySpec::optional("problem.name", Str, "\"lorenz\""),
                KeySpec::optional("problem.params.*", Float, "0"),
                KeySpec::required("h", Float),
                KeySpec::required("t_final", Float),
                KeySpec::required("members", Int),
                KeySpec::optional("record_every", Int, "1"),
            ],
            Experiment::TableMs => &[
                KeySpec::optional("problem.name", Str, "\"fitzhugh_nagumo\""),
                KeySpec::optional("problem.params.*", Float, "0"),
                KeySpec::required("t_final", Float),
                KeySpec::required("h0", Float),
                KeySpec::required("levels", Int),
                KeySpec::required("m", Int),
                KeySpec::optional("dist.law", Str, "\"uniform\""),
                KeySpec::required("et.p", FloatList),
                KeySpec::required("rk4.p", FloatList),
            ],
            Experiment::TableWeak => &[
                KeySpec::optional("problem.name", Str, "\"fitzhugh_nagumo\""),
                KeySpec::optional("problem.params.*", Float, "0"),
                KeySpec::required("t_final", Float),
                KeySpec::required("h0", Float),
                KeySpec::required("levels", Int),
                KeySpec::required("m", Int),
                KeySpec::optional("dist.law", Str, "\"uniform\""),
                KeySpec::required("et.p", FloatList),
                KeySpec::required("rk4.p", FloatList),
                KeySpec::optional("extended.m", Int, "1000000"),
                KeySpec::optional("extended.et.p", FloatList, "[2.0]"),
                KeySpec::optional("extended.rk4.p", FloatList, "[2.0, 3.0, 4.0]"),
            ],
            Experiment::McMse => &[
                KeySpec::optional("problem.name", Str, "\"fitzhugh_nagumo\""),
                KeySpec::optional("problem.params.*", Float, "0"),
                KeySpec::required("stepper", Str),
                KeySpec::required("t_final", Float),
                KeySpec::required("h0", Float),
                KeySpec::required("levels", Int),
                KeySpec::optional("dist.law", Str, "\"uniform\""),
                KeySpec::required("dist.p", Float),
                KeySpec::required("m", Int),
                KeySpec::required("r", Int),
            ],
            Experiment::Chemistry => &[
                KeySpec::optional("problem.params.*", Float, "0"),
                KeySpec::optional("stepper", Str, "\"rkc\""),
                KeySpec::required("h", Float),
                KeySpec::required("t_final", Float),
                KeySpec::required("members", Int),
                KeySpec::optional("dist.law", Str, "\"uniform\""),
                KeySpec::required("dist.p", Float),
                KeySpec::required("noise.p", Float),
                KeySpec::optional("noise.scale", Float, "1.0"),
                KeySpec::optional("record_every", Int, "1"),
            ],
            Experiment::KeplerInvariant => &[
                KeySpec::optional("problem.params.*", Float, "0"),
                KeySpec::optional("stepper", Str, "\"midpoint\""),
                KeySpec::required("h", Float),
                KeySpec::required("t_final", Float),
                KeySpec::optional("dist.law", Str, "\"uniform\""),
                KeySpec::required("dist.p", Float),
                KeySpec::required("noise.p", Float),
                KeySpec::optional("noise.scale", Float, "1.0"),
                KeySpec::optional("record_every", Int, "1"),
            ],
            Experiment::PendulumLongtime => &[
                KeySpec::optional("problem.params.*", Float, "0"),
                KeySpec::optional("stepper", Str, "\"midpoint\""),
                KeySpec::required("h_list", FloatList),
                KeySpec::required("t_final", Float),
                KeySpec::required("members", Int),
                KeySpec::optional("dist.law", Str, "\"uniform\""),
                KeySpec::required("dist.p", Float),
                KeySpec::optional("per_decade", Int, "64"),
                KeySpec::optional("plateau.t_min", Float, "1.0"),
                KeySpec::optional("plateau.t_max", Float, "1000.0"),
            ],
            Experiment::LinearPosterior => &[
                KeySpec::required("h", Float),
                KeySpec::required("sigmas", FloatList),
                KeySpec::optional("y0_true", Float, "1.0"),
                KeySpec::optional("p", Float, "1.0"),
                KeySpec::optional("grid_points", Int, "4001"),
            ],
            Experiment::InferHenon => &[
                KeySpec::optional("problem.params.*", Float, "0"),
                KeySpec::required("h_list", FloatList),
                KeySpec::required("methods", StrList),
                KeySpec::required("t_obs", Float),
                KeySpec::required("noise_sd", Float),
                KeySpec::required("prior_sd", Float),
                KeySpec::optional("dist.law", Str, "\"uniform\""),
                KeySpec::required("dist.p", Float),
                KeySpec::required("chain.n_steps", Int),
                KeySpec::required("chain.warmup", Int),
                KeySpec::optional("chain.proposal_scale", Float, "0.1"),
                KeySpec::optional("chain.s", Int, "1"),
                KeySpec::optional("chain.start", Str, "\"truth\""),
            ],
        };
        keys.extend_from_slice(specific);
        keys
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| ConfigError::key("experiment", format!("unknown experiment `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Adds the large-sample weak-order rows.
    pub extended: bool,
}

/// Conditions that make a `--strict` run fail after its outputs are written.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub strict_violations: Vec<String>,
}

/// A validated, ready-to-run experiment.
pub struct Plan {
    seed: u64,
    kind: PlanKind,
}

enum PlanKind {
    Integrate(IntegratePlan),
    LorenzFan(LorenzFanPlan),
    ErrEstimator(ErrEstimatorPlan),
    Table(TablePlan),
    McMse(McMsePlan),
    Chemistry(ChemistryPlan),
    Kepler(KeplerPlan),
    Pendulum(PendulumPlan),
    LinearPosterior(LinearPosteriorPlan),
    InferHenon(InferHenonPlan),
}

impl Plan {
    pub fn new(exp: Experiment, cfg: &ExperimentConfig, opts: RunOptions) -> Result<Self, CliError> {
        if cfg.str("experiment") != exp.name() {
            return Err(ConfigError::key(
                "experiment",
                format!("config is for `{}`, not `{}`", cfg.str("experiment"), exp.name()),
            )
            .into());
        }
        let kind = match exp {
            Experiment::Integrate => PlanKind::Integrate(IntegratePlan::new(cfg)?),
            Experiment::LorenzFan => PlanKind::LorenzFan(LorenzFanPlan::new(cfg)?),
            Experiment::ErrEstimator => PlanKind::ErrEstimator(ErrEstimatorPlan::new(cfg)?),
            Experiment::TableMs => PlanKind::Table(TablePlan::new(cfg, TableKind::MeanSquare, opts)?),
            Experiment::TableWeak => PlanKind::Table(TablePlan::new(cfg, TableKind::Weak, opts)?),
            Experiment::McMse => PlanKind::McMse(McMsePlan::new(cfg)?),
            Experiment::Chemistry => PlanKind::Chemistry(ChemistryPlan::new(cfg)?),
            Experiment::KeplerInvariant => PlanKind::Kepler(KeplerPlan::new(cfg)?),
            Experiment::PendulumLongtime => PlanKind::Pendulum(PendulumPlan::new(cfg)?),
            Experiment::LinearPosterior => PlanKind::LinearPosterior(LinearPosteriorPlan::new(cfg)?),
            Experiment::InferHenon => PlanKind::InferHenon(InferHenonPlan::new(cfg)?),
        };
        Ok(Plan { seed: cfg.int("seed"), kind })
    }

    pub fn run(&self, out: &mut OutputDir) -> Result<Outcome, CliError> {
        let seed = self.seed;
        match &self.kind {
            PlanKind::Integrate(p) => p.run(seed, out),
            PlanKind::LorenzFan(p) => p.run(seed, out),
            PlanKind::ErrEstimator(p) => p.run(seed, out),
            PlanKind::Table(p) => p.run(seed, out),
            PlanKind::McMse(p) => p.run(seed, out),
            PlanKind::Chemistry(p) => p.run(seed, out),
            PlanKind::Kepler(p) => p.run(seed, out),
            PlanKind::Pendulum(p) => p.run(seed, out),
            PlanKind::LinearPosterior(p) => p.run(seed, out),
            PlanKind::InferHenon(p) => p.run(seed, out),
        }
    }
}

// ---------------------------------------------------------------------------
// Config helpers mapping library errors onto the offending key.

fn problem_of(cfg: &ExperimentConfig, name: ProblemName) -> Result<OdeSystem, CliError> {
    let params: Params = cfg.float_map("problem.params");
    make_problem(name, &params).map_err(|e| match e {
        Error::InvalidParameter { name, reason } => ConfigError::key(&format!("problem.params.{name}"), reason).into(),
        other => CliError::Core(other),
    })
}

fn named_problem(cfg: &ExperimentConfig) -> Result<OdeSystem, CliError> {
    let name: ProblemName =
        cfg.str("problem.name").parse().map_err(|e: Error| ConfigError::key("problem.name", e.to_string()))?;
    problem_of(cfg, name)
}

fn stepper_of(cfg: &ExperimentConfig, key: &str) -> Result<Stepper, CliError> {
    cfg.str(key).parse().map_err(|e: Error| {
        ConfigError::key(key, format!("{e}; expected one of {}", Stepper::NAMES.join(", "))).into()
    })
}

fn law_of(cfg: &ExperimentConfig) -> Result<StepLaw, CliError> {
    cfg.str("dist.law").parse().map_err(|e: Error| ConfigError::key("dist.law", e.to_string()).into())
}

fn dist_of(law: StepLaw, h: f64, p: f64, key: &str) -> Result<StepDistribution, CliError> {
    StepDistribution::new(law, h, p).map_err(|e| ConfigError::key(key, e.to_string()).into())
}

fn steps_of(h: f64, t_final: f64) -> Result<usize, CliError> {
    EnsembleConfig::steps_for_horizon(h, t_final).map_err(|e| ConfigError::key("t_final", e.to_string()).into())
}

fn halving_grid(cfg: &ExperimentConfig) -> Result<Vec<f64>, CliError> {
    let h0 = cfg.positive("h0")?;
    let levels = cfg.usize("levels");
    if levels < 3 {
        return Err(ConfigError::key("levels", "a convergence study needs at least 3 step sizes").into());
    }
    Ok((0..levels).map(|i| h0 * 0.5f64.powi(i as i32)).collect())
}

fn phi_squared(y: &[f64]) -> f64 {
    y.iter().map(|x| x * x).sum()
}

/// Component header `y0,y1,...`.
fn state_header(prefix: &str, d: usize) -> Vec<String> {
    (0..d).map(|i| format!("{prefix}{i}")).collect()
}

// ---------------------------------------------------------------------------

struct IntegratePlan {
    system: OdeSystem,
    y0: Vec<f64>,
    stepper: Stepper,
    scheme: Scheme,
    steps: usize,
}

impl IntegratePlan {
    fn new(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let system = named_problem(cfg)?;
        let y0 = match cfg.floats("problem.y0") {
            v if v.is_empty() => system.default_y0().to_vec(),
            v if v.len() == system.dim() => v,
            v => {
                return Err(ConfigError::key(
                    "problem.y0",
                    format!("{} has dimension {}, got {} values", system.name(), system.dim(), v.len()),
                )
                .into())
            }
        };
        let stepper = stepper_of(cfg, "stepper")?;
        let h = cfg.positive("dist.h")?;
        let p = cfg.float("dist.p");
        let scheme = match cfg.str("scheme") {
            "det" => Scheme::deterministic(h)?,
            "rts" => Scheme::rts(dist_of(law_of(cfg)?, h, p, "dist.p")?),
            "add" => Scheme::additive_scaled(h, p, cfg.float("noise.scale"))
                .map_err(|e| ConfigError::key("noise.scale", e.to_string()))?,
            other => return Err(ConfigError::key("scheme", format!("`{other}` is not one of det, rts, add")).into()),
        };
        if matches!(stepper, Stepper::StormerVerlet(_)) && system.hamiltonian_structure().is_none() {
            return Err(ConfigError::key("stepper", "verlet needs a Hamiltonian problem").into());
        }
        Ok(Self { system, y0, stepper, scheme, steps: cfg.count("steps")? })
    }

    fn run(&self, seed: u64, out: &mut OutputDir) -> Result<Outcome, CliError> {
        let mut rng = RngStream::new(seed, 0);
        let rng = self.scheme.is_random().then_some(&mut rng);
        let traj = integrate(&self.stepper, &self.scheme, &self.system, &self.y0, self.steps, rng, &Recording::Full)?;
        let mut header = vec!["k".to_string(), "t_nominal".into(), "t_realized".into()];
        header.extend(state_header("y", traj.dim()));
        let mut csv = Csv::new(&header);
        let nominal = traj.nominal_times();
        let realized = traj.realized_times();
        for (k, y) in traj.states().enumerate() {
            let mut row = vec![k as f64, nominal[k], realized[k]];
            row.extend_from_slice(y);
            csv.numbers(&row);
        }
        out.write_csv("trajectory.csv", &csv)?;
        let integrals: BTreeMap<String, f64> = self
            .system
            .integrals()
            .iter()
            .map(|i| Ok((i.name().to_string(), (i.eval(traj.final_state())? - i.eval(traj.initial_state())?).abs())))
            .collect::<Result<_, Error>>()?;
        #[derive(Serialize)]
        struct Summary<'a> {
            problem: &'a str,
            scheme: &'a str,
            steps: usize,
            final_state: &'a [f64],
            final_time: f64,
            integral_drift: BTreeMap<String, f64>,
        }
        out.write_json(
            "summary.json",
            &Summary {
                problem: self.system.name(),
                scheme: traj.scheme().as_str(),
                steps: self.steps,
                final_state: traj.final_state(),
                final_time: *realized.last().expect("non-empty"),
                integral_drift: integrals,
            },
        )?;
        Ok(Outcome::default())
    }
}

// ---------------------------------------------------------------------------

struct LorenzFanPlan {
    system: OdeSystem,
    stepper: Stepper,
    h: f64,
    t_final: f64,
    members: usize,
    sigmas: Vec<f64>,
    record_every: usize,
    threshold: f64,
}

impl LorenzFanPlan {
    fn new(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let h = cfg.positive("h")?;
        let t_final = cfg.positive("t_final")?;
        steps_of(h, t_final)?;
        let sigmas = cfg.floats("sigmas");
        if sigmas.is_empty() || sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(ConfigError::key("sigmas", "need at least one non-negative scale").into());
        }
        Ok(Self {
            system: problem_of(cfg, ProblemName::Lorenz)?,
            stepper: stepper_of(cfg, "stepper")?,
            h,
            t_final,
            members: cfg.count("members")?,
            sigmas,
            record_every: cfg.count("record_every")?,
            threshold: cfg.positive("separation_threshold")?,
        })
    }

    fn run(&self, seed: u64, out: &mut OutputDir) -> Result<Outcome, CliError> {
        #[derive(Serialize)]
        struct FanSummary {
            sigma: f64,
            file: String,
            /// First time the spread of x across members exceeds the threshold.
            separation_time: Option<f64>,
        }
        let mut summary = Vec::new();
        for (i, &sigma) in self.sigmas.iter().enumerate() {
            let fan = initial_condition_fan(
                &self.stepper,
                &self.system,
                self.h,
                self.t_final,
                sigma,
                self.members,
                derive_seed(seed, i as u64),
            )?;
            let mut header = vec!["t".to_string()];
            header.extend(state_header("x", self.members));
            let mut csv = Csv::new(&header);
            let n = fan[0].n_steps();
            let mut separation = None;
            for k in 0..=n {
                let xs: Vec<f64> = fan.iter().map(|t| t.stored(k)[0]).collect();
                let spread = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    - xs.iter().copied().fold(f64::INFINITY, f64::min);
                if separation.is_none() && spread > self.threshold {
                    separation = Some(k as f64 * self.h);
                }
                if k % self.record_every == 0 || k == n {
                    let mut row = vec![k as f64 * self.h];
                    row.extend(xs);
                    csv.numbers(&row);
                }
            }
            let file = format!("fan_{i}.csv");
            out.write_csv(&file, &csv)?;
            summary.push(FanSummary { sigma, file, separation_time: separation });
        }
        out.write_json("summary.json", &summary)?;
        Ok(Outcome::default())
    }
}

// ---------------------------------------------------------------------------

struct ErrEstimatorPlan {
    system: OdeSystem,
    h: f64,
    t_final: f64,
    members: usize,
    record_every: usize,
}

impl ErrEstimatorPlan {
    fn new(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let h = cfg.positive("h")?;
        let t_final = cfg.positive("t_final")?;
        steps_of(h, t_final)?;
        let members = cfg.count("members")?;
        if members < 2 {
            return Err(ConfigError::key("members", "the spread needs at least 2 members").into());
        }
        Ok(Self { system: named_problem(cfg)?, h, t_final, members, record_every: cfg.count("record_every")? })
    }

    fn run(&self, seed: u64, out: &mut OutputDir) -> Result<Outcome, CliError> {
        let c = error_estimator_comparison(&self.system, self.h, self.t_final, self.members, seed)?;
        let mut csv = Csv::new(&["t", "embedded", "spread", "true_error"]);
        let n = c.times.len() - 1;
        for k in (0..=n).filter(|k| k % self.record_every == 0 || *k == n) {
            csv.numbers(&[c.times[k], c.embedded[k], c.spread[k], c.true_error[k]]);
        }
        out.write_csv("series.csv", &csv)?;
        // Log10 ratio of each indicator to the true error over the second half.
        let half = n / 2;
        let log_ratio = |v: &[f64]| {
            let r: Vec<f64> = (half..=n)
                .filter(|&k| v[k] > 0.0 && c.true_error[k] > 0.0)
                .map(|k| (v[k] / c.true_error[k]).log10())
                .collect();
            if r.is_empty() {
                f64::NAN
            } else {
                r.iter().sum::<f64>() / r.len() as f64
            }
        };
        #[derive(Serialize)]
        struct Summary {
            final_embedded: f64,
            final_spread: f64,
            final_true_error: f64,
            mean_log10_ratio_embedded: f64,
            mean_log10_ratio_spread: f64,
        }
        out.write_json(
            "summary.json",
            &Summary {
                final_embedded: c.embedded[n],
                final_spread: c.spread[n],
                final_true_error: c.true_error[n],
                mean_log10_ratio_embedded: log_ratio(&c.embedded),
                mean_log10_ratio_spread: log_ratio(&c.spread),
            },
        )?;
        Ok(Outcome::default())
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TableKind {
    MeanSquare,
    Weak,
}

struct TableRow {
    method: &'static str,
    stepper: Stepper,
    p: f64,
    m: usize,
}

struct TablePlan {
    kind: TableKind,
    system: OdeSystem,
    t_final: f64,
    grid: Vec<f64>,
    law: StepLaw,
    rows: Vec<TableRow>,
}

impl TablePlan {
    fn new(cfg: &ExperimentConfig, kind: TableKind, opts: RunOptions) -> Result<Self, CliError> {
        let system = named_problem(cfg)?;
        let t_final = cfg.positive("t_final")?;
        let grid = halving_grid(cfg)?;
        for &h in &grid {
            steps_of(h, t_final)?;
        }
        let law = law_of(cfg)?;
        let m = cfg.count("m")?;
        let mut rows = Vec::new();
        let mut add_rows = |key: &str, method: &'static str, stepper: &str, m: usize| -> Result<(), CliError> {
            for p in cfg.floats(key) {
                dist_of(law, grid[0], p, key)?;
                rows.push(TableRow { method, stepper: stepper.parse()?, p, m });
            }
            Ok(())
        };
        add_rows("et.p", "ET", "heun", m)?;
        add_rows("rk4.p", "RK4", "rk4", m)?;
        if kind == TableKind::Weak && opts.extended {
            let m_ext = cfg.count("extended.m")?;
            add_rows("extended.et.p", "ET", "heun", m_ext)?;
            add_rows("extended.rk4.p", "RK4", "rk4", m_ext)?;
        }
        if rows.is_empty() {
            return Err(ConfigError::key("et.p", "no rows to run").into());
        }
        Ok(Self { kind, system, t_final, grid, law, rows })
    }

    fn run(&self, seed: u64, out: &mut OutputDir) -> Result<Outcome, CliError> {
        #[derive(Serialize)]
        struct Cell<'a> {
            method: &'a str,
            p: f64,
            m: usize,
            fitted_order: f64,
            theory_order: f64,
            flagged_points: usize,
            failed_trajectories: usize,
            study: &'a ConvergenceStudy,
        }
        let mut studies = Vec::new();
        for (i, row) in self.rows.iter().enumerate() {
            let dist = StepDistribution::new(self.law, self.grid[0], row.p)?;
            let setup = StudySetup::new(row.stepper.clone(), dist, self.system.clone(), self.t_final, self.grid.clone())
                .with_m(row.m)
                .with_seed(derive_seed(seed, i as u64));
            let study = match self.kind {
                TableKind::MeanSquare => study_mean_square(&setup)?,
                TableKind::Weak => study_weak(&setup, &phi_squared)?,
            };
            studies.push(study);
        }
        let mut csv = Csv::new(&["method", "p", "h", "error", "std_error", "flagged"]);
        let mut outcome = Outcome::default();
        let mut cells = Vec::new();
        for (row, s) in self.rows.iter().zip(&studies) {
            for j in 0..s.h_grid.len() {
                csv.row(&[
                    row.method.to_string(),
                    num(row.p),
                    num(s.h_grid[j]),
                    num(s.errors[j]),
                    num(s.std_errors[j]),
                    u8::from(s.flagged[j]).to_string(),
                ]);
            }
            let flagged = s.flagged.iter().filter(|&&f| f).count();
            if flagged > 0 {
                outcome.strict_violations.push(format!("{} p={}: {flagged} noise-flagged points", row.method, row.p));
            }
            if s.failed > 0 {
                outcome.strict_violations.push(format!("{} p={}: {} failed trajectories", row.method, row.p, s.failed));
            }
            cells.push(Cell {
                method: row.method,
                p: row.p,
                m: row.m,
                fitted_order: s.fitted_order,
                theory_order: s.theory_order,
                flagged_points: flagged,
                failed_trajectories: s.failed,
                study: s,
            });
        }
        out.write_csv("table.csv", &csv)?;
        out.write_json("table.json", &cells)?;
        Ok(outcome)
    }
}

// ---------------------------------------------------------------------------

struct McMsePlan {
    setup: StudySetup,
    r: usize,
}

impl McMsePlan {
    fn new(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let system = named_problem(cfg)?;
        let t_final = cfg.positive("t_final")?;
        let grid = halving_grid(cfg)?;
        for &h in &grid {
            steps_of(h, t_final)?;
        }
        let dist = dist_of(law_of(cfg)?, grid[0], cfg.float("dist.p"), "dist.p")?;
        let r = cfg.usize("r");
        if r < 16 {
            return Err(ConfigError::key("r", "need at least 16 replicas").into());
        }
        let setup = StudySetup::new(stepper_of(cfg, "stepper")?, dist, system, t_final, grid).with_m(cfg.count("m")?);
        Ok(Self { setup, r })
    }

    fn run(&self, seed: u64, out: &mut OutputDir) -> Result<Outcome, CliError> {
        let setup = self.setup.clone().with_seed(seed);
        let study = study_estimator_mse(&setup, self.r, &phi_squared)?;
        let q = setup.stepper.order() as f64;
        let theory = mse_theory_curve(&study.h_grid, setup.dist.p(), q, setup.m);
        let mut csv = Csv::new(&["h", "mse", "std_error", "theory"]);
        for j in 0..study.h_grid.len() {
            csv.numbers(&[study.h_grid[j], study.errors[j], study.std_errors[j], theory[j]]);
        }
        out.write_csv("mse.csv", &csv)?;
        #[derive(Serialize)]
        struct Summary<'a> {
            fitted_order: f64,
            fine_order: f64,
            broken_line: Option<BrokenLineFit>,
            m: usize,
            r: usize,
            study: &'a ConvergenceStudy,
        }
        let tail = study.h_grid.len().saturating_sub(3);
        let fine_order = fit_order(&study.h_grid[tail..], &study.errors[tail..])?;
        out.write_json(
            "summary.json",
            &Summary {
                fitted_order: study.fitted_order,
                fine_order,
                broken_line: fit_broken_line(&study.h_grid, &study.errors).ok(),
                m: setup.m,
                r: self.r,
                study: &study,
            },
        )?;
        let mut outcome = Outcome::default();
        if study.failed > 0 {
            outcome.strict_violations.push(format!("{} failed trajectories", study.failed));
        }
        Ok(outcome)
    }
}

// ---------------------------------------------------------------------------

/// Runs `members` trajectories (member `i` on stream `i`), recording the
/// chosen component every `every` steps and `NaN` after a breakdown.
fn component_series(
    cfg: &EnsembleConfig,
    members: usize,
    seed: u64,
    component: usize,
    every: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = cfg.n_steps;
    let h = cfg.scheme.nominal_h();
    let ks: Vec<usize> = (0..=n).filter(|k| k % every == 0 || *k == n).collect();
    let series: Vec<Vec<f64>> = (0..members as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::new(seed, i);
            let mut values = vec![f64::NAN; ks.len()];
            let mut cursor = 0;
            let _ = propagate(&cfg.stepper, &cfg.scheme, &cfg.system, &cfg.y0, n, Some(&mut rng), |k, y, _| {
                if cursor < ks.len() && ks[cursor] == k {
                    values[cursor] = y[component];
                    cursor += 1;
                }
            });
            values
        })
        .collect();
    (ks.iter().map(|&k| k as f64 * h).collect(), series)
}

fn series_csv(times: &[f64], series: &[Vec<f64>]) -> Csv {
    let mut header = vec!["t".to_string()];
    header.extend(state_header("member", series.len()));
    let mut csv = Csv::new(&header);
    for (j, t) in times.iter().enumerate() {
        let mut row = vec![*t];
        row.extend(series.iter().map(|s| s[j]));
        csv.numbers(&row);
    }
    csv
}

struct ChemistryPlan {
    rts: EnsembleConfig,
    additive: EnsembleConfig,
    members: usize,
    record_every: usize,
}

impl ChemistryPlan {
    fn new(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let system = problem_of(cfg, ProblemName::OlsenPeroxide)?;
        let stepper = stepper_of(cfg, "stepper")?;
        let h = cfg.positive("h")?;
        let n = steps_of(h, cfg.positive("t_final")?)?;
        let dist = dist_of(law_of(cfg)?, h, cfg.float("dist.p"), "dist.p")?;
        let additive = Scheme::additive_scaled(h, cfg.float("noise.p"), cfg.float("noise.scale"))
            .map_err(|e| ConfigError::key("noise.p", e.to_string()))?;
        Ok(Self {
            rts: EnsembleConfig::new(stepper.clone(), Scheme::rts(dist), system.clone(), n),
            additive: EnsembleConfig::new(stepper, additive, system, n),
            members: cfg.count("members")?,
            record_every: cfg.count("record_every")?,
        })
    }

    fn run(&self, seed: u64, out: &mut OutputDir) -> Result<Outcome, CliError> {
        // Species X is the third component.
        const X: usize = 2;
        let (rts_seed, add_seed) = (derive_seed(seed, 0), derive_seed(seed, 1));
        let (t, rts) = component_series(&self.rts, self.members, rts_seed, X, self.record_every);
        out.write_csv("x_rts.csv", &series_csv(&t, &rts))?;
        let (t, add) = component_series(&self.additive, self.members, add_seed, X, self.record_every);
        out.write_csv("x_additive.csv", &series_csv(&t, &add))?;
        #[derive(Serialize)]
        struct Summary {
            rts: PositivityReport,
            additive: PositivityReport,
        }
        let summary = Summary {
            rts: positivity_report(&self.rts, self.members, rts_seed)?,
            additive: positivity_report(&self.additive, self.members, add_seed)?,
        };
        out.write_json("positivity.json", &summary)?;
        let mut outcome = Outcome::default();
        if summary.rts.failed > 0 {
            outcome.strict_violations.push(format!("{} random-step trajectories failed", summary.rts.failed));
        }
        Ok(outcome)
    }
}

// ---------------------------------------------------------------------------

struct KeplerPlan {
    system: OdeSystem,
    stepper: Stepper,
    rts: Scheme,
    additive: Scheme,
    n: usize,
    record_every: usize,
}

#[derive(Serialize)]
struct DriftSummary {
    max_drift: f64,
    final_drift: f64,
    /// Step at which the run broke down, if it did.
    failed_at: Option<usize>,
}

impl KeplerPlan {
    fn new(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let system = problem_of(cfg, ProblemName::KeplerPerturbed)?;
        let h = cfg.positive("h")?;
        let n = steps_of(h, cfg.positive("t_final")?)?;
        let dist = dist_of(law_of(cfg)?, h, cfg.float("dist.p"), "dist.p")?;
        let additive = Scheme::additive_scaled(h, cfg.float("noise.p"), cfg.float("noise.scale"))
            .map_err(|e| ConfigError::key("noise.p", e.to_string()))?;
        Ok(Self {
            system,
            stepper: stepper_of(cfg, "stepper")?,
            rts: Scheme::rts(dist),
            additive,
            n,
            record_every: cfg.count("record_every")?,
        })
    }

    /// Integrates once, returning recorded states, drift series and summary.
    fn trace(&self, scheme: &Scheme, seed: u64) -> Result<(Vec<Vec<f64>>, Vec<f64>, DriftSummary), CliError> {
        let am = self.system.integral("angular_momentum").expect("kepler carries its angular momentum").clone();
        let y0 = self.system.default_y0().to_vec();
        let i0 = am.eval(&y0)?;
        let mut rng = RngStream::new(seed, 0);
        let mut states = Vec::new();
        let mut drift = Vec::new();
        let mut max_drift: f64 = 0.0;
        let mut last = 0.0;
        let (n, every) = (self.n, self.record_every);
        let result = propagate(&self.stepper, scheme, &self.system, &y0, n, Some(&mut rng), |k, y, _| {
            let d = (am.eval(y).unwrap_or(f64::NAN) - i0).abs();
            max_drift = max_drift.max(d);
            last = d;
            if k % every == 0 || k == n {
                states.push(y.to_vec());
                drift.push(d);
            }
        });
        let failed_at = match result {
            Ok(_) => None,
            Err(Error::Divergence { step, .. } | Error::NewtonFailure { step, .. } | Error::FixedPointFailure { step, .. }) => {
                Some(step)
            }
            Err(e) => return Err(e.into()),
        };
        Ok((states, drift, DriftSummary { max_drift, final_drift: last, failed_at }))
    }

    fn run(&self, seed: u64, out: &mut OutputDir) -> Result<Outcome, CliError> {
        let h = self.rts.nominal_h();
        let (rts_states, rts_drift, rts_sum) = self.trace(&self.rts, derive_seed(seed, 0))?;
        let (add_states, add_drift, add_sum) = self.trace(&self.additive, derive_seed(seed, 1))?;
        let rows = rts_states.len();
        let t = |j: usize| (j * self.record_every).min(self.n) as f64 * h;
        let mut drift = Csv::new(&["t", "rts", "additive"]);
        for j in 0..rows {
            drift.numbers(&[t(j), rts_drift[j], add_drift.get(j).copied().unwrap_or(f64::NAN)]);
        }
        out.write_csv("drift.csv", &drift)?;
        for (name, states) in [("orbit_rts.csv", &rts_states), ("orbit_additive.csv", &add_states)] {
            let mut csv = Csv::new(&["t", "v1", "v2", "w1", "w2"]);
            for (j, y) in states.iter().enumerate() {
                csv.numbers(&[t(j), y[0], y[1], y[2], y[3]]);
            }
            out.write_csv(name, &csv)?;
        }
        #[derive(Serialize)]
        struct Summary {
            rts: DriftSummary,
            additive: DriftSummary,
            final_ratio: f64,
        }
        let final_ratio = add_sum.final_drift / rts_sum.final_drift;
        let mut outcome = Outcome::default();
        if rts_sum.failed_at.is_some() {
            outcome.strict_violations.push("random-step trajectory broke down".into());
        }
        out.write_json("summary.json", &Summary { rts: rts_sum, additive: add_sum, final_ratio })?;
        Ok(outcome)
    }
}

// ---------------------------------------------------------------------------

struct PendulumPlan {
    system: OdeSystem,
    stepper: Stepper,
    law: StepLaw,
    p: f64,
    h_list: Vec<f64>,
    t_final: f64,
    members: usize,
    per_decade: usize,
    window: (f64, f64),
}

impl PendulumPlan {
    fn new(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let system = problem_of(cfg, ProblemName::Pendulum)?;
        let t_final = cfg.positive("t_final")?;
        let h_list = cfg.floats("h_list");
        if h_list.is_empty() {
            return Err(ConfigError::key("h_list", "need at least one step size").into());
        }
        let law = law_of(cfg)?;
        let p = cfg.float("dist.p");
        for &h in &h_list {
            if !(h > 0.0) {
                return Err(ConfigError::key("h_list", "step sizes must be positive").into());
            }
            steps_of(h, t_final)?;
            dist_of(law, h, p, "dist.p")?;
        }
        let window = (cfg.float("plateau.t_min"), cfg.float("plateau.t_max"));
        if !(window.0 < window.1) {
            return Err(ConfigError::key("plateau.t_max", "must exceed plateau.t_min").into());
        }
        Ok(Self {
            system,
            stepper: stepper_of(cfg, "stepper")?,
            law,
            p,
            h_list,
            t_final,
            members: cfg.count("members")?,
            per_decade: cfg.count("per_decade")?,
            window,
        })
    }

    fn run(&self, seed: u64, out: &mut OutputDir) -> Result<Outcome, CliError> {
        let ham = self.system.hamiltonian_structure().expect("pendulum is Hamiltonian").clone();
        #[derive(Serialize)]
        struct Level {
            h: f64,
            plateau: f64,
            plateau_max: f64,
            final_error: f64,
        }
        let mut csv = Csv::new(&["h", "t", "mean_error"]);
        let mut levels = Vec::new();
        for (i, &h) in self.h_list.iter().enumerate() {
            let n = steps_of(h, self.t_final)?;
            let dist = StepDistribution::new(self.law, h, self.p)?;
            let cfg = EnsembleConfig::new(self.stepper.clone(), Scheme::rts(dist), self.system.clone(), n);
            let series = hamiltonian_error_longtime(&cfg, &ham, self.members, derive_seed(seed, i as u64), self.per_decade)?;
            for (t, v) in series.times.iter().zip(&series.values) {
                csv.numbers(&[h, *t, *v]);
            }
            levels.push(Level {
                h,
                plateau: series.mean_over(self.window.0, self.window.1),
                plateau_max: series.max_over(self.window.0, self.window.1),
                final_error: series.last(),
            });
        }
        out.write_csv("energy_error.csv", &csv)?;
        let ratios: Vec<f64> = levels.windows(2).map(|w| w[0].plateau / w[1].plateau).collect();
        #[derive(Serialize)]
        struct Summary {
            levels: Vec<Level>,
            /// Plateau ratios of consecutive step sizes.
            plateau_ratios: Vec<f64>,
        }
        out.write_json("summary.json", &Summary { levels, plateau_ratios: ratios })?;
        Ok(Outcome::default())
    }
}

// ---------------------------------------------------------------------------

struct LinearPosteriorPlan {
    h: f64,
    sigmas: Vec<f64>,
    y0_true: f64,
    p: f64,
    grid_points: usize,
}

impl LinearPosteriorPlan {
    fn new(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let h = cfg.float("h");
        if !(h > 0.0 && h < 1.0) {
            return Err(ConfigError::key("h", "must lie in (0, 1)").into());
        }
        let sigmas = cfg.floats("sigmas");
        if sigmas.is_empty() || sigmas.iter().any(|s| !(*s > 0.0)) {
            return Err(ConfigError::key("sigmas", "need at least one positive noise level").into());
        }
        let p = cfg.float("p");
        StepDistribution::uniform(h, p).map_err(|e| ConfigError::key("p", e.to_string()))?;
        rts_limit_support(h, p, 1.0).map_err(|e| ConfigError::key("h", e.to_string()))?;
        let grid_points = cfg.usize("grid_points");
        if grid_points < 16 {
            return Err(ConfigError::key("grid_points", "need at least 16 points").into());
        }
        Ok(Self { h, sigmas, y0_true: cfg.float("y0_true"), p, grid_points })
    }

    fn run(&self, seed: u64, out: &mut OutputDir) -> Result<Outcome, CliError> {
        // One standard normal shared by every noise level.
        let z = RngStream::new(seed, 0).standard_normal();
        let clean = (-self.h).exp() * self.y0_true;
        #[derive(Serialize)]
        struct Level {
            sigma: f64,
            d: f64,
            file: String,
            gaussian: BTreeMap<&'static str, (f64, f64)>,
            rts_window: (f64, f64),
        }
        let mut levels = Vec::new();
        for (i, &sigma) in self.sigmas.iter().enumerate() {
            let d = clean + sigma * z;
            let posts = PosteriorKind::ALL
                .iter()
                .map(|&k| linear_analytic_posterior(k, self.h, sigma, d, self.p))
                .collect::<Result<Vec<_>, _>>()?;
            let lo = posts.iter().map(|p| p.window().0).fold(f64::INFINITY, f64::min);
            let hi = posts.iter().map(|p| p.window().1).fold(f64::NEG_INFINITY, f64::max);
            let dx = (hi - lo) / (self.grid_points - 1) as f64;
            let mut header = vec!["theta".to_string()];
            header.extend(PosteriorKind::ALL.iter().map(|k| k.as_str().to_string()));
            let mut csv = Csv::new(&header);
            for j in 0..self.grid_points {
                let x = lo + j as f64 * dx;
                let mut row = vec![x];
                row.extend(posts.iter().map(|p| p.density(x)));
                csv.numbers(&row);
            }
            let file = format!("density_{i}.csv");
            out.write_csv(&file, &csv)?;
            let gaussian = posts
                .iter()
                .filter_map(|p| p.mean_variance().map(|mv| (p.kind().as_str(), mv)))
                .collect();
            let rts_window = posts.last().expect("four kinds").window();
            levels.push(Level { sigma, d, file, gaussian, rts_window });
        }
        let limit = rts_limit_density(self.h, self.p, self.y0_true, self.grid_points)?;
        let mut csv = Csv::new(&["theta", "density"]);
        for (x, v) in limit.x.iter().zip(&limit.density) {
            csv.numbers(&[*x, *v]);
        }
        out.write_csv("rts_limit.csv", &csv)?;
        #[derive(Serialize)]
        struct Limits {
            deterministic_point: f64,
            additive_mean_variance: (f64, f64),
            rts_support: (f64, f64),
        }
        #[derive(Serialize)]
        struct Summary {
            z: f64,
            levels: Vec<Level>,
            small_noise_limits: Limits,
        }
        let limits = Limits {
            deterministic_point: deterministic_limit(self.h, self.y0_true),
            additive_mean_variance: additive_limit(self.h, self.p, self.y0_true),
            rts_support: rts_limit_support(self.h, self.p, self.y0_true)?,
        };
        out.write_json("summary.json", &Summary { z, levels, small_noise_limits: limits })?;
        Ok(Outcome::default())
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HenonMethod {
    Heun,
    Verlet,
    VerletRts,
}

impl HenonMethod {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "heun" => Some(HenonMethod::Heun),
            "verlet" => Some(HenonMethod::Verlet),
            "verlet_rts" => Some(HenonMethod::VerletRts),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            HenonMethod::Heun => "heun",
            HenonMethod::Verlet => "verlet",
            HenonMethod::VerletRts => "verlet_rts",
        }
    }
}

struct InferHenonPlan {
    system: OdeSystem,
    h_list: Vec<f64>,
    methods: Vec<HenonMethod>,
    t_obs: f64,
    noise_sd: f64,
    prior_sd: f64,
    law: StepLaw,
    p: f64,
    mcmc: McmcConfig,
    s: usize,
    start_at_truth: bool,
}

impl InferHenonPlan {
    fn new(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let system = problem_of(cfg, ProblemName::HenonHeiles)?;
        let t_obs = cfg.positive("t_obs")?;
        let h_list = cfg.floats("h_list");
        if h_list.is_empty() {
            return Err(ConfigError::key("h_list", "need at least one step size").into());
        }
        let law = law_of(cfg)?;
        let p = cfg.float("dist.p");
        for &h in &h_list {
            if !(h > 0.0) {
                return Err(ConfigError::key("h_list", "step sizes must be positive").into());
            }
            EnsembleConfig::steps_for_horizon(h, t_obs).map_err(|e| ConfigError::key("t_obs", e.to_string()))?;
            dist_of(law, h, p, "dist.p")?;
        }
        let methods = cfg
            .strs("methods")
            .iter()
            .map(|m| {
                HenonMethod::parse(m).ok_or_else(|| {
                    ConfigError::key("methods", format!("`{m}` is not one of heun, verlet, verlet_rts"))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if methods.is_empty() {
            return Err(ConfigError::key("methods", "need at least one method").into());
        }
        let scale = cfg.positive("chain.proposal_scale")?;
        let mcmc = McmcConfig::new(cfg.count("chain.n_steps")?, cfg.usize("chain.warmup"), scale);
        let start_at_truth = match cfg.str("chain.start") {
            "truth" => true,
            "prior_mean" => false,
            other => {
                return Err(ConfigError::key("chain.start", format!("`{other}` is not one of truth, prior_mean")).into())
            }
        };
        Ok(Self {
            system,
            h_list,
            methods,
            t_obs,
            noise_sd: cfg.positive("noise_sd")?,
            prior_sd: cfg.positive("prior_sd")?,
            law,
            p,
            mcmc,
            s: cfg.count("chain.s")?,
            start_at_truth,
        })
    }

    fn run(&self, seed: u64, out: &mut OutputDir) -> Result<Outcome, CliError> {
        let truth = self.system.default_y0().to_vec();
        let data = synthetic_ivp(&self.system, &truth, self.t_obs, self.noise_sd, self.prior_sd, derive_seed(seed, 0))?;
        let prior = GaussianPrior::isotropic(data.prior_mean.clone(), self.prior_sd)?;
        let noise = Covariance::isotropic(truth.len(), self.noise_sd * self.noise_sd)?;
        let mut mcmc = self.mcmc.clone();
        if self.start_at_truth {
            mcmc = mcmc.with_initial(truth.clone());
        }
        let jobs: Vec<(HenonMethod, f64, u64)> = self
            .methods
            .iter()
            .flat_map(|&m| self.h_list.iter().map(move |&h| (m, h)))
            .enumerate()
            .map(|(i, (m, h))| (m, h, derive_seed(seed, 1 + i as u64)))
            .collect();
        let chains: Vec<Result<Chain, Error>> = jobs
            .par_iter()
            .map(|&(method, h, job_seed)| {
                let stepper: Stepper = match method {
                    HenonMethod::Heun => "heun".parse()?,
                    HenonMethod::Verlet | HenonMethod::VerletRts => "verlet".parse()?,
                };
                let ip = InverseProblem::initial_condition(
                    self.system.clone(),
                    stepper,
                    self.t_obs,
                    prior.clone(),
                    noise.clone(),
                    data.data.clone(),
                )?;
                match method {
                    HenonMethod::VerletRts => {
                        pmmh(&ip, &StepDistribution::new(self.law, h, self.p)?, self.s, &mcmc, job_seed)
                    }
                    _ => rwmh(&ip, h, &mcmc, job_seed),
                }
            })
            .collect();
        #[derive(Serialize)]
        struct ChainSummary {
            method: &'static str,
            h: f64,
            file: String,
            kind: &'static str,
            acceptance_rate: f64,
            proposal_scale: f64,
            mean: Vec<f64>,
            sd: Vec<f64>,
            warnings: Vec<String>,
        }
        let mut outcome = Outcome::default();
        let mut summaries = Vec::new();
        for ((method, h, _), chain) in jobs.iter().zip(chains) {
            let chain = chain?;
            let file = format!("chain_{}_h{}.csv", method.name(), h);
            let mut buf = Vec::new();
            chain.write_csv(&mut buf).expect("writing to memory");
            out.write_text(&file, &String::from_utf8(buf).expect("ascii csv"))?;
            let mean = chain.mean();
            let n = chain.len() as f64;
            let sd = (0..mean.len())
                .map(|i| (chain.samples.iter().map(|s| (s[i] - mean[i]).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt())
                .collect();
            for w in &chain.warnings {
                outcome.strict_violations.push(format!("{} h={h}: {w}", method.name()));
            }
            summaries.push(ChainSummary {
                method: method.name(),
                h: *h,
                file,
                kind: chain.kind.as_str(),
                acceptance_rate: chain.acceptance_rate,
                proposal_scale: chain.proposal_scale,
                mean,
                sd,
                warnings: chain.warnings.clone(),
            });
        }
        #[derive(Serialize)]
        struct Summary {
            truth: Vec<f64>,
            observation_clean: Vec<f64>,
            data: Vec<f64>,
            prior_mean: Vec<f64>,
            prior_sd: f64,
            chains: Vec<ChainSummary>,
        }
        out.write_json(
            "summary.json",
            &Summary {
                truth,
                observation_clean: data.clean,
                data: data.data,
                prior_mean: data.prior_mean,
                prior_sd: self.prior_sd,
                chains: summaries,
            },
        )?;
        Ok(outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RawConfig;

    #[test]
    fn names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
        assert!("nope".parse::<Experiment>().is_err());
    }

    #[test]
    fn every_default_config_validates_and_plans() {
        for e in Experiment::ALL {
            let raw = RawConfig::parse(e.default_config()).unwrap_or_else(|err| panic!("{e}: {err}"));
            let cfg = ExperimentConfig::validate(&raw, &e.keys()).unwrap_or_else(|err| panic!("{e}: {err}"));
            for extended in [false, true] {
                Plan::new(e, &cfg, RunOptions { extended }).unwrap_or_else(|err| panic!("{e}: {err}"));
            }
        }
    }

    #[test]
    fn default_configs_list_their_experiment() {
        for e in Experiment::ALL {
            let raw = RawConfig::parse(e.default_config()).unwrap();
            assert_eq!(raw.get("experiment").and_then(|v| v.as_str()), Some(e.name()));
        }
    }

    #[test]
    fn semantic_errors_name_the_key() {
        let plan_err = |exp: Experiment, edit: &str| {
            let mut raw = RawConfig::parse(exp.default_config()).unwrap();
            raw.apply_override(edit).unwrap();
            let cfg = ExperimentConfig::validate(&raw, &exp.keys()).unwrap();
            match Plan::new(exp, &cfg, RunOptions::default()) {
                Err(CliError::Config(e)) => e.offending_key().map(str::to_string),
                Err(other) => panic!("unexpected error {other}"),
                Ok(_) => None,
            }
        };
        assert_eq!(plan_err(Experiment::Integrate, "stepper=rk5").as_deref(), Some("stepper"));
        assert_eq!(plan_err(Experiment::Integrate, "problem.name=foo").as_deref(), Some("problem.name"));
        assert_eq!(plan_err(Experiment::Integrate, "problem.params.mu=1").as_deref(), Some("problem.params.mu"));
        assert_eq!(plan_err(Experiment::Integrate, "scheme=sde").as_deref(), Some("scheme"));
        assert_eq!(plan_err(Experiment::TableMs, "t_final=1.003").as_deref(), Some("t_final"));
        assert_eq!(plan_err(Experiment::McMse, "r=4").as_deref(), Some("r"));
        assert_eq!(plan_err(Experiment::InferHenon, "methods=[\"rk4\"]").as_deref(), Some("methods"));
        assert_eq!(plan_err(Experiment::LinearPosterior, "h=1.5").as_deref(), Some("h"));
        assert_eq!(plan_err(Experiment::Integrate, "experiment=table-ms").as_deref(), Some("experiment"));
    }
}
