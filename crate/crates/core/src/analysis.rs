//! Convergence studies, reference solutions and conservation diagnostics.

use rayon::prelude::*;
use serde::Serialize;

use crate::ensemble::{
    estimator_mse, ms_error_estimate, run_ensemble, std_indicator, weak_error_estimate, EnsembleConfig, Estimate,
};
use crate::error::{Error, Result};
use crate::integrators::{integrate, propagate, Recording, Scheme, Trajectory};
use crate::problems::{norm, FirstIntegral, HamiltonianStructure, OdeSystem};
use crate::rk::{step_embedded_euler_heun, ButcherTableau, Stepper};
use crate::steps::{derive_seed, RngStream, StepDistribution};

/// Solution at time `T` from the exact flow, or RK4 with step `h_ref` and
/// compensated summation of the increments.
pub fn reference_solution(sys: &OdeSystem, y0: &[f64], t_final: f64, h_ref: f64) -> Result<Vec<f64>> {
    sys.check_dim(y0)?;
    if let Some(y) = sys.exact_flow(t_final, y0) {
        return Ok(y);
    }
    let n = EnsembleConfig::steps_for_horizon(h_ref, t_final)?;
    rk4_compensated(sys, y0, h_ref, n)
}

fn rk4_compensated(sys: &OdeSystem, y0: &[f64], h: f64, n: usize) -> Result<Vec<f64>> {
    let tab = ButcherTableau::rk4();
    let stepper = Stepper::ExplicitRk(tab);
    let d = y0.len();
    let mut ws = crate::rk::Workspace::new(d);
    let mut y = y0.to_vec();
    let mut carry = vec![0.0; d];
    let mut next = vec![0.0; d];
    for k in 0..n {
        stepper.step_into(sys, &y, h, &mut next, &mut ws).map_err(|e| e.at_step(k, &y))?;
        // Kahan: add the increment next - y to y while tracking the lost low bits.
        for i in 0..d {
            let inc = (next[i] - y[i]) - carry[i];
            let sum = y[i] + inc;
            carry[i] = (sum - y[i]) - inc;
            y[i] = sum;
        }
    }
    Ok(y)
}

/// Reference states at `t_k = k h`, `k = 0..=n`, using `substeps` compensated RK4
/// steps per interval (or the exact flow).
pub fn reference_path(sys: &OdeSystem, y0: &[f64], h: f64, n: usize, substeps: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(n + 1);
    let mut y = y0.to_vec();
    out.push(y.clone());
    for k in 1..=n {
        y = match sys.exact_flow(k as f64 * h, y0) {
            Some(exact) => exact,
            None => rk4_compensated(sys, &y, h / substeps as f64, substeps)?,
        };
        out.push(y.clone());
    }
    Ok(out)
}

/// Least-squares slope of `log(error)` against `log(h)`.
pub fn fit_order(h_grid: &[f64], errors: &[f64]) -> Result<f64> {
    if h_grid.len() != errors.len() {
        return Err(Error::DimensionMismatch { expected: h_grid.len(), got: errors.len() });
    }
    if h_grid.len() < 3 {
        return Err(Error::InsufficientSamples(format!("order fit needs at least 3 points, got {}", h_grid.len())));
    }
    for (&h, &e) in h_grid.iter().zip(errors) {
        if !(e > 0.0) || !e.is_finite() {
            return Err(Error::NonPositiveError { h, value: e });
        }
        if !(h > 0.0) {
            return Err(Error::invalid_param("h", format!("grid values must be positive, got {h}")));
        }
    }
    let xs: Vec<f64> = h_grid.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    Ok(least_squares(&xs, &ys).0)
}

/// `(slope, intercept, residual sum of squares)`.
fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let rss = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    (slope, intercept, rss)
}

/// Two-segment log-log fit. Both segments share the breakpoint, contain at
/// least three points, and are fitted independently; the split with the least
/// total residual wins.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BrokenLineFit {
    /// Index into the grid of the shared point.
    pub breakpoint: usize,
    pub breakpoint_h: f64,
    /// Slope over the coarse steps `h_grid[..=breakpoint]`.
    pub coarse_slope: f64,
    /// Slope over the fine steps `h_grid[breakpoint..]`.
    pub fine_slope: f64,
}

pub fn fit_broken_line(h_grid: &[f64], errors: &[f64]) -> Result<BrokenLineFit> {
    fit_order(h_grid, errors)?;
    let n = h_grid.len();
    if n < 5 {
        return Err(Error::InsufficientSamples(format!("a two-segment fit needs at least 5 points, got {n}")));
    }
    let xs: Vec<f64> = h_grid.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let mut best: Option<(f64, BrokenLineFit)> = None;
    for b in 2..n - 2 {
        let (s1, _, r1) = least_squares(&xs[..=b], &ys[..=b]);
        let (s2, _, r2) = least_squares(&xs[b..], &ys[b..]);
        let fit = BrokenLineFit { breakpoint: b, breakpoint_h: h_grid[b], coarse_slope: s1, fine_slope: s2 };
        if best.as_ref().is_none_or(|(r, _)| r1 + r2 < *r) {
            best = Some((r1 + r2, fit));
        }
    }
    Ok(best.expect("at least one split").1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    MeanSquare,
    Weak,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceStudy {
    pub kind: StudyKind,
    pub stepper: String,
    pub p: f64,
    pub h_grid: Vec<f64>,
    pub errors: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Points whose Monte Carlo error is too large to resolve the bias.
    pub flagged: Vec<bool>,
    /// Slope over the unflagged points (all points if fewer than three survive).
    pub fitted_order: f64,
    pub theory_order: f64,
    pub m: usize,
    pub seed: u64,
    /// Trajectories that diverged and were excluded.
    pub failed: usize,
}

impl ConvergenceStudy {
    fn finish(mut self) -> Result<Self> {
        let keep: Vec<usize> = (0..self.h_grid.len()).filter(|&i| !self.flagged[i]).collect();
        let (hs, es): (Vec<f64>, Vec<f64>) = if keep.len() >= 3 {
            keep.iter().map(|&i| (self.h_grid[i], self.errors[i])).unzip()
        } else {
            (self.h_grid.clone(), self.errors.clone())
        };
        self.fitted_order = fit_order(&hs, &es)?;
        Ok(self)
    }

    pub fn any_flagged(&self) -> bool {
        self.flagged.iter().any(|&f| f)
    }

    /// Errors decrease along the grid, ignoring flagged points.
    pub fn is_monotone(&self) -> bool {
        let kept: Vec<f64> = self.errors.iter().zip(&self.flagged).filter(|(_, &f)| !f).map(|(e, _)| *e).collect();
        kept.windows(2).all(|w| w[1] < w[0])
    }
}

/// Shared description of a study run.
#[derive(Debug, Clone)]
pub struct StudySetup {
    pub stepper: Stepper,
    /// Law of the steps; its `h` is replaced by each grid value.
    pub dist: StepDistribution,
    pub system: OdeSystem,
    pub y0: Vec<f64>,
    pub t_final: f64,
    pub h_grid: Vec<f64>,
    pub m: usize,
    pub seed: u64,
    /// Reference step; defaults to `h_min / 64`.
    pub h_ref: Option<f64>,
}

impl StudySetup {
    pub fn new(stepper: Stepper, dist: StepDistribution, system: OdeSystem, t_final: f64, h_grid: Vec<f64>) -> Self {
        let y0 = system.default_y0().to_vec();
        Self { stepper, dist, system, y0, t_final, h_grid, m: 1000, seed: 0, h_ref: None }
    }

    pub fn with_m(mut self, m: usize) -> Self {
        self.m = m;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.h_grid.len() < 3 {
            return Err(Error::InsufficientSamples("a study needs at least 3 step sizes".into()));
        }
        if self.h_grid.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::invalid_param("h_grid", "must be strictly decreasing"));
        }
        if self.m == 0 {
            return Err(Error::invalid_param("M", "need at least one trajectory"));
        }
        let h_min = *self.h_grid.last().expect("non-empty");
        if let Some(h_ref) = self.h_ref {
            if h_ref > h_min / 50.0 {
                return Err(Error::invalid_param("h_ref", format!("must be at most h_min/50 = {}", h_min / 50.0)));
            }
        }
        Ok(())
    }

    fn reference(&self) -> Result<Vec<f64>> {
        let h_min = *self.h_grid.last().expect("validated");
        let h_ref = self.h_ref.unwrap_or(h_min / 64.0);
        reference_solution(&self.system, &self.y0, self.t_final, h_ref)
    }

    fn config(&self, h: f64) -> Result<EnsembleConfig> {
        let n = EnsembleConfig::steps_for_horizon(h, self.t_final)?;
        let scheme = Scheme::rts(self.dist.with_h(h)?);
        Ok(EnsembleConfig::new(self.stepper.clone(), scheme, self.system.clone(), n)
            .with_y0(self.y0.clone())
            .with_recording(Recording::FinalOnly))
    }

    fn empty_study(&self, kind: StudyKind, theory_order: f64) -> ConvergenceStudy {
        ConvergenceStudy {
            kind,
            stepper: self.stepper.name().to_string(),
            p: self.dist.p(),
            h_grid: self.h_grid.clone(),
            errors: Vec::new(),
            std_errors: Vec::new(),
            flagged: Vec::new(),
            fitted_order: f64::NAN,
            theory_order,
            m: self.m,
            seed: self.seed,
            failed: 0,
        }
    }
}

fn effective_p(dist: &StepDistribution) -> f64 {
    if dist.law() == crate::steps::StepLaw::Degenerate {
        f64::INFINITY
    } else {
        dist.p()
    }
}

/// Root mean-square error at `T` against the reference, for each grid step.
/// Theory order `min{p, q}`.
pub fn study_mean_square(setup: &StudySetup) -> Result<ConvergenceStudy> {
    setup.validate()?;
    let q = setup.stepper.order() as f64;
    let mut study = setup.empty_study(StudyKind::MeanSquare, effective_p(&setup.dist).min(q));
    let y_ref = setup.reference()?;
    for (i, &h) in setup.h_grid.iter().enumerate() {
        let ens = run_ensemble(&setup.config(h)?, setup.m, derive_seed(setup.seed, i as u64))?;
        let est = ms_error_estimate(&ens, &y_ref, ens.n_steps())?;
        study.failed += ens.failed_count();
        push_point(&mut study, est, false);
    }
    study.finish()
}

/// `|E Φ(Y_N) − Φ(y(T))|` for each grid step; points where the standard
/// error exceeds half the measured bias are flagged and left out of the fit.
/// Theory order `min{2p, q}`.
pub fn study_weak(setup: &StudySetup, phi: &(dyn Fn(&[f64]) -> f64 + Sync)) -> Result<ConvergenceStudy> {
    setup.validate()?;
    let q = setup.stepper.order() as f64;
    let mut study = setup.empty_study(StudyKind::Weak, (2.0 * effective_p(&setup.dist)).min(q));
    let phi_ref = phi(&setup.reference()?);
    for (i, &h) in setup.h_grid.iter().enumerate() {
        let ens = run_ensemble(&setup.config(h)?, setup.m, derive_seed(setup.seed, i as u64))?;
        let est = weak_error_estimate(&ens, phi, phi_ref, ens.n_steps())?;
        study.failed += ens.failed_count();
        let noisy = est.std_error > 0.5 * est.value;
        push_point(&mut study, est, noisy);
    }
    study.finish()
}

/// Mean-square error of the `M`-sample estimator over `R` replicas.
/// Theory order (of the MSE itself) `2 min{p, q}` at fine steps, where the
/// variance term `h^{2 min{p,q}}/M` dominates.
pub fn study_estimator_mse(
    setup: &StudySetup,
    r: usize,
    phi: &(dyn Fn(&[f64]) -> f64 + Sync),
) -> Result<ConvergenceStudy> {
    setup.validate()?;
    let q = setup.stepper.order() as f64;
    let p = effective_p(&setup.dist);
    let mut study = setup.empty_study(StudyKind::Mse, 2.0 * p.min(q));
    let z = phi(&setup.reference()?);
    for (i, &h) in setup.h_grid.iter().enumerate() {
        let report = estimator_mse(&setup.config(h)?, setup.m, r, phi, z, derive_seed(setup.seed, i as u64))?;
        study.failed += report.failed;
        push_point(&mut study, Estimate { value: report.mse, std_error: report.std_error }, false);
    }
    study.finish()
}

/// `C (h^{2 min{2p,q}} + h^{2 min{p,q}} / M)` with `C = 1`.
pub fn mse_theory_curve(h_grid: &[f64], p: f64, q: f64, m: usize) -> Vec<f64> {
    h_grid
        .iter()
        .map(|h| h.powf(2.0 * (2.0 * p).min(q)) + h.powf(2.0 * p.min(q)) / m as f64)
        .collect()
}

fn push_point(study: &mut ConvergenceStudy, est: Estimate, flagged: bool) {
    study.errors.push(est.value);
    study.std_errors.push(est.std_error);
    study.flagged.push(flagged);
}

/// A time series such as an invariant drift or energy error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesReport {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl SeriesReport {
    fn over(&self, t_lo: f64, t_hi: f64) -> impl Iterator<Item = f64> + '_ {
        self.times.iter().zip(&self.values).filter(move |(t, _)| **t >= t_lo && **t <= t_hi).map(|(_, v)| *v)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn last(&self) -> f64 {
        *self.values.last().unwrap_or(&f64::NAN)
    }

    pub fn max_over(&self, t_lo: f64, t_hi: f64) -> f64 {
        self.over(t_lo, t_hi).fold(0.0, f64::max)
    }

    /// Average of the samples with `t_lo ≤ t ≤ t_hi`.
    pub fn mean_over(&self, t_lo: f64, t_hi: f64) -> f64 {
        let (sum, count) = self.over(t_lo, t_hi).fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
        sum / count as f64
    }
}

/// `|I(Y_k) − I(Y_0)|` along a trajectory, at nominal times.
pub fn integral_drift(traj: &Trajectory, integral: &FirstIntegral) -> Result<SeriesReport> {
    let i0 = integral.eval(traj.initial_state())?;
    let values = traj.states().map(|y| integral.eval(y).map(|v| (v - i0).abs())).collect::<Result<Vec<_>>>()?;
    Ok(SeriesReport { times: traj.nominal_times(), values })
}

/// Ensemble mean of [`integral_drift`].
pub fn integral_drift_mean(trajectories: &[Trajectory], integral: &FirstIntegral) -> Result<SeriesReport> {
    let mut iter = trajectories.iter();
    let first = iter.next().ok_or_else(|| Error::InsufficientSamples("no trajectories".into()))?;
    let mut acc = integral_drift(first, integral)?;
    for traj in iter {
        let s = integral_drift(traj, integral)?;
        if s.values.len() != acc.values.len() {
            return Err(Error::DimensionMismatch { expected: acc.values.len(), got: s.values.len() });
        }
        for (a, v) in acc.values.iter_mut().zip(&s.values) {
            *a += v;
        }
    }
    let m = trajectories.len() as f64;
    acc.values.iter_mut().for_each(|v| *v /= m);
    Ok(acc)
}

/// Step indices `1..=n` on a logarithmic grid, at most `per_decade` per decade.
pub fn log_time_indices(n: usize, per_decade: usize) -> Vec<usize> {
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    let decades = (n as f64).log10();
    let count = (decades * per_decade as f64).ceil() as usize + 1;
    for j in 0..=count {
        let k = 10f64.powf(decades * j as f64 / count as f64).round() as usize;
        let k = k.clamp(1, n);
        if out.last() != Some(&k) {
            out.push(k);
        }
    }
    if out.last() != Some(&n) {
        out.push(n);
    }
    out
}

/// Mean over `M` trajectories of `|Q(Y_n) − Q(y_0)|`, sampled on a log time grid
/// without storing the trajectories.
pub fn hamiltonian_error_longtime(
    cfg: &EnsembleConfig,
    ham: &HamiltonianStructure,
    m: usize,
    base_seed: u64,
    per_decade: usize,
) -> Result<SeriesReport> {
    if m == 0 {
        return Err(Error::invalid_param("M", "need at least one trajectory"));
    }
    let grid = log_time_indices(cfg.n_steps, per_decade);
    let q0 = ham.energy(&cfg.y0)?;
    let runs: Vec<Result<Vec<f64>>> = (0..m as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::new(base_seed, i);
            let mut values = Vec::with_capacity(grid.len());
            let mut cursor = 0;
            propagate(&cfg.stepper, &cfg.scheme, &cfg.system, &cfg.y0, cfg.n_steps, Some(&mut rng), |k, y, _| {
                if cursor < grid.len() && grid[cursor] == k {
                    values.push((ham.energy(y).unwrap_or(f64::NAN) - q0).abs());
                    cursor += 1;
                }
            })?;
            Ok(values)
        })
        .collect();
    let mut mean = vec![0.0; grid.len()];
    for run in runs {
        for (a, v) in mean.iter_mut().zip(run?) {
            *a += v / m as f64;
        }
    }
    let h = cfg.scheme.nominal_h();
    Ok(SeriesReport { times: grid.iter().map(|&k| k as f64 * h).collect(), values: mean })
}

/// Sign census of an ensemble over every recorded state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositivityReport {
    pub trajectories: usize,
    /// Negative components over all states of all trajectories.
    pub negative_values: usize,
    pub trajectories_with_negative: usize,
    /// Trajectories that broke down; their states up to the failure count.
    pub failed: usize,
    pub min_value: f64,
}

/// Runs `m` trajectories (member `i` on stream `i`) and counts negative
/// components, including those visited before a breakdown.
pub fn positivity_report(cfg: &EnsembleConfig, m: usize, base_seed: u64) -> Result<PositivityReport> {
    if m == 0 {
        return Err(Error::invalid_param("M", "need at least one trajectory"));
    }
    let runs: Vec<(usize, f64, bool)> = (0..m as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::new(base_seed, i);
            let (mut negatives, mut min) = (0usize, f64::INFINITY);
            let outcome = propagate(&cfg.stepper, &cfg.scheme, &cfg.system, &cfg.y0, cfg.n_steps, Some(&mut rng), |_, y, _| {
                negatives += y.iter().filter(|&&x| x < 0.0).count();
                min = y.iter().copied().fold(min, f64::min);
            });
            (negatives, min, outcome.is_err())
        })
        .collect();
    Ok(PositivityReport {
        trajectories: m,
        negative_values: runs.iter().map(|r| r.0).sum(),
        trajectories_with_negative: runs.iter().filter(|r| r.0 > 0).count(),
        failed: runs.iter().filter(|r| r.2).count(),
        min_value: runs.iter().map(|r| r.1).fold(f64::INFINITY, f64::min),
    })
}

/// The three error indicators of the embedded-pair comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorEstimatorComparison {
    pub times: Vec<f64>,
    /// Accumulated `‖y_heun − y_euler‖` along the deterministic Euler path.
    pub embedded: Vec<f64>,
    /// `(tr Var Y_n)^{1/2}` of the random time-step Euler ensemble.
    pub spread: Vec<f64>,
    /// `‖y_n − y(t_n)‖` of the deterministic Euler path.
    pub true_error: Vec<f64>,
}

/// Compares the embedded Euler/Heun estimate and the ensemble spread of
/// random time-step Euler (uniform steps, `p = 1`) against the true error.
pub fn error_estimator_comparison(
    sys: &OdeSystem,
    h: f64,
    t_final: f64,
    m: usize,
    seed: u64,
) -> Result<ErrorEstimatorComparison> {
    let n = EnsembleConfig::steps_for_horizon(h, t_final)?;
    let euler: Stepper = "euler".parse()?;
    let y0 = sys.default_y0().to_vec();
    let det = integrate(&euler, &Scheme::deterministic(h)?, sys, &y0, n, None, &Recording::Full)?;
    let reference = reference_path(sys, &y0, h, n, 64)?;

    let mut embedded = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    embedded.push(0.0);
    for k in 0..n {
        acc += step_embedded_euler_heun(sys, det.state(k)?, h)?.error_estimate;
        embedded.push(acc);
    }
    let true_error = (0..=n)
        .map(|k| {
            let y = det.state(k)?;
            Ok(norm(&y.iter().zip(&reference[k]).map(|(a, b)| a - b).collect::<Vec<_>>()))
        })
        .collect::<Result<Vec<_>>>()?;

    let dist = StepDistribution::uniform(h, 1.0)?;
    let cfg = EnsembleConfig::new(euler, Scheme::rts(dist), sys.clone(), n).with_y0(y0);
    let ens = run_ensemble(&cfg, m, seed)?;
    let spread = (0..=n).map(|k| std_indicator(&ens, k)).collect::<Result<Vec<_>>>()?;
    Ok(ErrorEstimatorComparison { times: (0..=n).map(|k| k as f64 * h).collect(), embedded, spread, true_error })
}

/// Deterministic trajectories from `y0` with `N(0, σ²)` added to the first
/// component; member `i` uses stream `i`.
pub fn initial_condition_fan(
    stepper: &Stepper,
    sys: &OdeSystem,
    h: f64,
    t_final: f64,
    sigma: f64,
    m: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let n = EnsembleConfig::steps_for_horizon(h, t_final)?;
    let scheme = Scheme::deterministic(h)?;
    (0..m as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::new(seed, i);
            let mut y0 = sys.default_y0().to_vec();
            y0[0] += sigma * rng.standard_normal();
            integrate(stepper, &scheme, sys, &y0, n, None, &Recording::Full)
        })
        .collect()
}
