//! Monte Carlo ensembles of trajectories and their estimators.
//!
//! Trajectory `i` of an ensemble always draws from `RngStream::new(seed, i)`,
//! and results are collected in index order, so every estimator is
//! independent of the thread schedule.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::integrators::{integrate, Recording, Scheme, Trajectory};
use crate::problems::OdeSystem;
use crate::rk::Stepper;
use crate::steps::{derive_seed, RngStream};

/// Everything needed to generate one trajectory, apart from its stream.
#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    pub stepper: Stepper,
    pub scheme: Scheme,
    pub system: OdeSystem,
    pub y0: Vec<f64>,
    pub n_steps: usize,
    pub recording: Recording,
}

impl EnsembleConfig {
    pub fn new(stepper: Stepper, scheme: Scheme, system: OdeSystem, n_steps: usize) -> Self {
        let y0 = system.default_y0().to_vec();
        Self { stepper, scheme, system, y0, n_steps, recording: Recording::Full }
    }

    pub fn with_y0(mut self, y0: Vec<f64>) -> Self {
        self.y0 = y0;
        self
    }

    pub fn with_recording(mut self, recording: Recording) -> Self {
        self.recording = recording;
        self
    }

    /// `N` steps covering `[0, T]` at the scheme's nominal step.
    pub fn steps_for_horizon(h: f64, t_final: f64) -> Result<usize> {
        let n = (t_final / h).round();
        if !(n >= 1.0) || ((n * h - t_final).abs() > 1e-9 * t_final.max(1.0)) {
            return Err(Error::InvalidInput(format!("T = {t_final} is not a positive multiple of h = {h}")));
        }
        Ok(n as usize)
    }

    pub fn run_one(&self, seed: u64, index: u64) -> Result<Trajectory> {
        let mut rng = RngStream::new(seed, index);
        integrate(&self.stepper, &self.scheme, &self.system, &self.y0, self.n_steps, Some(&mut rng), &self.recording)
    }
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    trajectories: Vec<Trajectory>,
    ids: Vec<u64>,
    requested: usize,
    base_seed: u64,
    failures: Vec<(u64, Error)>,
}

impl Ensemble {
    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    /// Stream ids of the successful trajectories, in order.
    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// Successful trajectories.
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn requested(&self) -> usize {
        self.requested
    }

    pub fn base_seed(&self) -> u64 {
        self.base_seed
    }

    pub fn failed_count(&self) -> usize {
        self.failures.len()
    }

    pub fn failures(&self) -> &[(u64, Error)] {
        &self.failures
    }

    pub fn n_steps(&self) -> usize {
        self.trajectories[0].n_steps()
    }

    fn states_at(&self, k: usize) -> Result<Vec<&[f64]>> {
        self.trajectories.iter().map(|t| t.state(k)).collect()
    }

    /// One CSV row per stored state: `traj_id,k,t_nominal,t_realized,y0,…`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let dim = self.trajectories[0].dim();
        write!(out, "traj_id,k,t_nominal,t_realized")?;
        for i in 0..dim {
            write!(out, ",y{i}")?;
        }
        writeln!(out)?;
        for (id, traj) in self.ids.iter().zip(&self.trajectories) {
            let times = traj.realized_times();
            for (j, k) in traj.indices().into_iter().enumerate() {
                write!(out, "{id},{k},{},{}", k as f64 * traj.nominal_h(), times[j])?;
                for x in traj.stored(j) {
                    write!(out, ",{x}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// `M` independent trajectories; trajectory `i` uses stream `i` of `base_seed`.
pub fn run_ensemble(cfg: &EnsembleConfig, m: usize, base_seed: u64) -> Result<Ensemble> {
    if m == 0 {
        return Err(Error::invalid_param("M", "need at least one trajectory"));
    }
    let results: Vec<Result<Trajectory>> =
        (0..m as u64).into_par_iter().map(|i| cfg.run_one(base_seed, i)).collect();
    let mut trajectories = Vec::with_capacity(m);
    let mut ids = Vec::with_capacity(m);
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(t) => {
                trajectories.push(t);
                ids.push(i as u64);
            }
            Err(e) => failures.push((i as u64, e)),
        }
    }
    if trajectories.is_empty() {
        return Err(Error::AllFailed(m));
    }
    Ok(Ensemble { trajectories, ids, requested: m, base_seed, failures })
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

fn mean_and_se(values: impl Iterator<Item = f64>) -> Estimate {
    // Welford keeps the reduction order fixed and the variance accurate.
    let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
    for x in values {
        n += 1.0;
        let delta = x - mean;
        mean += delta / n;
        m2 += delta * (x - mean);
    }
    let std_error = if n > 1.0 { (m2 / (n - 1.0) / n).sqrt() } else { f64::NAN };
    Estimate { value: mean, std_error }
}

/// `M⁻¹ Σ Φ(Y_k^{(i)})` with its standard error.
pub fn mc_functional_estimate(e: &Ensemble, phi: &dyn Fn(&[f64]) -> f64, k: usize) -> Result<Estimate> {
    let states = e.states_at(k)?;
    Ok(mean_and_se(states.into_iter().map(phi)))
}

/// `M⁻¹ Σ Φ(Y_k^{(i)})`.
pub fn mc_functional(e: &Ensemble, phi: &dyn Fn(&[f64]) -> f64, k: usize) -> Result<f64> {
    Ok(mc_functional_estimate(e, phi, k)?.value)
}

/// `(E‖Y_k − y_ref‖²)^{1/2}` estimated by the sample mean.
pub fn ms_error(e: &Ensemble, y_ref: &[f64], k: usize) -> Result<f64> {
    Ok(ms_error_estimate(e, y_ref, k)?.value)
}

/// Root mean-square error; the standard error is propagated by the delta method.
pub fn ms_error_estimate(e: &Ensemble, y_ref: &[f64], k: usize) -> Result<Estimate> {
    let states = e.states_at(k)?;
    if y_ref.len() != states[0].len() {
        return Err(Error::DimensionMismatch { expected: states[0].len(), got: y_ref.len() });
    }
    let sq = mean_and_se(states.into_iter().map(|y| y.iter().zip(y_ref).map(|(a, b)| (a - b).powi(2)).sum::<f64>()));
    let value = sq.value.sqrt();
    let std_error = if value > 0.0 { sq.std_error / (2.0 * value) } else { 0.0 };
    Ok(Estimate { value, std_error })
}

/// `|M⁻¹ Σ Φ(Y_k^{(i)}) − Φ_ref|`.
pub fn weak_error(e: &Ensemble, phi: &dyn Fn(&[f64]) -> f64, phi_ref: f64, k: usize) -> Result<f64> {
    Ok(weak_error_estimate(e, phi, phi_ref, k)?.value)
}

pub fn weak_error_estimate(e: &Ensemble, phi: &dyn Fn(&[f64]) -> f64, phi_ref: f64, k: usize) -> Result<Estimate> {
    let est = mc_functional_estimate(e, phi, k)?;
    Ok(Estimate { value: (est.value - phi_ref).abs(), std_error: est.std_error })
}

/// `(tr Var Y_k)^{1/2}` from the unbiased sample covariance.
pub fn std_indicator(e: &Ensemble, k: usize) -> Result<f64> {
    let states = e.states_at(k)?;
    if states.len() < 2 {
        return Err(Error::InsufficientSamples(format!("spread needs M >= 2, got {}", states.len())));
    }
    let dim = states[0].len();
    let mut trace = 0.0;
    for c in 0..dim {
        let est = mean_and_se(states.iter().map(|y| y[c]));
        // std_error² · n = sample variance
        trace += est.std_error * est.std_error * states.len() as f64;
    }
    Ok(trace.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MseReport {
    /// `R⁻¹ Σ_r (Z − Ẑ^{(r)})²`.
    pub mse: f64,
    /// Standard error of `mse` across replicas.
    pub std_error: f64,
    /// `(Z − R⁻¹ Σ_r Ẑ^{(r)})²`.
    pub bias_squared: f64,
    /// Population variance of the replica estimates.
    pub variance: f64,
    pub replicas: Vec<f64>,
    pub failed: usize,
}

/// `E(Z − Ẑ_N)²` over `R` independent `M`-trajectory estimators. Replica `r`
/// uses base seed `derive_seed(base_seed, r)`.
pub fn estimator_mse(
    cfg: &EnsembleConfig,
    m: usize,
    r: usize,
    phi: &(dyn Fn(&[f64]) -> f64 + Sync),
    z: f64,
    base_seed: u64,
) -> Result<MseReport> {
    if r < 16 {
        return Err(Error::InsufficientSamples(format!("estimator MSE needs R >= 16 replicas, got {r}")));
    }
    if m == 0 {
        return Err(Error::invalid_param("M", "need at least one trajectory"));
    }
    let cfg = EnsembleConfig { recording: Recording::FinalOnly, ..cfg.clone() };
    let outcomes: Vec<Result<(f64, usize)>> = (0..r as u64)
        .into_par_iter()
        .map(|rep| {
            let seed = derive_seed(base_seed, rep);
            let ens = run_ensemble(&cfg, m, seed)?;
            let k = ens.n_steps();
            Ok((mc_functional(&ens, phi, k)?, ens.failed_count()))
        })
        .collect();
    let mut replicas = Vec::with_capacity(r);
    let mut failed = 0;
    for o in outcomes {
        let (v, f) = o?;
        replicas.push(v);
        failed += f;
    }
    let sq = mean_and_se(replicas.iter().map(|v| (z - v).powi(2)));
    let mean = replicas.iter().sum::<f64>() / r as f64;
    let variance = replicas.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r as f64;
    Ok(MseReport { mse: sq.value, std_error: sq.std_error, bias_squared: (z - mean).powi(2), variance, replicas, failed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{make_problem, Params, ProblemName};
    use crate::steps::StepDistribution;

    fn decay() -> OdeSystem {
        make_problem(ProblemName::LinearDecay, &Params::new()).unwrap()
    }

    fn rts_euler(h: f64, n: usize) -> EnsembleConfig {
        let dist = StepDistribution::uniform(h, 1.0).unwrap();
        EnsembleConfig::new("euler".parse().unwrap(), Scheme::rts(dist), decay(), n)
    }

    fn first(y: &[f64]) -> f64 {
        y[0]
    }

    #[test]
    fn single_degenerate_member_is_deterministic() {
        let dist = StepDistribution::degenerate(0.1).unwrap();
        let cfg = EnsembleConfig::new("rk4".parse().unwrap(), Scheme::rts(dist), decay(), 10);
        let ens = run_ensemble(&cfg, 1, 3).unwrap();
        let det = crate::integrators::integrate_deterministic(&cfg.stepper, &cfg.system, &[1.0], 0.1, 10).unwrap();
        assert_eq!(ens.trajectories()[0].final_state(), det.final_state());
        assert_eq!(mc_functional(&ens, &first, 10).unwrap(), det.final_state()[0]);
        assert_eq!(ms_error(&ens, det.final_state(), 10).unwrap(), 0.0);
    }

    #[test]
    fn ensembles_are_reproducible() {
        let cfg = rts_euler(0.1, 20);
        let a = run_ensemble(&cfg, 50, 7).unwrap();
        let b = run_ensemble(&cfg, 50, 7).unwrap();
        for (x, y) in a.trajectories().iter().zip(b.trajectories()) {
            assert_eq!(x, y);
        }
        let c = run_ensemble(&cfg, 50, 8).unwrap();
        assert_ne!(a.trajectories()[0], c.trajectories()[0]);
        let mut ids = a.ids().to_vec();
        ids.dedup();
        assert_eq!(ids.len(), 50);
    }

    #[test]
    fn mean_first_step_matches_h() {
        let h = 0.1;
        let ens = run_ensemble(&rts_euler(h, 1), 100, 11).unwrap();
        let mean = ens.trajectories().iter().map(|t| t.realized_steps()[0]).sum::<f64>() / 100.0;
        let sd = (h.powi(3) / 3.0 / 100.0).sqrt();
        assert!((mean - h).abs() < 3.0 * sd);
    }

    #[test]
    fn zero_field_estimators() {
        let zero = OdeSystem::zero(vec![0.4, 1.5]);
        let dist = StepDistribution::uniform(0.1, 1.0).unwrap();
        let cfg = EnsembleConfig::new("heun".parse().unwrap(), Scheme::rts(dist), zero, 5);
        let ens = run_ensemble(&cfg, 20, 1).unwrap();
        assert_eq!(mc_functional(&ens, &first, 5).unwrap(), 0.4);
        assert_eq!(ms_error(&ens, &[0.4, 1.5], 5).unwrap(), 0.0);
        assert_eq!(std_indicator(&ens, 5).unwrap(), 0.0);
        assert_eq!(weak_error(&ens, &first, 0.4, 5).unwrap(), 0.0);
    }

    #[test]
    fn one_step_euler_mean_square_error() {
        // Y_1 = 1 − H: E(Y_1 − e^{−h})² = (1 − h − e^{−h})² + h³/3
        let h: f64 = 0.25;
        let m = 200_000;
        let ens = run_ensemble(&rts_euler(h, 1), m, 5).unwrap();
        let exact = (-h).exp();
        let closed = (1.0 - h - exact).powi(2) + h.powi(3) / 3.0;
        let est = ms_error_estimate(&ens, &[exact], 1).unwrap();
        let sq = est.value * est.value;
        let sq_se = 2.0 * est.value * est.std_error;
        assert!((sq - closed).abs() < 3.0 * sq_se, "{sq} vs {closed} (se {sq_se})");

        let weak = weak_error_estimate(&ens, &first, exact, 1).unwrap();
        let closed_weak = (1.0 - h - exact).abs();
        assert!((weak.value - closed_weak).abs() < 3.0 * weak.std_error);
    }

    #[test]
    fn additive_spread_matches_covariance() {
        let sys = make_problem(ProblemName::FitzhughNagumo, &Params::new()).unwrap();
        let (h, p) = (0.2, 1.0);
        let cfg = EnsembleConfig::new("heun".parse().unwrap(), Scheme::additive(h, p).unwrap(), sys, 1);
        let ens = run_ensemble(&cfg, 40_000, 2).unwrap();
        let trace = std_indicator(&ens, 1).unwrap().powi(2);
        let expected = 2.0 * h.powf(2.0 * p + 1.0);
        assert!((trace / expected - 1.0).abs() < 0.05, "{trace} vs {expected}");
        assert!(std_indicator(&run_ensemble(&cfg, 1, 2).unwrap(), 1).is_err());
    }

    #[test]
    fn functional_is_permutation_invariant() {
        let ens = run_ensemble(&rts_euler(0.1, 3), 64, 4).unwrap();
        let forward = mc_functional(&ens, &first, 3).unwrap();
        let mut reversed = ens.clone();
        reversed.trajectories.reverse();
        reversed.ids.reverse();
        let backward = mc_functional(&reversed, &first, 3).unwrap();
        assert!((forward - backward).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_index() {
        let ens = run_ensemble(&rts_euler(0.1, 3), 4, 4).unwrap();
        assert!(matches!(mc_functional(&ens, &first, 4), Err(Error::IndexOutOfRange { .. })));
        assert!(ms_error(&ens, &[0.0], 9).is_err());
    }

    #[test]
    fn estimator_mse_on_bias_free_toy() {
        // Φ = identity, Euler, one step: E Y_1 = 1 − h, Var Y_1 = h³/3 and MSE = Var / M.
        let h: f64 = 0.25;
        let cfg = rts_euler(h, 1);
        let z = 1.0 - h;
        let var = h.powi(3) / 3.0;
        let small = estimator_mse(&cfg, 50, 400, &first, z, 9).unwrap();
        let large = estimator_mse(&cfg, 100, 400, &first, z, 9).unwrap();
        assert!((small.mse / (var / 50.0) - 1.0).abs() < 0.25, "{}", small.mse / (var / 50.0));
        assert!((small.mse / large.mse - 2.0).abs() < 0.6);
        for rep in [&small, &large] {
            assert!((rep.mse - (rep.variance + rep.bias_squared)).abs() < 1e-15);
        }
        assert!(matches!(estimator_mse(&cfg, 10, 8, &first, z, 9), Err(Error::InsufficientSamples(_))));
    }

    #[test]
    fn degenerate_estimator_has_zero_mse() {
        let dist = StepDistribution::degenerate(0.1).unwrap();
        let cfg = EnsembleConfig::new("heun".parse().unwrap(), Scheme::rts(dist), decay(), 10);
        let det = crate::integrators::integrate_deterministic(&cfg.stepper, &cfg.system, &[1.0], 0.1, 10).unwrap();
        let rep = estimator_mse(&cfg, 3, 16, &first, det.final_state()[0], 1).unwrap();
        assert_eq!(rep.mse, 0.0);
    }

    #[test]
    fn csv_export_layout() {
        let ens = run_ensemble(&rts_euler(0.5, 2), 2, 1).unwrap();
        let mut buf = Vec::new();
        ens.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "traj_id,k,t_nominal,t_realized,y0");
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert!(lines[1].starts_with("0,0,0,0,1"));
        assert!(lines[4].starts_with("1,0,"));
    }

    #[test]
    fn horizon_to_steps() {
        assert_eq!(EnsembleConfig::steps_for_horizon(0.01, 1.0).unwrap(), 100);
        assert_eq!(EnsembleConfig::steps_for_horizon(0.125 / 128.0, 1.0).unwrap(), 1024);
        assert!(EnsembleConfig::steps_for_horizon(0.3, 1.0).is_err());
    }
}
