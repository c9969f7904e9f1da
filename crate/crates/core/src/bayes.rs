//! Bayesian inverse problems with ODE forward models.
//!
//! Data `𝒴 = 𝒢(ϑ) + ε` with Gaussian noise `ε ~ N(0, Σ_ε)` define the potential
//! `V(ϑ) = ½ (𝒢(ϑ) − 𝒴)ᵀ Σ_ε⁻¹ (𝒢(ϑ) − 𝒴)`. Replacing the exact solution
//! operator by a deterministic integrator gives the posterior `π^h`; replacing
//! it by RTS-RK and marginalising over the random steps gives `π^h_prob`,
//! which is sampled with pseudo-marginal Metropolis–Hastings.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use serde::Serialize;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::integrators::{propagate, Scheme};
use crate::linalg::{cholesky, forward_substitute};
use crate::problems::OdeSystem;
use crate::rk::Stepper;
use crate::steps::{RngStream, StepDistribution};

/// Maps a parameter vector to the system to integrate and its initial state.
pub type ParameterMap = Arc<dyn Fn(&[f64]) -> Result<(OdeSystem, Vec<f64>)> + Send + Sync>;
/// Maps the state at the observation time to the observable vector.
pub type ObservationOp = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// A symmetric positive definite matrix with its Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariance {
    n: usize,
    matrix: Vec<f64>,
    chol: Vec<f64>,
}

impl Covariance {
    /// Row-major `n × n`; rejects asymmetric, singular or indefinite input.
    pub fn new(matrix: Vec<f64>, n: usize) -> Result<Self> {
        if n == 0 || matrix.len() != n * n {
            return Err(Error::InvalidInput(format!("covariance needs {} entries, got {}", n * n, matrix.len())));
        }
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (matrix[i * n + j], matrix[j * n + i]);
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::InvalidInput(format!("covariance is not symmetric at ({i}, {j})")));
                }
            }
        }
        let chol = cholesky(&matrix, n)
            .ok_or_else(|| Error::InvalidInput("covariance is not positive definite".into()))?;
        Ok(Self { n, matrix, chol })
    }

    pub fn diagonal(variances: &[f64]) -> Result<Self> {
        let n = variances.len();
        let mut m = vec![0.0; n * n];
        for (i, v) in variances.iter().enumerate() {
            m[i * n + i] = *v;
        }
        Self::new(m, n)
    }

    pub fn isotropic(n: usize, variance: f64) -> Result<Self> {
        Self::diagonal(&vec![variance; n])
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    /// `rᵀ Σ⁻¹ r`.
    pub fn inverse_quadratic(&self, r: &[f64]) -> Result<f64> {
        if r.len() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: r.len() });
        }
        let mut z = r.to_vec();
        forward_substitute(&self.chol, &mut z, self.n);
        Ok(z.iter().map(|x| x * x).sum())
    }

    /// `L z` for the Cholesky factor `L`; maps standard normals to `N(0, Σ)`.
    pub fn transform(&self, z: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| (0..=i).map(|k| self.chol[i * self.n + k] * z[k]).sum()).collect()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.chol[i * self.n + i].ln()).sum::<f64>()
    }
}

/// Gaussian prior `N(mean, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    mean: Vec<f64>,
    cov: Covariance,
}

impl GaussianPrior {
    pub fn new(mean: Vec<f64>, cov: Covariance) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::DimensionMismatch { expected: cov.dim(), got: mean.len() });
        }
        Ok(Self { mean, cov })
    }

    pub fn isotropic(mean: Vec<f64>, sd: f64) -> Result<Self> {
        let cov = Covariance::isotropic(mean.len(), sd * sd)?;
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &Covariance {
        &self.cov
    }

    /// Log density up to the normalising constant.
    pub fn log_density(&self, theta: &[f64]) -> Result<f64> {
        let r: Vec<f64> = theta.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        Ok(-0.5 * self.cov.inverse_quadratic(&r)?)
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let z: Vec<f64> = (0..self.dim()).map(|_| rng.standard_normal()).collect();
        self.cov.transform(&z).iter().zip(&self.mean).map(|(a, b)| a + b).collect()
    }
}

/// `½ (g − 𝒴)ᵀ Σ_ε⁻¹ (g − 𝒴)`.
pub fn potential(g: &[f64], data: &[f64], noise: &Covariance) -> Result<f64> {
    if g.len() != data.len() {
        return Err(Error::DimensionMismatch { expected: data.len(), got: g.len() });
    }
    let r: Vec<f64> = g.iter().zip(data).map(|(a, b)| a - b).collect();
    Ok(0.5 * noise.inverse_quadratic(&r)?)
}

#[derive(Clone)]
pub struct InverseProblem {
    map: ParameterMap,
    stepper: Stepper,
    obs_time: f64,
    observation: ObservationOp,
    prior: GaussianPrior,
    noise: Covariance,
    data: Vec<f64>,
}

impl fmt::Debug for InverseProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InverseProblem")
            .field("stepper", &self.stepper)
            .field("obs_time", &self.obs_time)
            .field("prior", &self.prior)
            .field("noise", &self.noise)
            .field("data", &self.data)
            .finish()
    }
}

impl InverseProblem {
    pub fn new(
        map: ParameterMap,
        stepper: Stepper,
        obs_time: f64,
        observation: ObservationOp,
        prior: GaussianPrior,
        noise: Covariance,
        data: Vec<f64>,
    ) -> Result<Self> {
        if !(obs_time > 0.0 && obs_time.is_finite()) {
            return Err(Error::invalid_param("obs_time", "must be positive and finite"));
        }
        if noise.dim() != data.len() {
            return Err(Error::DimensionMismatch { expected: data.len(), got: noise.dim() });
        }
        Ok(Self { map, stepper, obs_time, observation, prior, noise, data })
    }

    /// The parameter is the initial condition of `system`; the observable is
    /// the full state at `obs_time`.
    pub fn initial_condition(
        system: OdeSystem,
        stepper: Stepper,
        obs_time: f64,
        prior: GaussianPrior,
        noise: Covariance,
        data: Vec<f64>,
    ) -> Result<Self> {
        let dim = system.dim();
        if prior.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: prior.dim() });
        }
        let map: ParameterMap = Arc::new(move |theta: &[f64]| Ok((system.clone(), theta.to_vec())));
        let observation: ObservationOp = Arc::new(|y: &[f64]| y.to_vec());
        Self::new(map, stepper, obs_time, observation, prior, noise, data)
    }

    pub fn with_observation(mut self, observation: ObservationOp) -> Self {
        self.observation = observation;
        self
    }

    pub fn prior(&self) -> &GaussianPrior {
        &self.prior
    }

    pub fn noise(&self) -> &Covariance {
        &self.noise
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn obs_time(&self) -> f64 {
        self.obs_time
    }

    pub fn stepper(&self) -> &Stepper {
        &self.stepper
    }

    /// Number of steps of size `h` covering the observation time.
    pub fn steps_for(&self, h: f64) -> Result<usize> {
        crate::ensemble::EnsembleConfig::steps_for_horizon(h, self.obs_time)
    }

    pub fn potential_of(&self, g: &[f64]) -> Result<f64> {
        potential(g, &self.data, &self.noise)
    }

    /// `𝒢^h(ϑ)`: integrates the parameterised system to the observation time
    /// and applies the observation operator.
    pub fn forward(&self, theta: &[f64], scheme: &Scheme, rng: Option<&mut RngStream>) -> Result<Vec<f64>> {
        if theta.len() != self.prior.dim() {
            return Err(Error::DimensionMismatch { expected: self.prior.dim(), got: theta.len() });
        }
        let (sys, y0) = (self.map)(theta)?;
        let n = self.steps_for(scheme.nominal_h())?;
        let y = propagate(&self.stepper, scheme, &sys, &y0, n, rng, |_, _, _| {})?;
        let g = (self.observation)(&y);
        if g.len() != self.data.len() {
            return Err(Error::DimensionMismatch { expected: self.data.len(), got: g.len() });
        }
        Ok(g)
    }

    /// `−V^h(ϑ)`; solver breakdowns count as zero likelihood.
    pub fn log_likelihood(&self, theta: &[f64], scheme: &Scheme, rng: Option<&mut RngStream>) -> Result<f64> {
        match self.forward(theta, scheme, rng) {
            Ok(g) => {
                let v = self.potential_of(&g)?;
                Ok(if v.is_finite() { -v } else { f64::NEG_INFINITY })
            }
            Err(Error::Divergence { .. } | Error::NewtonFailure { .. } | Error::FixedPointFailure { .. }) => {
                Ok(f64::NEG_INFINITY)
            }
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainKind {
    Rwmh,
    Pmmh,
}

impl ChainKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ChainKind::Rwmh => "rwmh",
            ChainKind::Pmmh => "pmmh",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McmcConfig {
    /// Recorded iterations after warm-up.
    pub n_steps: usize,
    /// Adaptive iterations, discarded.
    pub warmup: usize,
    /// Initial multiple of the prior covariance used for proposals.
    pub proposal_scale: f64,
    pub target_acceptance: f64,
    /// Warm-up batch length between scale updates.
    pub adapt_batch: usize,
    /// A recorded window of this length without acceptance raises a warning.
    pub stall_window: usize,
    /// Starting point; the prior mean when absent.
    pub initial: Option<Vec<f64>>,
}

impl McmcConfig {
    pub fn new(n_steps: usize, warmup: usize, proposal_scale: f64) -> Self {
        Self {
            n_steps,
            warmup,
            proposal_scale,
            target_acceptance: 0.25,
            adapt_batch: 50,
            stall_window: 1000,
            initial: None,
        }
    }

    pub fn with_initial(mut self, initial: Vec<f64>) -> Self {
        self.initial = Some(initial);
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.proposal_scale > 0.0 && self.proposal_scale.is_finite()) {
            return Err(Error::invalid_param("proposal_scale", "must be positive and finite"));
        }
        if self.n_steps == 0 {
            return Err(Error::invalid_param("n_steps", "need at least one recorded step"));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(Error::invalid_param("target_acceptance", "must lie in (0, 1)"));
        }
        if self.adapt_batch == 0 {
            return Err(Error::invalid_param("adapt_batch", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub samples: Vec<Vec<f64>>,
    /// Log-likelihood estimate carried with each recorded state.
    pub log_estimates: Vec<f64>,
    /// Log acceptance probability of each recorded proposal.
    pub log_accept_history: Vec<f64>,
    pub accepted: Vec<bool>,
    pub acceptance_rate: f64,
    /// Proposal scale frozen at the end of warm-up.
    pub proposal_scale: f64,
    pub seed: u64,
    pub kind: ChainKind,
    pub warnings: Vec<String>,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn component(&self, i: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s[i]).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let d = self.samples.first().map_or(0, Vec::len);
        let n = self.samples.len() as f64;
        (0..d).map(|i| self.samples.iter().map(|s| s[i]).sum::<f64>() / n).collect()
    }

    /// Columns `iteration,theta0..,log_estimate,accepted`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let d = self.samples.first().map_or(0, Vec::len);
        write!(out, "iteration")?;
        for i in 0..d {
            write!(out, ",theta{i}")?;
        }
        writeln!(out, ",log_estimate,accepted")?;
        for (k, s) in self.samples.iter().enumerate() {
            write!(out, "{k}")?;
            for x in s {
                write!(out, ",{x:e}")?;
            }
            writeln!(out, ",{:e},{}", self.log_estimates[k], u8::from(self.accepted[k]))?;
        }
        Ok(())
    }
}

/// Generic Metropolis–Hastings with Gaussian random-walk proposals
/// `ϑ' = ϑ + s L z`, where `L Lᵀ` is the prior covariance.
///
/// `log_likelihood` returns an estimate of the log-likelihood of its argument;
/// it is called once per proposal and the value is carried with the state, so
/// an unbiased estimator gives a pseudo-marginal chain. Proposals and
/// acceptance draws use stream 0 of `seed`; the estimator gets stream 1.
pub fn metropolis_hastings<F>(
    prior: &GaussianPrior,
    cfg: &McmcConfig,
    seed: u64,
    kind: ChainKind,
    mut log_likelihood: F,
) -> Result<Chain>
where
    F: FnMut(&[f64], &mut RngStream) -> Result<f64>,
{
    cfg.validate()?;
    let d = prior.dim();
    let mut chain_rng = RngStream::new(seed, 0);
    let mut aux_rng = RngStream::new(seed, 1);

    let mut theta = cfg.initial.clone().unwrap_or_else(|| prior.mean().to_vec());
    if theta.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: theta.len() });
    }
    let mut log_prior = prior.log_density(&theta)?;
    let mut log_lik = log_likelihood(&theta, &mut aux_rng)?;
    if !log_lik.is_finite() {
        return Err(Error::InvalidInput("log-likelihood at the initial state is not finite".into()));
    }

    let mut log_scale = cfg.proposal_scale.ln();
    let mut batch_accepts = 0usize;
    let mut batch_index = 0usize;
    let total = cfg.warmup + cfg.n_steps;

    let mut samples = Vec::with_capacity(cfg.n_steps);
    let mut log_estimates = Vec::with_capacity(cfg.n_steps);
    let mut log_accept_history = Vec::with_capacity(cfg.n_steps);
    let mut accepted = Vec::with_capacity(cfg.n_steps);
    let mut z = vec![0.0; d];

    for it in 0..total {
        let scale = log_scale.exp();
        for zi in z.iter_mut() {
            *zi = chain_rng.standard_normal();
        }
        let step = prior.covariance().transform(&z);
        let proposal: Vec<f64> = theta.iter().zip(&step).map(|(t, s)| t + scale * s).collect();
        let prop_prior = prior.log_density(&proposal)?;
        let prop_lik = log_likelihood(&proposal, &mut aux_rng)?;
        let log_alpha = if prop_lik.is_finite() {
            ((prop_lik + prop_prior) - (log_lik + log_prior)).min(0.0)
        } else {
            f64::NEG_INFINITY
        };
        let u: f64 = chain_rng.random();
        let accept = u.ln() < log_alpha;
        if accept {
            theta = proposal;
            log_prior = prop_prior;
            log_lik = prop_lik;
        }

        if it < cfg.warmup {
            batch_accepts += usize::from(accept);
            if (it + 1) % cfg.adapt_batch == 0 {
                let rate = batch_accepts as f64 / cfg.adapt_batch as f64;
                batch_index += 1;
                log_scale += (rate - cfg.target_acceptance) * 2.0 / (batch_index as f64).sqrt();
                batch_accepts = 0;
            }
        } else {
            samples.push(theta.clone());
            log_estimates.push(log_lik);
            log_accept_history.push(log_alpha);
            accepted.push(accept);
        }
    }

    let n_acc = accepted.iter().filter(|&&a| a).count();
    let mut warnings = Vec::new();
    if cfg.stall_window > 0 && accepted.len() >= cfg.stall_window {
        let stalled = accepted.windows(cfg.stall_window).position(|w| !w.contains(&true));
        if let Some(start) = stalled {
            warnings.push(format!(
                "no proposal accepted in the {} iterations starting at {start}",
                cfg.stall_window
            ));
        }
    }
    Ok(Chain {
        acceptance_rate: n_acc as f64 / accepted.len() as f64,
        samples,
        log_estimates,
        log_accept_history,
        accepted,
        proposal_scale: log_scale.exp(),
        seed,
        kind,
        warnings,
    })
}

/// Random-walk Metropolis–Hastings on `π^h(ϑ | 𝒴) ∝ e^{−V^h(ϑ)} π₀(ϑ)` with a
/// deterministic forward solve of step `h`.
pub fn rwmh(ip: &InverseProblem, h: f64, cfg: &McmcConfig, seed: u64) -> Result<Chain> {
    let scheme = Scheme::deterministic(h)?;
    metropolis_hastings(&ip.prior, cfg, seed, ChainKind::Rwmh, |theta, _| ip.log_likelihood(theta, &scheme, None))
}

/// Pseudo-marginal Metropolis–Hastings on `π^h_prob(ϑ | 𝒴)`. Each proposal
/// draws `s` fresh step sequences and uses `log(s⁻¹ Σ e^{−V^{h,ξ_j}})`.
pub fn pmmh(ip: &InverseProblem, dist: &StepDistribution, s: usize, cfg: &McmcConfig, seed: u64) -> Result<Chain> {
    if s == 0 {
        return Err(Error::invalid_param("S", "need at least one estimator sample"));
    }
    let scheme = Scheme::rts(dist.clone());
    let mut logs = vec![0.0; s];
    metropolis_hastings(&ip.prior, cfg, seed, ChainKind::Pmmh, |theta, rng| {
        for l in logs.iter_mut() {
            *l = ip.log_likelihood(theta, &scheme, Some(rng))?;
        }
        Ok(log_mean_exp(&logs))
    })
}

/// `log(n⁻¹ Σ eˣ)` without overflow or underflow.
pub fn log_mean_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let sum: f64 = x.iter().map(|v| (v - m).exp()).sum();
    m + (sum / x.len() as f64).ln()
}

/// Posteriors of the scalar example `y' = −y`, prior `N(0, 1)`, one noisy
/// observation `d` of `y(h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorKind {
    /// Exact flow `e^{−h} y₀`.
    True,
    /// One explicit Euler step `(1 − h) y₀`.
    Det,
    /// Euler plus additive noise of variance `h^{2p+1}`.
    Add,
    /// Euler with a uniform random step.
    Rts,
}

impl PosteriorKind {
    pub const ALL: [PosteriorKind; 4] = [PosteriorKind::True, PosteriorKind::Det, PosteriorKind::Add, PosteriorKind::Rts];

    pub fn as_str(self) -> &'static str {
        match self {
            PosteriorKind::True => "true",
            PosteriorKind::Det => "det",
            PosteriorKind::Add => "add",
            PosteriorKind::Rts => "rts",
        }
    }
}

impl std::str::FromStr for PosteriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PosteriorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown posterior kind `{s}`")))
    }
}

/// Densities sampled on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityGrid {
    pub x: Vec<f64>,
    pub density: Vec<f64>,
    pub dx: f64,
}

impl DensityGrid {
    pub fn mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.dx
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "theta,density")?;
        for (x, p) in self.x.iter().zip(&self.density) {
            writeln!(out, "{x:e},{p:e}")?;
        }
        Ok(())
    }
}

const WINDOW_SDS: f64 = 8.0;
const PRIOR_HALF_WIDTH: f64 = 8.0;
const RTS_NORMALISATION_POINTS: usize = 8001;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearPosterior {
    kind: PosteriorKind,
    h: f64,
    sigma: f64,
    d: f64,
    p: f64,
    window: (f64, f64),
    /// Reciprocal normalising constant of the random-step density.
    log_norm: f64,
}

/// Closed-form (or numerically normalised, for `Rts`) posterior of the scalar
/// example. `p` sets the noise scale of the `Add` and `Rts` kinds.
pub fn linear_analytic_posterior(kind: PosteriorKind, h: f64, sigma: f64, d: f64, p: f64) -> Result<LinearPosterior> {
    if !(h > 0.0 && h < 1.0) {
        return Err(Error::invalid_param("h", "must lie in (0, 1)"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid_param("sigma", "must be positive"));
    }
    if !d.is_finite() {
        return Err(Error::invalid_param("d", "must be finite"));
    }
    if kind == PosteriorKind::Rts {
        StepDistribution::uniform(h, p)?;
    } else if !(p > 0.0 && p.is_finite()) {
        return Err(Error::invalid_param("p", "must be positive"));
    }
    let mut post = LinearPosterior { kind, h, sigma, d, p, window: (0.0, 0.0), log_norm: 0.0 };
    post.window = post.compute_window();
    if kind == PosteriorKind::Rts {
        let (lo, hi) = post.window;
        let n = RTS_NORMALISATION_POINTS;
        let dx = (hi - lo) / (n - 1) as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            acc += w * post.rts_unnormalised(lo + i as f64 * dx);
        }
        let z = acc * dx;
        if !(z > 0.0 && z.is_finite()) {
            return Err(Error::Unnormalized(z));
        }
        post.log_norm = -z.ln();
    }
    Ok(post)
}

impl LinearPosterior {
    pub fn kind(&self) -> PosteriorKind {
        self.kind
    }

    /// Interval carrying all but a negligible fraction of the mass.
    pub fn window(&self) -> (f64, f64) {
        self.window
    }

    /// Mean and variance for the Gaussian kinds.
    pub fn mean_variance(&self) -> Option<(f64, f64)> {
        let (a, s2) = match self.kind {
            PosteriorKind::True => ((-self.h).exp(), self.sigma * self.sigma),
            PosteriorKind::Det => (1.0 - self.h, self.sigma * self.sigma),
            PosteriorKind::Add => (1.0 - self.h, self.sigma * self.sigma + self.h.powf(2.0 * self.p + 1.0)),
            PosteriorKind::Rts => return None,
        };
        let denom = s2 + a * a;
        Some((a * self.d / denom, s2 / denom))
    }

    pub fn density(&self, y0: f64) -> f64 {
        match self.mean_variance() {
            Some((m, v)) => (-(y0 - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt(),
            None => self.rts_unnormalised(y0) * self.log_norm.exp(),
        }
    }

    pub fn grid(&self, n: usize) -> DensityGrid {
        let (lo, hi) = self.window;
        grid_of(lo, hi, n, |x| self.density(x))
    }

    /// Bin-averaged density on `bins` equal bins of `[lo, hi]`, comparable
    /// with a histogram of samples.
    pub fn bin_average(&self, lo: f64, hi: f64, bins: usize) -> DensityGrid {
        const SUB: usize = 32;
        let dx = (hi - lo) / bins as f64;
        let x: Vec<f64> = (0..bins).map(|i| lo + (i as f64 + 0.5) * dx).collect();
        let density = (0..bins)
            .map(|i| {
                let a = lo + i as f64 * dx;
                let sub = dx / SUB as f64;
                (0..SUB).map(|j| self.density(a + (j as f64 + 0.5) * sub)).sum::<f64>() / SUB as f64
            })
            .collect();
        DensityGrid { x, density, dx }
    }

    /// Points where the random-step likelihood factor crosses one half of
    /// its plateau; as `σ → 0` they approach the support endpoints.
    pub fn rts_edges(&self) -> Option<(f64, f64)> {
        if self.kind != PosteriorKind::Rts {
            return None;
        }
        let (a, w) = (1.0 - self.h, self.h.powf(self.p + 0.5));
        let upper = |y: f64| std_normal_cdf(((a + w) * y - self.d) / self.sigma) - 0.5;
        let lower = |y: f64| std_normal_cdf(((a - w) * y - self.d) / self.sigma) - 0.5;
        let (lo, hi) = self.window;
        let e1 = bisect(upper, lo, hi)?;
        let e2 = bisect(lower, lo, hi)?;
        Some((e1.min(e2), e1.max(e2)))
    }

    fn compute_window(&self) -> (f64, f64) {
        if let Some((m, v)) = self.mean_variance() {
            let s = v.sqrt();
            return (m - WINDOW_SDS * s, m + WINDOW_SDS * s);
        }
        // The likelihood is negligible unless some value of (1 − H) y₀ lies
        // within the padded band around d.
        let (a, w) = (1.0 - self.h, self.h.powf(self.p + 0.5));
        let (band_lo, band_hi) = (self.d - WINDOW_SDS * self.sigma, self.d + WINDOW_SDS * self.sigma);
        let clamp = |x: f64| x.clamp(-PRIOR_HALF_WIDTH, PRIOR_HALF_WIDTH);
        let far = |band: f64, slope: f64| if slope > 0.0 { clamp(band / slope) } else { band.signum() * PRIOR_HALF_WIDTH };
        if band_lo > 0.0 {
            (clamp(band_lo / (a + w)), far(band_hi, a - w))
        } else if band_hi < 0.0 {
            (far(band_lo, a - w), clamp(band_hi / (a + w)))
        } else {
            (-PRIOR_HALF_WIDTH, PRIOR_HALF_WIDTH)
        }
    }

    /// `e^{−y₀²/2} E_H N(d; (1 − H) y₀, σ²)` with `H` uniform.
    fn rts_unnormalised(&self, y0: f64) -> f64 {
        let (a, w, s) = (1.0 - self.h, self.h.powf(self.p + 0.5), self.sigma);
        let prior = (-0.5 * y0 * y0).exp();
        let spread = 2.0 * w * y0.abs() / s;
        let lik = if spread < 1e-6 {
            // Degenerate interval: the average collapses to the midpoint value.
            let z = (a * y0 - self.d) / s;
            (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
        } else {
            let hi = ((a + w) * y0 - self.d) / s;
            let lo = ((a - w) * y0 - self.d) / s;
            normal_cdf_diff(lo.min(hi), lo.max(hi)) / (2.0 * w * y0.abs())
        };
        prior * lik
    }
}

/// Limit of the additive-noise posterior as `σ → 0` with `d = e^{−h} y₀*`.
pub fn additive_limit(h: f64, p: f64, y0_true: f64) -> (f64, f64) {
    let (a, n2) = (1.0 - h, h.powf(2.0 * p + 1.0));
    let denom = n2 + a * a;
    (a * (-h).exp() * y0_true / denom, n2 / denom)
}

/// Point mass of the deterministic posterior as `σ → 0`.
pub fn deterministic_limit(h: f64, y0_true: f64) -> f64 {
    (-h).exp() * y0_true / (1.0 - h)
}

/// Support `[y_min, y_max]` of the random-step posterior as `σ → 0`.
pub fn rts_limit_support(h: f64, p: f64, y0_true: f64) -> Result<(f64, f64)> {
    let (a, w) = (1.0 - h, h.powf(p + 0.5));
    if a - w <= 0.0 {
        return Err(Error::invalid_param("h", "1 − h − h^{p+1/2} must be positive for a bounded support"));
    }
    let target = (-h).exp() * y0_true;
    let (e1, e2) = (target / (a + w), target / (a - w));
    Ok((e1.min(e2), e1.max(e2)))
}

/// The `σ → 0` random-step density `∝ e^{−y²/2} / y` on its support.
pub fn rts_limit_density(h: f64, p: f64, y0_true: f64, n: usize) -> Result<DensityGrid> {
    let (lo, hi) = rts_limit_support(h, p, y0_true)?;
    let mut g = grid_of(lo, hi, n, |y| (-0.5 * y * y).exp() / y.abs());
    let z = trapezoid(&g.density, g.dx);
    for v in g.density.iter_mut() {
        *v /= z;
    }
    Ok(g)
}

/// `(½ ∫ (√p − √q)²)^{1/2}` by a Riemann sum over a shared uniform grid.
pub fn hellinger(p: &[f64], q: &[f64], dx: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch { expected: p.len(), got: q.len() });
    }
    if !(dx > 0.0) {
        return Err(Error::invalid_param("dx", "must be positive"));
    }
    for v in [p, q] {
        if v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::InvalidInput("densities must be finite and non-negative".into()));
        }
        let mass = v.iter().sum::<f64>() * dx;
        if (mass - 1.0).abs() > 1e-3 {
            return Err(Error::Unnormalized(mass));
        }
    }
    let s: f64 = p.iter().zip(q).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum();
    Ok((0.5 * s * dx).sqrt().min(1.0))
}

/// Histogram density estimate on `bins` equal bins of `[lo, hi]`; samples
/// outside the interval are dropped but still counted in the total.
pub fn histogram_density(samples: &[f64], lo: f64, hi: f64, bins: usize) -> DensityGrid {
    let dx = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &s in samples {
        if s >= lo && s < hi {
            let i = (((s - lo) / dx) as usize).min(bins - 1);
            counts[i] += 1;
        }
    }
    let n = samples.len() as f64;
    DensityGrid {
        x: (0..bins).map(|i| lo + (i as f64 + 0.5) * dx).collect(),
        density: counts.iter().map(|&c| c as f64 / (n * dx)).collect(),
        dx,
    }
}

fn grid_of(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64) -> DensityGrid {
    let n = n.max(2);
    let dx = (hi - lo) / (n - 1) as f64;
    let x: Vec<f64> = (0..n).map(|i| lo + i as f64 * dx).collect();
    let density = x.iter().map(|&v| f(v)).collect();
    DensityGrid { x, density, dx }
}

fn trapezoid(v: &[f64], dx: f64) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    (v.iter().sum::<f64>() - 0.5 * (v[0] + v[n - 1])) * dx
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `Φ(b) − Φ(a)` for `a ≤ b`, evaluated in whichever tail avoids cancellation.
fn normal_cdf_diff(a: f64, b: f64) -> f64 {
    let r = std::f64::consts::SQRT_2;
    if a > 0.0 {
        0.5 * (erfc(a / r) - erfc(b / r))
    } else {
        0.5 * (erfc(-b / r) - erfc(-a / r))
    }
}

/// Root of an increasing function on `[lo, hi]`, if bracketed.
fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> Option<f64> {
    let (flo, fhi) = (f(lo), f(hi));
    if flo.signum() == fhi.signum() {
        return None;
    }
    let increasing = fhi > flo;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if (f(mid) > 0.0) == increasing {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// The scalar example as an inverse problem: `y' = −y`, one Euler step of
/// size `h`, prior `N(0, 1)`, observation noise `σ²`.
pub fn linear_problem(h: f64, sigma: f64, d: f64) -> Result<InverseProblem> {
    let system = crate::problems::make_problem(crate::problems::ProblemName::LinearDecay, &Default::default())?;
    InverseProblem::initial_condition(
        system,
        Stepper::ExplicitRk(crate::rk::ButcherTableau::euler()),
        h,
        GaussianPrior::isotropic(vec![0.0], 1.0)?,
        Covariance::isotropic(1, sigma * sigma)?,
        vec![d],
    )
}

/// Synthetic data set for inferring an initial condition from one noisy
/// observation of the full state.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticIvp {
    pub truth: Vec<f64>,
    pub clean: Vec<f64>,
    pub data: Vec<f64>,
    pub prior_mean: Vec<f64>,
}

/// Observes `φ_{t_obs}(y₀*)` (high-accuracy reference) with `N(0, σ_ε² I)`
/// noise and centres an isotropic prior of standard deviation `prior_sd` at a
/// perturbation of the truth drawn from that same prior.
pub fn synthetic_ivp(
    system: &OdeSystem,
    truth: &[f64],
    t_obs: f64,
    noise_sd: f64,
    prior_sd: f64,
    seed: u64,
) -> Result<SyntheticIvp> {
    let clean = crate::analysis::reference_solution(system, truth, t_obs, 1e-3)?;
    let mut rng = RngStream::new(seed, 0);
    let data = clean.iter().map(|x| x + noise_sd * rng.standard_normal()).collect();
    let prior_mean = truth.iter().map(|x| x + prior_sd * rng.standard_normal()).collect();
    Ok(SyntheticIvp { truth: truth.to_vec(), clean, data, prior_mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rk::ButcherTableau;

    fn normal_pdf(x: f64, m: f64, v: f64) -> f64 {
        (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
    }

    #[test]
    fn potential_examples() {
        let one = Covariance::isotropic(1, 0.01).unwrap();
        assert_eq!(potential(&[2.0], &[2.0], &one).unwrap(), 0.0);
        assert!((potential(&[1.1], &[1.0], &one).unwrap() - 0.5).abs() < 1e-12);
        let g = [0.3, -0.2];
        let data = [0.1, 0.1];
        let s = Covariance::new(vec![0.02, 0.005, 0.005, 0.03], 2).unwrap();
        let s2 = Covariance::new(vec![0.04, 0.01, 0.01, 0.06], 2).unwrap();
        let v1 = potential(&g, &data, &s).unwrap();
        let v2 = potential(&g, &data, &s2).unwrap();
        assert!((v1 - 2.0 * v2).abs() < 1e-12 * v1);
        // Explicit inverse of the 2×2 matrix.
        let det = 0.02 * 0.03 - 0.005 * 0.005;
        let (r0, r1) = (0.2, -0.3);
        let q = (0.03 * r0 * r0 - 2.0 * 0.005 * r0 * r1 + 0.02 * r1 * r1) / det;
        assert!((v1 - 0.5 * q).abs() < 1e-12 * v1);
    }

    #[test]
    fn covariance_rejects_bad_input() {
        assert!(Covariance::new(vec![1.0, 0.5, 0.4, 1.0], 2).is_err());
        assert!(Covariance::new(vec![1.0, 1.0, 1.0, 1.0], 2).is_err());
        assert!(Covariance::new(vec![-1.0], 1).is_err());
        assert!(Covariance::isotropic(1, 0.0).is_err());
    }

    #[test]
    fn forward_on_linear_example() {
        let ip = linear_problem(0.5, 0.1, 0.6).unwrap();
        let g = ip.forward(&[1.0], &Scheme::deterministic(0.5).unwrap(), None).unwrap();
        assert_eq!(g, vec![0.5]);
        // Euler on y' = −y with realised step 0.3.
        let sys = crate::problems::make_problem(crate::problems::ProblemName::LinearDecay, &Default::default()).unwrap();
        let y = Stepper::ExplicitRk(ButcherTableau::euler()).step(&sys, &[1.0], 0.3).unwrap();
        assert!((y[0] - 0.7).abs() < 1e-15);
        assert!(ip.forward(&[1.0], &Scheme::rts(StepDistribution::uniform(0.5, 1.0).unwrap()), None).is_err());
    }

    #[test]
    fn zero_proposal_scale_rejected() {
        let ip = linear_problem(0.5, 0.1, 0.6).unwrap();
        assert!(rwmh(&ip, 0.5, &McmcConfig::new(10, 0, 0.0), 1).is_err());
        let dist = StepDistribution::uniform(0.5, 1.0).unwrap();
        assert!(pmmh(&ip, &dist, 0, &McmcConfig::new(10, 0, 1.0), 1).is_err());
    }

    #[test]
    fn degenerate_pmmh_matches_rwmh() {
        let ip = linear_problem(0.5, 0.1, 0.6).unwrap();
        let cfg = McmcConfig::new(2000, 500, 1.0);
        let a = rwmh(&ip, 0.5, &cfg, 7).unwrap();
        let dist = StepDistribution::degenerate(0.5).unwrap();
        for s in [1, 4] {
            let b = pmmh(&ip, &dist, s, &cfg, 7).unwrap();
            assert_eq!(a.samples, b.samples);
            assert_eq!(a.accepted, b.accepted);
            assert_eq!(a.log_estimates, b.log_estimates);
        }
    }

    #[test]
    fn chains_reproducible_and_bounded_rates() {
        let ip = linear_problem(0.5, 0.1, 0.6).unwrap();
        let dist = StepDistribution::uniform(0.5, 1.0).unwrap();
        let cfg = McmcConfig::new(1000, 200, 0.5);
        let a = pmmh(&ip, &dist, 2, &cfg, 3).unwrap();
        let b = pmmh(&ip, &dist, 2, &cfg, 3).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a.acceptance_rate));
        let c = pmmh(&ip, &dist, 2, &cfg, 4).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn constant_shift_leaves_decisions_unchanged() {
        let prior = GaussianPrior::isotropic(vec![0.0, 0.0], 1.0).unwrap();
        let cfg = McmcConfig::new(3000, 300, 0.8);
        let lik = |t: &[f64]| -((t[0] - 0.3).powi(2) + (t[1] + 0.2).powi(2)) / 0.5;
        let a = metropolis_hastings(&prior, &cfg, 11, ChainKind::Rwmh, |t, _| Ok(lik(t))).unwrap();
        let b = metropolis_hastings(&prior, &cfg, 11, ChainKind::Rwmh, |t, _| Ok(lik(t) - 37.5)).unwrap();
        assert_eq!(a.accepted, b.accepted);
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn adaptation_reaches_target_rate() {
        let prior = GaussianPrior::isotropic(vec![0.0; 3], 1.0).unwrap();
        let cfg = McmcConfig::new(20_000, 5_000, 5.0);
        let chain = metropolis_hastings(&prior, &cfg, 5, ChainKind::Rwmh, |t, _| {
            Ok(-t.iter().map(|x| x * x).sum::<f64>() / (2.0 * 0.04))
        })
        .unwrap();
        assert!((chain.acceptance_rate - 0.25).abs() < 0.08, "{}", chain.acceptance_rate);
    }

    #[test]
    fn stall_produces_warning() {
        let prior = GaussianPrior::isotropic(vec![0.0], 1.0).unwrap();
        let mut cfg = McmcConfig::new(500, 0, 1.0);
        cfg.stall_window = 100;
        let chain = metropolis_hastings(&prior, &cfg, 1, ChainKind::Rwmh, |t, _| {
            Ok(if t[0] == 0.0 { 0.0 } else { f64::NEG_INFINITY })
        })
        .unwrap();
        assert_eq!(chain.acceptance_rate, 0.0);
        assert_eq!(chain.warnings.len(), 1);
    }

    #[test]
    fn log_mean_exp_survives_underflow() {
        let v = log_mean_exp(&[-2000.0, -2000.0 + 2f64.ln()]);
        assert!((v - (-2000.0 + 1.5f64.ln())).abs() < 1e-12);
        assert_eq!(log_mean_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn true_posterior_mean() {
        let d = (-0.5f64).exp();
        let post = linear_analytic_posterior(PosteriorKind::True, 0.5, 0.1, d, 1.0).unwrap();
        let (m, _) = post.mean_variance().unwrap();
        let expected = (-1f64).exp() / (0.01 + (-1f64).exp());
        assert!((m - expected).abs() < 1e-14);
        assert!((m - 0.97354).abs() < 1e-5);
    }

    #[test]
    fn additive_is_det_with_inflated_noise() {
        let (h, s, d) = (0.3, 0.2, 0.7);
        let add = linear_analytic_posterior(PosteriorKind::Add, h, s, d, 1.0).unwrap();
        let det = linear_analytic_posterior(PosteriorKind::Det, h, (s * s + h.powi(3)).sqrt(), d, 1.0).unwrap();
        let (a, b) = (add.mean_variance().unwrap(), det.mean_variance().unwrap());
        assert!((a.0 - b.0).abs() < 1e-14 && (a.1 - b.1).abs() < 1e-14);
    }

    #[test]
    fn det_concentrates_as_noise_vanishes() {
        let h: f64 = 0.5;
        let d = (-h).exp();
        let post = linear_analytic_posterior(PosteriorKind::Det, h, 1e-7, d, 1.0).unwrap();
        let (m, v) = post.mean_variance().unwrap();
        assert!((m - deterministic_limit(h, 1.0)).abs() < 1e-10);
        assert!(v < 1e-12);
    }

    #[test]
    fn gaussian_kinds_integrate_to_one() {
        for kind in PosteriorKind::ALL {
            let post = linear_analytic_posterior(kind, 0.5, 0.1, 0.6, 1.0).unwrap();
            let g = post.grid(4001);
            assert!((trapezoid(&g.density, g.dx) - 1.0).abs() < 1e-6, "{kind:?}");
        }
    }

    #[test]
    fn rts_density_matches_direct_quadrature() {
        // Average the Gaussian likelihood over the uniform step by brute force.
        let (h, s, d, p) = (0.5, 0.1, 0.65, 1.0);
        let post = linear_analytic_posterior(PosteriorKind::Rts, h, s, d, p).unwrap();
        let w = h.powf(p + 0.5);
        let unnorm = |y: f64| {
            let n = 4000;
            let avg: f64 = (0..n)
                .map(|i| {
                    let hk = h - w + 2.0 * w * (i as f64 + 0.5) / n as f64;
                    normal_pdf(d, (1.0 - hk) * y, s * s)
                })
                .sum::<f64>()
                / n as f64;
            (-0.5 * y * y).exp() * avg
        };
        let ys = [0.6, 0.8, 1.0, 1.5, 2.5];
        let ratios: Vec<f64> = ys.iter().map(|&y| post.density(y) / unnorm(y)).collect();
        for r in &ratios {
            assert!((r / ratios[0] - 1.0).abs() < 1e-5, "{ratios:?}");
        }
    }

    #[test]
    fn rts_density_finite_at_origin_and_negative_side() {
        let post = linear_analytic_posterior(PosteriorKind::Rts, 0.5, 0.5, 0.05, 1.0).unwrap();
        let at0 = post.density(0.0);
        let near = post.density(1e-9);
        assert!(at0.is_finite() && at0 > 0.0);
        assert!((at0 - near).abs() < 1e-6 * at0);
        assert!(post.density(-0.3) > 0.0);
    }

    #[test]
    fn small_noise_limits() {
        let (h, p, y0): (f64, f64, f64) = (0.5, 1.0, 1.0);
        let d = (-h).exp() * y0;
        let add = linear_analytic_posterior(PosteriorKind::Add, h, 1e-9, d, p).unwrap();
        let (m, v) = add.mean_variance().unwrap();
        let (lm, lv) = additive_limit(h, p, y0);
        assert!((m - lm).abs() < 1e-10 && (v - lv).abs() < 1e-10);
        let rts = linear_analytic_posterior(PosteriorKind::Rts, h, 1e-9, d, p).unwrap();
        let (e1, e2) = rts.rts_edges().unwrap();
        let (ymin, ymax) = rts_limit_support(h, p, y0).unwrap();
        assert!((e1 - ymin).abs() < 1e-10 && (e2 - ymax).abs() < 1e-10);
        let lim = rts_limit_density(h, p, y0, 2001).unwrap();
        assert!((trapezoid(&lim.density, lim.dx) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hellinger_examples() {
        let g = grid_of(-12.0, 13.0, 25_001, |x| normal_pdf(x, 0.0, 1.0));
        let q = grid_of(-12.0, 13.0, 25_001, |x| normal_pdf(x, 1.0, 1.0));
        assert!(hellinger(&g.density, &g.density, g.dx).unwrap() < 1e-15);
        let expected = (1.0 - (-0.125f64).exp()).sqrt();
        assert!((hellinger(&g.density, &q.density, g.dx).unwrap() - expected).abs() < 1e-6);
        let a = [1.0, 1.0, 0.0, 0.0];
        let b = [0.0, 0.0, 1.0, 1.0];
        assert!((hellinger(&a, &b, 0.5).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(hellinger(&[1.0, 1.0], &[1.0, 1.0], 1.0), Err(Error::Unnormalized(_))));
    }

    #[test]
    fn histogram_normalised() {
        let mut rng = RngStream::new(1, 0);
        let s: Vec<f64> = (0..10_000).map(|_| rng.standard_normal()).collect();
        let h = histogram_density(&s, -8.0, 8.0, 64);
        assert!((h.mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prior_sampling_moments() {
        let cov = Covariance::new(vec![1.0, 0.6, 0.6, 2.0], 2).unwrap();
        let prior = GaussianPrior::new(vec![1.0, -1.0], cov).unwrap();
        let mut rng = RngStream::new(9, 0);
        let n = 100_000;
        let xs: Vec<Vec<f64>> = (0..n).map(|_| prior.sample(&mut rng)).collect();
        let m0 = xs.iter().map(|x| x[0]).sum::<f64>() / n as f64;
        let c01 = xs.iter().map(|x| (x[0] - 1.0) * (x[1] + 1.0)).sum::<f64>() / n as f64;
        assert!((m0 - 1.0).abs() < 0.02);
        assert!((c01 - 0.6).abs() < 0.03);
    }
}
