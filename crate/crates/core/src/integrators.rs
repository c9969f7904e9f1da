//! Trajectory generators: deterministic `Ψ_h`, random time steps `Ψ_{H_k}`, and
//! the additive-noise scheme `Ψ_h(Y_k) + ξ_k` with `ξ_k ~ N(0, scale · h^{2p+1} I)`.

use std::fmt;
use std::str::FromStr;

use rand_distr::StandardNormal;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::OdeSystem;
use crate::rk::{Stepper, Workspace};
use crate::steps::{RngStream, StepDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchemeTag {
    #[serde(rename = "det")]
    Deterministic,
    #[serde(rename = "rts")]
    RtsRk,
    #[serde(rename = "add")]
    AdditiveNoise,
}

impl SchemeTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SchemeTag::Deterministic => "det",
            SchemeTag::RtsRk => "rts",
            SchemeTag::AdditiveNoise => "add",
        }
    }
}

impl fmt::Display for SchemeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "det" => Ok(SchemeTag::Deterministic),
            "rts" => Ok(SchemeTag::RtsRk),
            "add" => Ok(SchemeTag::AdditiveNoise),
            other => Err(Error::InvalidInput(format!("unknown scheme `{other}` (expected det, rts or add)"))),
        }
    }
}

/// How the steps are perturbed.
#[derive(Debug, Clone, PartialEq)]
pub enum Scheme {
    Deterministic { h: f64 },
    RtsRk { dist: StepDistribution },
    /// Noise covariance `scale · h^{2p+1} I`.
    AdditiveNoise { h: f64, p: f64, scale: f64 },
}

impl Scheme {
    pub fn deterministic(h: f64) -> Result<Self> {
        check_h(h)?;
        Ok(Scheme::Deterministic { h })
    }

    pub fn rts(dist: StepDistribution) -> Self {
        Scheme::RtsRk { dist }
    }

    pub fn additive(h: f64, p: f64) -> Result<Self> {
        Self::additive_scaled(h, p, 1.0)
    }

    pub fn additive_scaled(h: f64, p: f64, scale: f64) -> Result<Self> {
        check_h(h)?;
        if !(p >= 1.0) || !p.is_finite() {
            return Err(Error::invalid_param("p", format!("additive noise needs finite p >= 1, got {p}")));
        }
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(Error::invalid_param("scale", format!("noise scale must be non-negative, got {scale}")));
        }
        Ok(Scheme::AdditiveNoise { h, p, scale })
    }

    pub fn tag(&self) -> SchemeTag {
        match self {
            Scheme::Deterministic { .. } => SchemeTag::Deterministic,
            Scheme::RtsRk { .. } => SchemeTag::RtsRk,
            Scheme::AdditiveNoise { .. } => SchemeTag::AdditiveNoise,
        }
    }

    pub fn nominal_h(&self) -> f64 {
        match self {
            Scheme::Deterministic { h } | Scheme::AdditiveNoise { h, .. } => *h,
            Scheme::RtsRk { dist } => dist.h(),
        }
    }

    /// The same scheme at a different mean step.
    pub fn with_h(&self, h: f64) -> Result<Self> {
        match self {
            Scheme::Deterministic { .. } => Scheme::deterministic(h),
            Scheme::RtsRk { dist } => Ok(Scheme::RtsRk { dist: dist.with_h(h)? }),
            Scheme::AdditiveNoise { p, scale, .. } => Scheme::additive_scaled(h, *p, *scale),
        }
    }

    /// True when the output depends on the random stream.
    pub fn is_random(&self) -> bool {
        match self {
            Scheme::Deterministic { .. } => false,
            Scheme::RtsRk { dist } => dist.law() != crate::steps::StepLaw::Degenerate,
            Scheme::AdditiveNoise { scale, .. } => *scale > 0.0,
        }
    }
}

fn check_h(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid_param("h", format!("step must be positive and finite, got {h}")))
    }
}

/// Which step indices a trajectory keeps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Recording {
    Full,
    FinalOnly,
    /// Strictly increasing step indices; `0` and `N` are always added.
    Indices(Vec<usize>),
}

impl Recording {
    fn indices(&self, n: usize) -> Option<Vec<usize>> {
        match self {
            Recording::Full => None,
            Recording::FinalOnly => Some(vec![0, n]),
            Recording::Indices(ix) => {
                let mut v: Vec<usize> = ix.iter().copied().filter(|&k| k <= n).collect();
                v.push(0);
                v.push(n);
                v.sort_unstable();
                v.dedup();
                Some(v)
            }
        }
    }
}

/// Realized states `Y_0..Y_N` of one run (or a recorded subset of them).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dim: usize,
    n_steps: usize,
    states: Vec<f64>,
    /// `None` means every index `0..=N` is stored.
    indices: Option<Vec<usize>>,
    realized_times: Vec<f64>,
    realized_steps: Vec<f64>,
    nominal_h: f64,
    seed: Option<u64>,
    stream_id: Option<u64>,
    scheme: SchemeTag,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of steps `N`.
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of stored states.
    pub fn len(&self) -> usize {
        self.states.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.indices.is_none()
    }

    /// Step indices of the stored states.
    pub fn indices(&self) -> Vec<usize> {
        match &self.indices {
            None => (0..=self.n_steps).collect(),
            Some(ix) => ix.clone(),
        }
    }

    /// Stored state number `j` (not step index).
    pub fn stored(&self, j: usize) -> &[f64] {
        &self.states[j * self.dim..(j + 1) * self.dim]
    }

    /// `Y_k`, if that index was recorded.
    pub fn state(&self, k: usize) -> Result<&[f64]> {
        let j = match &self.indices {
            None if k <= self.n_steps => Some(k),
            None => None,
            Some(ix) => ix.binary_search(&k).ok(),
        };
        match j {
            Some(j) => Ok(self.stored(j)),
            None => Err(Error::IndexOutOfRange { index: k, len: self.n_steps + 1 }),
        }
    }

    pub fn initial_state(&self) -> &[f64] {
        self.stored(0)
    }

    pub fn final_state(&self) -> &[f64] {
        self.stored(self.len() - 1)
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.dim)
    }

    /// Every realized step `H_0..H_{N−1}`; empty unless fully recorded.
    pub fn realized_steps(&self) -> &[f64] {
        &self.realized_steps
    }

    /// `Σ_{j<k} H_j` at each stored index.
    pub fn realized_times(&self) -> &[f64] {
        &self.realized_times
    }

    /// `k · h` at each stored index.
    pub fn nominal_times(&self) -> Vec<f64> {
        self.indices().into_iter().map(|k| k as f64 * self.nominal_h).collect()
    }

    pub fn nominal_h(&self) -> f64 {
        self.nominal_h
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn stream_id(&self) -> Option<u64> {
        self.stream_id
    }

    pub fn scheme(&self) -> SchemeTag {
        self.scheme
    }
}

/// Runs `n` steps of `scheme`, calling `observe(k, Y_k, H_{k−1})` after each
/// step and once for `k = 0` (with a zero step). Returns `Y_N`. Allocates only
/// the workspace up front.
pub fn propagate<F>(
    stepper: &Stepper,
    scheme: &Scheme,
    sys: &OdeSystem,
    y0: &[f64],
    n: usize,
    mut rng: Option<&mut RngStream>,
    mut observe: F,
) -> Result<Vec<f64>>
where
    F: FnMut(usize, &[f64], f64),
{
    sys.check_dim(y0)?;
    if n == 0 {
        return Err(Error::invalid_param("N", "need at least one step"));
    }
    if scheme.is_random() && rng.is_none() {
        return Err(Error::InvalidInput(format!("scheme `{}` needs a random stream", scheme.tag())));
    }
    let d = y0.len();
    let mut ws = Workspace::new(d);
    let mut y = y0.to_vec();
    let mut next = vec![0.0; d];
    observe(0, &y, 0.0);
    for k in 0..n {
        let h = match scheme {
            Scheme::Deterministic { h } | Scheme::AdditiveNoise { h, .. } => *h,
            Scheme::RtsRk { dist } => match rng.as_deref_mut() {
                Some(r) => dist.sample(r),
                None => dist.h(),
            },
        };
        stepper.step_into(sys, &y, h, &mut next, &mut ws).map_err(|e| e.at_step(k, &y))?;
        if let Scheme::AdditiveNoise { h, p, scale } = scheme {
            if *scale > 0.0 {
                let sd = (scale * h.powf(2.0 * p + 1.0)).sqrt();
                let r = rng.as_deref_mut().expect("checked above");
                for x in next.iter_mut() {
                    let z: f64 = r.sample(StandardNormal);
                    *x += sd * z;
                }
                if next.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Divergence { step: k, last_finite: y });
                }
            }
        }
        std::mem::swap(&mut y, &mut next);
        observe(k + 1, &y, h);
    }
    Ok(y)
}

/// Runs a scheme and records the states selected by `recording`.
pub fn integrate(
    stepper: &Stepper,
    scheme: &Scheme,
    sys: &OdeSystem,
    y0: &[f64],
    n: usize,
    mut rng: Option<&mut RngStream>,
    recording: &Recording,
) -> Result<Trajectory> {
    let indices = recording.indices(n);
    let d = y0.len();
    let stored = indices.as_ref().map_or(n + 1, Vec::len);
    let mut states = Vec::with_capacity(stored * d);
    let mut realized_times = Vec::with_capacity(stored);
    let mut realized_steps = if indices.is_none() { Vec::with_capacity(n) } else { Vec::new() };
    let mut cursor = 0;
    let mut t = 0.0;
    let (seed, stream_id) = match rng.as_deref_mut() {
        Some(r) if scheme.is_random() => (Some(r.seed()), Some(r.stream_id())),
        _ => (None, None),
    };
    propagate(stepper, scheme, sys, y0, n, rng, |k, y, step| {
        if k > 0 {
            t += step;
        }
        match &indices {
            None => {
                if k > 0 {
                    realized_steps.push(step);
                }
                states.extend_from_slice(y);
                realized_times.push(t);
            }
            Some(ix) => {
                if cursor < ix.len() && ix[cursor] == k {
                    states.extend_from_slice(y);
                    realized_times.push(t);
                    cursor += 1;
                }
            }
        }
    })?;
    Ok(Trajectory {
        dim: d,
        n_steps: n,
        states,
        indices,
        realized_times,
        realized_steps,
        nominal_h: scheme.nominal_h(),
        seed,
        stream_id,
        scheme: scheme.tag(),
    })
}

/// `y_{k+1} = Ψ_h(y_k)`, `N` times.
pub fn integrate_deterministic(stepper: &Stepper, sys: &OdeSystem, y0: &[f64], h: f64, n: usize) -> Result<Trajectory> {
    integrate(stepper, &Scheme::deterministic(h)?, sys, y0, n, None, &Recording::Full)
}

/// `Y_{k+1} = Ψ_{H_k}(Y_k)` with `H_k` drawn i.i.d. from `dist`.
pub fn integrate_rts_rk(
    stepper: &Stepper,
    dist: &StepDistribution,
    sys: &OdeSystem,
    y0: &[f64],
    n: usize,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    integrate(stepper, &Scheme::rts(dist.clone()), sys, y0, n, Some(rng), &Recording::Full)
}

/// `Y_{k+1} = Ψ_h(Y_k) + ξ_k` with `ξ_k ~ N(0, h^{2p+1} I)`.
pub fn integrate_additive_noise(
    stepper: &Stepper,
    sys: &OdeSystem,
    y0: &[f64],
    h: f64,
    p: f64,
    n: usize,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    integrate(stepper, &Scheme::additive(h, p)?, sys, y0, n, Some(rng), &Recording::Full)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{make_problem, Params, ProblemName, VectorField};
    use std::sync::Arc;

    fn decay() -> OdeSystem {
        make_problem(ProblemName::LinearDecay, &Params::new()).unwrap()
    }

    fn stepper(name: &str) -> Stepper {
        name.parse().unwrap()
    }

    #[test]
    fn deterministic_euler_on_decay() {
        let traj = integrate_deterministic(&stepper("euler"), &decay(), &[1.0], 0.5, 2).unwrap();
        let states: Vec<f64> = traj.states().map(|s| s[0]).collect();
        assert_eq!(states, vec![1.0, 0.5, 0.25]);
        assert_eq!(traj.realized_steps(), &[0.5, 0.5]);
        assert_eq!(traj.nominal_times(), vec![0.0, 0.5, 1.0]);
        assert_eq!(traj.scheme(), SchemeTag::Deterministic);
        assert_eq!(traj.len(), traj.realized_steps().len() + 1);
    }

    #[test]
    fn midpoint_one_step() {
        let traj = integrate_deterministic(&stepper("midpoint"), &decay(), &[1.0], 0.5, 1).unwrap();
        assert!((traj.final_state()[0] - 0.6).abs() < 1e-14);
    }

    #[test]
    fn zero_field_trajectories_are_constant() {
        let zero = OdeSystem::zero(vec![0.7, -0.2]);
        let dist = StepDistribution::uniform(0.1, 1.0).unwrap();
        for name in ["euler", "heun", "rk4", "midpoint", "rkc"] {
            let det = integrate_deterministic(&stepper(name), &zero, &[0.7, -0.2], 0.1, 10).unwrap();
            assert!(det.states().all(|s| s == [0.7, -0.2]));
            let rts =
                integrate_rts_rk(&stepper(name), &dist, &zero, &[0.7, -0.2], 10, &mut RngStream::new(1, 2)).unwrap();
            assert!(rts.states().all(|s| s == [0.7, -0.2]));
        }
    }

    #[test]
    fn degenerate_steps_reproduce_deterministic_bitwise() {
        let sys = make_problem(ProblemName::FitzhughNagumo, &Params::new()).unwrap();
        let y0 = sys.default_y0().to_vec();
        let dist = StepDistribution::degenerate(0.05).unwrap();
        for name in ["euler", "heun", "rk4", "midpoint", "rkc"] {
            let det = integrate_deterministic(&stepper(name), &sys, &y0, 0.05, 40).unwrap();
            let rts = integrate_rts_rk(&stepper(name), &dist, &sys, &y0, 40, &mut RngStream::new(9, 0)).unwrap();
            let a: Vec<u64> = det.states().flatten().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = rts.states().flatten().map(|x| x.to_bits()).collect();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn realized_step_is_used() {
        // Y_1 = (1 - H_0) y_0
        let sys = decay();
        let dist = StepDistribution::uniform(0.25, 1.0).unwrap();
        let traj = integrate_rts_rk(&stepper("euler"), &dist, &sys, &[1.0], 1, &mut RngStream::new(4, 0)).unwrap();
        let h0 = traj.realized_steps()[0];
        assert_ne!(h0, 0.25);
        assert_eq!(traj.final_state()[0], 1.0 - h0);
        assert_eq!(traj.realized_times()[1], h0);
        assert_eq!(traj.seed(), Some(4));
    }

    #[test]
    fn additive_noise_variance() {
        let sys = decay();
        let euler = stepper("euler");
        let runs = 100_000;
        let ys: Vec<f64> = (0..runs)
            .map(|i| {
                let mut rng = RngStream::new(17, i);
                integrate_additive_noise(&euler, &sys, &[1.0], 0.5, 1.0, 1, &mut rng).unwrap().final_state()[0]
            })
            .collect();
        let n = runs as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var / 0.125 - 1.0).abs() < 0.02, "{var}");
        assert!((mean - 0.5).abs() < 3.0 * (0.125 / n).sqrt());
    }

    #[test]
    fn zero_noise_scale_is_deterministic() {
        let sys = make_problem(ProblemName::FitzhughNagumo, &Params::new()).unwrap();
        let y0 = sys.default_y0().to_vec();
        let scheme = Scheme::additive_scaled(0.05, 1.0, 0.0).unwrap();
        let add = integrate(&stepper("heun"), &scheme, &sys, &y0, 20, None, &Recording::Full).unwrap();
        let det = integrate_deterministic(&stepper("heun"), &sys, &y0, 0.05, 20).unwrap();
        assert_eq!(add.final_state(), det.final_state());
    }

    #[test]
    fn additive_noise_preserves_linear_integral_in_mean() {
        let sys = make_problem(ProblemName::Sirs, &Params::new()).unwrap();
        let y0 = sys.default_y0().to_vec();
        let mass = sys.integral("mass").unwrap();
        let target = mass.eval(&stepper("heun").step(&sys, &y0, 0.1).unwrap()).unwrap();
        let runs = 100_000;
        let values: Vec<f64> = (0..runs)
            .map(|i| {
                let mut rng = RngStream::new(23, i);
                let traj = integrate_additive_noise(&stepper("heun"), &sys, &y0, 0.1, 1.0, 1, &mut rng).unwrap();
                mass.eval(traj.final_state()).unwrap()
            })
            .collect();
        let n = runs as f64;
        let mean = values.iter().sum::<f64>() / n;
        let se = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        assert!((mean - target).abs() < 3.0 * se);
    }

    #[test]
    fn rts_conserves_linear_integral_pathwise() {
        let sys = make_problem(ProblemName::Sirs, &Params::new()).unwrap();
        let y0 = sys.default_y0().to_vec();
        let mass = sys.integral("mass").unwrap();
        let i0 = mass.eval(&y0).unwrap();
        let dist = StepDistribution::uniform(0.05, 1.0).unwrap();
        for name in ["euler", "heun", "rk4"] {
            let traj = integrate_rts_rk(&stepper(name), &dist, &sys, &y0, 2000, &mut RngStream::new(5, 1)).unwrap();
            for (k, y) in traj.states().enumerate() {
                let drift = (mass.eval(y).unwrap() - i0).abs();
                assert!(drift <= 1e-12 * k.max(1) as f64 * 3f64.sqrt(), "{name} k={k}: {drift}");
            }
        }
    }

    #[test]
    fn recording_subsets() {
        let sys = decay();
        let scheme = Scheme::deterministic(0.1).unwrap();
        let full = integrate(&stepper("rk4"), &scheme, &sys, &[1.0], 50, None, &Recording::Full).unwrap();
        let last = integrate(&stepper("rk4"), &scheme, &sys, &[1.0], 50, None, &Recording::FinalOnly).unwrap();
        assert_eq!(last.len(), 2);
        assert_eq!(last.final_state(), full.final_state());
        let some =
            integrate(&stepper("rk4"), &scheme, &sys, &[1.0], 50, None, &Recording::Indices(vec![7, 3, 80])).unwrap();
        assert_eq!(some.indices(), vec![0, 3, 7, 50]);
        assert_eq!(some.state(7).unwrap(), full.state(7).unwrap());
        assert!((some.realized_times()[2] - 0.7).abs() < 1e-12);
        assert!(some.state(8).is_err());
        assert!(some.realized_steps().is_empty());
        assert!(full.state(51).is_err());
    }

    #[test]
    fn divergence_reports_step_and_last_state() {
        let rhs: VectorField = Arc::new(|y, out| out[0] = y[0] * y[0]);
        let sys = OdeSystem::new("blowup", vec![1.0], rhs).unwrap();
        let err = integrate_deterministic(&stepper("euler"), &sys, &[1.0], 1.0, 100).unwrap_err();
        match err {
            Error::Divergence { step, last_finite } => {
                assert!(step > 0);
                assert!(last_finite[0].is_finite());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn argument_validation() {
        let sys = decay();
        assert!(integrate_deterministic(&stepper("euler"), &sys, &[1.0], 0.0, 1).is_err());
        assert!(integrate_deterministic(&stepper("euler"), &sys, &[1.0], 0.1, 0).is_err());
        assert!(integrate_deterministic(&stepper("euler"), &sys, &[1.0, 2.0], 0.1, 1).is_err());
        assert!(Scheme::additive(0.1, 0.5).is_err());
        let scheme = Scheme::rts(StepDistribution::uniform(0.1, 1.0).unwrap());
        assert!(integrate(&stepper("euler"), &scheme, &sys, &[1.0], 1, None, &Recording::Full).is_err());
        for tag in [SchemeTag::Deterministic, SchemeTag::RtsRk, SchemeTag::AdditiveNoise] {
            assert_eq!(tag.as_str().parse::<SchemeTag>().unwrap(), tag);
        }
    }
}
