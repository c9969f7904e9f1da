//! Random step-size laws and reproducible random streams.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepLaw {
    /// `U(h − h^{p+1/2}, h + h^{p+1/2})`, variance `h^{2p+1}/3`.
    Uniform,
    /// Lognormal with `σ² = log(1 + h^{2p})`, mean `h`; its variance is `h^{2p+2}`.
    Lognormal,
    /// Lognormal with `σ² = log(1 + h^{2p−1})`, mean `h` and variance `h^{2p+1}`.
    LognormalCorrected,
    /// Always `h`.
    Degenerate,
}

impl StepLaw {
    pub fn as_str(self) -> &'static str {
        match self {
            StepLaw::Uniform => "uniform",
            StepLaw::Lognormal => "lognormal",
            StepLaw::LognormalCorrected => "lognormal_corrected",
            StepLaw::Degenerate => "degenerate",
        }
    }
}

impl fmt::Display for StepLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StepLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(StepLaw::Uniform),
            "lognormal" => Ok(StepLaw::Lognormal),
            "lognormal_corrected" => Ok(StepLaw::LognormalCorrected),
            "degenerate" => Ok(StepLaw::Degenerate),
            other => Err(Error::InvalidDistribution(format!("unknown step law `{other}`"))),
        }
    }
}

/// Law of the i.i.d. steps `H_k` with `E H = h` and `Var H = C h^{2p+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution {
    law: StepLaw,
    h: f64,
    p: f64,
    // uniform: [lo, lo + width); lognormal: (mu, sigma)
    a: f64,
    b: f64,
}

impl StepDistribution {
    pub fn new(law: StepLaw, h: f64, p: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidDistribution(format!("mean step must be positive, got h = {h}")));
        }
        if law != StepLaw::Degenerate && !p.is_finite() {
            return Err(Error::InvalidDistribution(format!("noise exponent must be finite, got p = {p}")));
        }
        let (a, b) = match law {
            StepLaw::Uniform => {
                // p = 1/2 puts the lower endpoint at 0, which still has probability zero.
                if !(h < 1.0) {
                    return Err(Error::InvalidDistribution(format!("uniform steps need h < 1, got {h}")));
                }
                if !(p >= 0.5) {
                    return Err(Error::InvalidDistribution(format!(
                        "uniform steps need p >= 1/2 for positive support, got p = {p}"
                    )));
                }
                let half_width = h.powf(p + 0.5);
                (h - half_width, 2.0 * half_width)
            }
            StepLaw::Lognormal | StepLaw::LognormalCorrected => {
                if !(p > 0.5) {
                    return Err(Error::InvalidDistribution(format!("lognormal steps need p > 1/2, got p = {p}")));
                }
                let exponent = if law == StepLaw::Lognormal { 2.0 * p } else { 2.0 * p - 1.0 };
                let sigma2 = h.powf(exponent).ln_1p();
                (h.ln() - 0.5 * sigma2, sigma2.sqrt())
            }
            StepLaw::Degenerate => (h, 0.0),
        };
        Ok(Self { law, h, p, a, b })
    }

    pub fn uniform(h: f64, p: f64) -> Result<Self> {
        Self::new(StepLaw::Uniform, h, p)
    }

    pub fn lognormal(h: f64, p: f64) -> Result<Self> {
        Self::new(StepLaw::Lognormal, h, p)
    }

    pub fn lognormal_corrected(h: f64, p: f64) -> Result<Self> {
        Self::new(StepLaw::LognormalCorrected, h, p)
    }

    pub fn degenerate(h: f64) -> Result<Self> {
        Self::new(StepLaw::Degenerate, h, f64::INFINITY)
    }

    pub fn law(&self) -> StepLaw {
        self.law
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Same law and exponent around a different mean step.
    pub fn with_h(&self, h: f64) -> Result<Self> {
        Self::new(self.law, h, self.p)
    }

    /// `C = Var H / h^{2p+1}`. For the uncorrected lognormal this depends on `h`.
    pub fn variance_constant(&self) -> f64 {
        match self.law {
            StepLaw::Uniform => 1.0 / 3.0,
            StepLaw::LognormalCorrected => 1.0,
            StepLaw::Lognormal => self.h,
            StepLaw::Degenerate => 0.0,
        }
    }

    /// Support `[lo, hi]`; unbounded above for the lognormal laws.
    pub fn support(&self) -> (f64, f64) {
        match self.law {
            StepLaw::Uniform => (self.a, self.a + self.b),
            StepLaw::Lognormal | StepLaw::LognormalCorrected => (0.0, f64::INFINITY),
            StepLaw::Degenerate => (self.h, self.h),
        }
    }

    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        match self.law {
            StepLaw::Uniform => loop {
                let u: f64 = rng.random();
                let x = self.a + self.b * u;
                if x > 0.0 {
                    return x;
                }
            },
            StepLaw::Lognormal | StepLaw::LognormalCorrected => {
                let z: f64 = rng.sample(StandardNormal);
                (self.a + self.b * z).exp()
            }
            StepLaw::Degenerate => self.h,
        }
    }

    /// `E H^r` in closed form.
    pub fn raw_moment(&self, r: f64) -> f64 {
        match self.law {
            StepLaw::Uniform => {
                let (lo, hi) = self.support();
                (hi.powf(r + 1.0) - lo.powf(r + 1.0)) / ((r + 1.0) * (hi - lo))
            }
            StepLaw::Lognormal | StepLaw::LognormalCorrected => (r * self.a + 0.5 * r * r * self.b * self.b).exp(),
            StepLaw::Degenerate => self.h.powf(r),
        }
    }

    /// Lognormal sampler with the stored parameters, for callers wanting a `rand_distr` object.
    pub fn lognormal_distribution(&self) -> Option<LogNormal<f64>> {
        match self.law {
            StepLaw::Lognormal | StepLaw::LognormalCorrected => LogNormal::new(self.a, self.b).ok(),
            _ => None,
        }
    }
}

/// `sample_step` in free-function form.
pub fn sample_step(dist: &StepDistribution, rng: &mut RngStream) -> f64 {
    dist.sample(rng)
}

/// Closed-form `(E H, Var H)`.
pub fn analytic_moments(dist: &StepDistribution) -> (f64, f64) {
    let h = dist.h;
    match dist.law {
        StepLaw::Uniform => (h, h.powf(2.0 * dist.p + 1.0) / 3.0),
        StepLaw::Lognormal | StepLaw::LognormalCorrected => {
            let s2 = dist.b * dist.b;
            let mean = (dist.a + 0.5 * s2).exp();
            (mean, s2.exp_m1() * (2.0 * dist.a + s2).exp())
        }
        StepLaw::Degenerate => (h, 0.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentCheck {
    pub r: u32,
    /// Monte Carlo mean of `H^r − h^r`.
    pub empirical: f64,
    pub standard_error: f64,
    /// `E H^r − h^r` by quadrature against the density.
    pub quadrature: f64,
    /// `(E H^r − h^r) / h^{2p+r−1}`.
    pub c_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub n: usize,
    pub min: f64,
    pub mean: f64,
    pub variance: f64,
    pub c_estimate: f64,
    pub moments: Vec<MomentCheck>,
}

/// Empirical check of positivity, mean `h`, variance `C h^{2p+1}` and the
/// higher-moment relation `E H^r − h^r = C_r h^{2p+r−1}` for `r ∈ {2, 3, 4}`.
pub fn validate_assumption1(
    dist: &StepDistribution,
    n: usize,
    tol: f64,
    rng: &mut RngStream,
) -> Result<AssumptionReport> {
    if n < 10_000 {
        return Err(Error::InsufficientSamples(format!("need at least 10^4 draws, got {n}")));
    }
    let h = dist.h;
    const RS: [u32; 3] = [2, 3, 4];
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut s1, mut s2) = (0.0, 0.0);
    let mut centred = [0.0f64; 4];
    let mut power = [[0.0f64; 2]; 3];
    let samples: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    for &x in &samples {
        min = min.min(x);
        max = max.max(x);
        s1 += x;
    }
    let nf = n as f64;
    let mean = s1 / nf;
    for &x in &samples {
        let dx = x - mean;
        s2 += dx * dx;
        centred[0] += dx.powi(4);
        for (slot, r) in power.iter_mut().zip(RS) {
            let v = x.powi(r as i32) - h.powi(r as i32);
            slot[0] += v;
            slot[1] += v * v;
        }
    }
    // a constant sample has zero variance even when the running mean rounds
    let variance = if min == max { 0.0 } else { s2 / (nf - 1.0) };
    let m4 = centred[0] / nf;

    let mut violations = Vec::new();
    if !(min > 0.0) {
        violations.push(format!("positivity: minimum draw {min}"));
    }
    let mean_se = (variance / nf).sqrt();
    if (mean - h).abs() > tol * h + 3.0 * mean_se {
        violations.push(format!("mean: {mean} vs h = {h}"));
    }
    let (_, target_var) = analytic_moments(dist);
    let var_se = ((m4 - variance * variance).max(0.0) / nf).sqrt();
    if target_var == 0.0 {
        if variance != 0.0 {
            violations.push(format!("variance: {variance} for a degenerate law"));
        }
    } else if (variance - target_var).abs() > tol * target_var + 3.0 * var_se {
        violations.push(format!("variance: {variance} vs {target_var}"));
    }
    let c_estimate = if dist.law == StepLaw::Degenerate { 0.0 } else { variance / h.powf(2.0 * dist.p + 1.0) };

    let mut moments = Vec::new();
    for (slot, r) in power.iter().zip(RS) {
        let empirical = slot[0] / nf;
        let second = slot[1] / nf;
        let standard_error = ((second - empirical * empirical).max(0.0) / nf).sqrt();
        let quadrature = moment_by_quadrature(dist, r) - h.powi(r as i32);
        let scale = if dist.law == StepLaw::Degenerate { 1.0 } else { h.powf(2.0 * dist.p + r as f64 - 1.0) };
        let c_r = empirical / scale;
        let slack = tol * quadrature.abs() + 3.0 * standard_error + 1e-15 * h.powi(r as i32);
        if (empirical - quadrature).abs() > slack {
            violations.push(format!("E(H^{r} - h^{r}): {empirical} vs quadrature {quadrature}"));
        }
        if dist.law != StepLaw::Degenerate && !(quadrature > 0.0) {
            violations.push(format!("C_{r} must be positive, quadrature gives {quadrature}"));
        }
        moments.push(MomentCheck { r, empirical, standard_error, quadrature, c_r });
    }
    if violations.is_empty() {
        Ok(AssumptionReport { n, min, mean, variance, c_estimate, moments })
    } else {
        Err(Error::AssumptionViolated(violations))
    }
}

/// `E H^r` by composite Simpson quadrature of the density.
fn moment_by_quadrature(dist: &StepDistribution, r: u32) -> f64 {
    const PANELS: usize = 4000;
    let integrate = |lo: f64, hi: f64, g: &dyn Fn(f64) -> f64| {
        let dx = (hi - lo) / PANELS as f64;
        let mut acc = g(lo) + g(hi);
        for i in 1..PANELS {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * g(lo + dx * i as f64);
        }
        acc * dx / 3.0
    };
    match dist.law {
        StepLaw::Degenerate => dist.h.powi(r as i32),
        StepLaw::Uniform => {
            let (lo, hi) = dist.support();
            integrate(lo, hi, &|x| x.powi(r as i32)) / (hi - lo)
        }
        StepLaw::Lognormal | StepLaw::LognormalCorrected => {
            // integrate over z = log H, which is normal
            let (mu, sigma) = (dist.a, dist.b);
            let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
            integrate(mu - 12.0 * sigma, mu + 12.0 * sigma, &|z| {
                norm * (-(z - mu).powi(2) / (2.0 * sigma * sigma)).exp() * (r as f64 * z).exp()
            })
        }
    }
}

/// Reproducible random stream: ChaCha8 keyed by `seed`, with `stream_id` selecting
/// an independent substream. Equal `(seed, stream_id)` pairs give equal sequences.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self { seed, stream_id, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.sample(StandardNormal)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Derives an independent seed for a sub-experiment (splitmix64 finalizer).
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::Distribution;

    fn sample_variance(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    }

    #[test]
    fn uniform_support_and_variance() {
        let d = StepDistribution::uniform(0.25, 1.0).unwrap();
        assert_eq!(d.support(), (0.125, 0.375));
        let mut rng = RngStream::new(1, 0);
        let xs: Vec<f64> = (0..1_000_000).map(|_| d.sample(&mut rng)).collect();
        assert!(xs.iter().all(|&x| (0.125..=0.375).contains(&x)));
        let target = 0.25f64.powi(3) / 3.0;
        assert!((target - 0.005_208_33).abs() < 1e-8);
        assert!((sample_variance(&xs) / target - 1.0).abs() < 0.01);
    }

    #[test]
    fn degenerate_is_constant() {
        let d = StepDistribution::degenerate(0.01).unwrap();
        let mut rng = RngStream::new(3, 9);
        assert!((0..100).all(|_| d.sample(&mut rng) == 0.01));
        assert_eq!(analytic_moments(&d), (0.01, 0.0));
        assert_eq!(d.variance_constant(), 0.0);
    }

    #[test]
    fn analytic_moment_values() {
        let d = StepDistribution::uniform(0.25, 1.0).unwrap();
        let (m, v) = analytic_moments(&d);
        assert_eq!(m, 0.25);
        assert!((v - 0.25f64.powi(3) / 3.0).abs() < 1e-18);

        let ln = StepDistribution::lognormal(0.1, 1.0).unwrap();
        let (m, v) = analytic_moments(&ln);
        assert!((m - 0.1).abs() < 1e-15);
        // printed parametrization: variance h^{2p+2}
        assert!((v / 0.1f64.powi(4) - 1.0).abs() < 1e-10);

        let lc = StepDistribution::lognormal_corrected(0.1, 1.0).unwrap();
        let (m, v) = analytic_moments(&lc);
        assert!((m - 0.1).abs() < 1e-15);
        assert!((v / 0.1f64.powi(3) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn lognormal_mean_by_monte_carlo() {
        for d in [StepDistribution::lognormal(0.1, 1.0).unwrap(), StepDistribution::lognormal_corrected(0.1, 1.0).unwrap()]
        {
            let mut rng = RngStream::new(5, 0);
            let n = 200_000;
            let xs: Vec<f64> = (0..n).map(|_| d.sample(&mut rng)).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let se = (sample_variance(&xs) / n as f64).sqrt();
            assert!((mean - 0.1).abs() < 4.0 * se, "{:?}: {mean}", d.law());
            let via_distr = d.lognormal_distribution().unwrap();
            let mut rng = RngStream::new(5, 0);
            assert!(via_distr.sample(&mut rng) > 0.0);
        }
    }

    #[test]
    fn assumption_check_passes_for_uniform() {
        let d = StepDistribution::uniform(0.25, 1.0).unwrap();
        let report = validate_assumption1(&d, 1_000_000, 0.02, &mut RngStream::new(7, 0)).unwrap();
        assert!((report.c_estimate - 1.0 / 3.0).abs() < 0.01);
        assert!(report.min > 0.0);
        for m in &report.moments {
            assert!(m.quadrature > 0.0);
            let closed = d.raw_moment(m.r as f64) - 0.25f64.powi(m.r as i32);
            assert!((m.quadrature - closed).abs() < 1e-12 * closed.abs().max(1e-12));
        }
    }

    #[test]
    fn assumption_check_passes_for_degenerate_and_lognormal() {
        let d = StepDistribution::degenerate(0.1).unwrap();
        let report = validate_assumption1(&d, 10_000, 0.02, &mut RngStream::new(7, 0)).unwrap();
        assert_eq!(report.variance, 0.0);
        let lc = StepDistribution::lognormal_corrected(0.05, 1.5).unwrap();
        let report = validate_assumption1(&lc, 200_000, 0.02, &mut RngStream::new(8, 0)).unwrap();
        assert!((report.c_estimate - 1.0).abs() < 0.05);
    }

    #[test]
    fn assumption_check_rejects_small_samples() {
        let d = StepDistribution::uniform(0.25, 1.0).unwrap();
        assert!(matches!(
            validate_assumption1(&d, 100, 0.02, &mut RngStream::new(0, 0)),
            Err(Error::InsufficientSamples(_))
        ));
    }

    #[test]
    fn construction_guards() {
        assert!(StepDistribution::uniform(0.5, 0.4).is_err());
        assert!(StepDistribution::uniform(1.0, 1.0).is_err());
        assert!(StepDistribution::uniform(-0.1, 1.0).is_err());
        assert!(StepDistribution::uniform(0.5, 0.5).is_ok());
        assert!(StepDistribution::lognormal(0.1, 0.5).is_err());
        assert!(StepDistribution::degenerate(0.0).is_err());
        assert!("cauchy".parse::<StepLaw>().is_err());
        for law in [StepLaw::Uniform, StepLaw::Lognormal, StepLaw::LognormalCorrected, StepLaw::Degenerate] {
            assert_eq!(law.as_str().parse::<StepLaw>().unwrap(), law);
        }
    }

    #[test]
    fn half_exponent_uniform_stays_positive() {
        let d = StepDistribution::uniform(0.3, 0.5).unwrap();
        assert_eq!(d.support().0, 0.0);
        let mut rng = RngStream::new(2, 2);
        assert!((0..100_000).all(|_| d.sample(&mut rng) > 0.0));
    }

    #[test]
    fn variance_scaling_slope() {
        for p in [1.0, 1.5, 2.0] {
            let hs: Vec<f64> = (0..5).map(|i| 0.1 * 0.5f64.powi(i)).collect();
            let vars: Vec<f64> = hs
                .iter()
                .enumerate()
                .map(|(i, &h)| {
                    let d = StepDistribution::uniform(h, p).unwrap();
                    let mut rng = RngStream::new(11, i as u64);
                    let xs: Vec<f64> = (0..200_000).map(|_| d.sample(&mut rng)).collect();
                    sample_variance(&xs)
                })
                .collect();
            let n = hs.len() as f64;
            let lx: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
            let ly: Vec<f64> = vars.iter().map(|v| v.ln()).collect();
            let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
            let slope = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
                / lx.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
            assert!((slope - (2.0 * p + 1.0)).abs() < 0.05, "p={p}: {slope}");
        }
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = RngStream::new(42, 3);
        let mut b = RngStream::new(42, 3);
        let mut c = RngStream::new(42, 4);
        let xa: Vec<u64> = (0..16).map(|_| rand::RngCore::next_u64(&mut a)).collect();
        let xb: Vec<u64> = (0..16).map(|_| rand::RngCore::next_u64(&mut b)).collect();
        let xc: Vec<u64> = (0..16).map(|_| rand::RngCore::next_u64(&mut c)).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_eq!(derive_seed(9, 9), derive_seed(9, 9));
    }

    proptest! {
        #[test]
        fn uniform_draws_stay_in_support(h in 0.001f64..0.9, p in 0.5f64..5.0, seed in any::<u64>()) {
            let d = StepDistribution::uniform(h, p).unwrap();
            let (lo, hi) = d.support();
            let mut rng = RngStream::new(seed, 0);
            for _ in 0..64 {
                let x = d.sample(&mut rng);
                prop_assert!(x > 0.0 && x >= lo && x <= hi);
            }
        }

        #[test]
        fn analytic_mean_is_h(h in 0.001f64..0.9, p in 0.51f64..5.0) {
            for d in [
                StepDistribution::uniform(h, p).unwrap(),
                StepDistribution::lognormal(h, p).unwrap(),
                StepDistribution::lognormal_corrected(h, p).unwrap(),
            ] {
                let (m, _) = analytic_moments(&d);
                prop_assert!((m - h).abs() <= 1e-12 * h);
            }
        }
    }
}
