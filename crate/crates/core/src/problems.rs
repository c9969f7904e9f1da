//! Catalogue of autonomous test systems `y' = f(y)`.
//!
//! Every system carries its right-hand side, a default initial condition and
//! whatever exact structure is known: closed-form flows, first integrals and,
//! for Hamiltonian systems, the energy together with its partial gradients.
//!
//! Hamiltonian states are ordered `y = (v, w)` (momenta first, positions
//! second) so that `y' = J⁻¹∇Q(y)` reads `v' = -∇_w Q`, `w' = ∇_v Q`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};

pub type VectorField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type ExactFlow = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;
/// Row-major `dim × dim` Jacobian written into the output slice.
pub type JacobianFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Partial gradient of a Hamiltonian: `(v, w, out)`.
pub type HalfGradient = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Model parameter overrides keyed by name.
pub type Params = BTreeMap<String, f64>;

#[derive(Clone)]
pub enum FirstIntegral {
    Linear { name: String, weights: Vec<f64> },
    /// `yᵀCy`, with `C` symmetric and stored row-major.
    Quadratic { name: String, dim: usize, matrix: Vec<f64> },
    Generic { name: String, dim: usize, func: ScalarField },
}

impl FirstIntegral {
    pub fn linear(name: &str, weights: Vec<f64>) -> Self {
        FirstIntegral::Linear { name: name.to_string(), weights }
    }

    pub fn quadratic(name: &str, dim: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != dim * dim {
            return Err(Error::DimensionMismatch { expected: dim * dim, got: matrix.len() });
        }
        for i in 0..dim {
            for j in 0..i {
                if matrix[i * dim + j] != matrix[j * dim + i] {
                    return Err(Error::InvalidInput(format!(
                        "quadratic integral `{name}` needs a symmetric matrix"
                    )));
                }
            }
        }
        Ok(FirstIntegral::Quadratic { name: name.to_string(), dim, matrix })
    }

    pub fn generic(name: &str, dim: usize, func: ScalarField) -> Self {
        FirstIntegral::Generic { name: name.to_string(), dim, func }
    }

    pub fn name(&self) -> &str {
        match self {
            FirstIntegral::Linear { name, .. }
            | FirstIntegral::Quadratic { name, .. }
            | FirstIntegral::Generic { name, .. } => name,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            FirstIntegral::Linear { weights, .. } => weights.len(),
            FirstIntegral::Quadratic { dim, .. } | FirstIntegral::Generic { dim, .. } => *dim,
        }
    }

    /// Evaluates `I(y)`.
    pub fn eval(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: y.len() });
        }
        Ok(self.eval_unchecked(y))
    }

    pub(crate) fn eval_unchecked(&self, y: &[f64]) -> f64 {
        match self {
            FirstIntegral::Linear { weights, .. } => dot(weights, y),
            FirstIntegral::Quadratic { dim, matrix, .. } => {
                let mut acc = 0.0;
                for i in 0..*dim {
                    let row = &matrix[i * dim..(i + 1) * dim];
                    acc += y[i] * dot(row, y);
                }
                acc
            }
            FirstIntegral::Generic { func, .. } => func(y),
        }
    }
}

impl fmt::Debug for FirstIntegral {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FirstIntegral::Linear { name, weights } => {
                f.debug_struct("Linear").field("name", name).field("weights", weights).finish()
            }
            FirstIntegral::Quadratic { name, dim, .. } => {
                f.debug_struct("Quadratic").field("name", name).field("dim", dim).finish()
            }
            FirstIntegral::Generic { name, dim, .. } => {
                f.debug_struct("Generic").field("name", name).field("dim", dim).finish()
            }
        }
    }
}

/// Energy of a canonical Hamiltonian system on `(v, w) ∈ R^{2d}`.
#[derive(Clone)]
pub struct HamiltonianStructure {
    half_dim: usize,
    energy: ScalarField,
    grad_v: HalfGradient,
    grad_w: HalfGradient,
    separable: bool,
}

impl HamiltonianStructure {
    pub fn new(
        half_dim: usize,
        energy: ScalarField,
        grad_v: HalfGradient,
        grad_w: HalfGradient,
        separable: bool,
    ) -> Self {
        Self { half_dim, energy, grad_v, grad_w, separable }
    }

    pub fn half_dim(&self) -> usize {
        self.half_dim
    }

    pub fn dim(&self) -> usize {
        2 * self.half_dim
    }

    /// True when `Q(v, w) = Q₁(v) + Q₂(w)`: `∇_v Q` ignores `w` and `∇_w Q` ignores `v`.
    pub fn is_separable(&self) -> bool {
        self.separable
    }

    pub fn energy(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: y.len() });
        }
        Ok((self.energy)(y))
    }

    pub fn grad_v(&self, v: &[f64], w: &[f64], out: &mut [f64]) {
        (self.grad_v)(v, w, out)
    }

    pub fn grad_w(&self, v: &[f64], w: &[f64], out: &mut [f64]) {
        (self.grad_w)(v, w, out)
    }

    /// The vector field `J⁻¹∇Q`.
    pub fn vector_field(&self, y: &[f64], out: &mut [f64]) {
        let d = self.half_dim;
        let (v, w) = y.split_at(d);
        let (dv, dw) = out.split_at_mut(d);
        (self.grad_w)(v, w, dv);
        for x in dv.iter_mut() {
            *x = -*x;
        }
        (self.grad_v)(v, w, dw);
    }
}

impl fmt::Debug for HamiltonianStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HamiltonianStructure")
            .field("half_dim", &self.half_dim)
            .field("separable", &self.separable)
            .finish()
    }
}

/// An autonomous ODE `y' = f(y)` with optional exact structure.
#[derive(Clone)]
pub struct OdeSystem {
    name: String,
    dim: usize,
    rhs: VectorField,
    default_y0: Vec<f64>,
    exact_flow: Option<ExactFlow>,
    jacobian: Option<JacobianFn>,
    integrals: Vec<FirstIntegral>,
    hamiltonian: Option<HamiltonianStructure>,
}

impl fmt::Debug for OdeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OdeSystem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("default_y0", &self.default_y0)
            .field("exact_flow", &self.exact_flow.is_some())
            .field("jacobian", &self.jacobian.is_some())
            .field("integrals", &self.integrals)
            .field("hamiltonian", &self.hamiltonian)
            .finish()
    }
}

impl OdeSystem {
    pub fn new(name: &str, default_y0: Vec<f64>, rhs: VectorField) -> Result<Self> {
        if default_y0.is_empty() {
            return Err(Error::InvalidInput("system dimension must be positive".into()));
        }
        Ok(Self {
            name: name.to_string(),
            dim: default_y0.len(),
            rhs,
            default_y0,
            exact_flow: None,
            jacobian: None,
            integrals: Vec::new(),
            hamiltonian: None,
        })
    }

    /// The zero vector field, handy for trivial reductions.
    pub fn zero(default_y0: Vec<f64>) -> Self {
        let rhs: VectorField = Arc::new(|_, out: &mut [f64]| out.fill(0.0));
        let mut sys = Self::new("zero", default_y0, rhs).expect("non-empty state");
        sys.exact_flow = Some(Arc::new(|_, y: &[f64]| y.to_vec()));
        sys.jacobian = Some(Arc::new(|_, out: &mut [f64]| out.fill(0.0)));
        sys
    }

    /// Hamiltonian system whose vector field is `J⁻¹∇Q`.
    pub fn hamiltonian(name: &str, default_y0: Vec<f64>, ham: HamiltonianStructure) -> Result<Self> {
        if default_y0.len() != ham.dim() {
            return Err(Error::DimensionMismatch { expected: ham.dim(), got: default_y0.len() });
        }
        let h = ham.clone();
        let rhs: VectorField = Arc::new(move |y, out| h.vector_field(y, out));
        let mut sys = Self::new(name, default_y0, rhs)?;
        sys.hamiltonian = Some(ham);
        Ok(sys)
    }

    pub fn with_exact_flow(mut self, flow: ExactFlow) -> Self {
        self.exact_flow = Some(flow);
        self
    }

    pub fn with_jacobian(mut self, jac: JacobianFn) -> Self {
        self.jacobian = Some(jac);
        self
    }

    pub fn with_integral(mut self, integral: FirstIntegral) -> Result<Self> {
        if integral.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: integral.dim() });
        }
        self.integrals.push(integral);
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn default_y0(&self) -> &[f64] {
        &self.default_y0
    }

    pub fn integrals(&self) -> &[FirstIntegral] {
        &self.integrals
    }

    pub fn integral(&self, name: &str) -> Option<&FirstIntegral> {
        self.integrals.iter().find(|i| i.name() == name)
    }

    pub fn hamiltonian_structure(&self) -> Option<&HamiltonianStructure> {
        self.hamiltonian.as_ref()
    }

    pub fn has_exact_flow(&self) -> bool {
        self.exact_flow.is_some()
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.jacobian.is_some()
    }

    #[inline]
    pub fn rhs_into(&self, y: &[f64], out: &mut [f64]) {
        (self.rhs)(y, out)
    }

    pub fn rhs(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(y)?;
        let mut out = vec![0.0; self.dim];
        (self.rhs)(y, &mut out);
        Ok(out)
    }

    pub fn exact_flow(&self, t: f64, y: &[f64]) -> Option<Vec<f64>> {
        self.exact_flow.as_ref().map(|flow| flow(t, y))
    }

    /// Writes the Jacobian of `f` at `y` (row-major). Systems without an
    /// analytic Jacobian use central differences with step `1e-7·max(1, |y_i|)`.
    pub fn jacobian_into(&self, y: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        if let Some(jac) = &self.jacobian {
            jac(y, out);
            return;
        }
        let d = self.dim;
        let (probe, rest) = scratch.split_at_mut(d);
        let (fp, rest) = rest.split_at_mut(d);
        let fm = &mut rest[..d];
        probe.copy_from_slice(y);
        for j in 0..d {
            let step = 1e-7 * y[j].abs().max(1.0);
            probe[j] = y[j] + step;
            (self.rhs)(probe, fp);
            probe[j] = y[j] - step;
            (self.rhs)(probe, fm);
            probe[j] = y[j];
            for i in 0..d {
                out[i * d + j] = (fp[i] - fm[i]) / (2.0 * step);
            }
        }
    }

    pub(crate) fn check_dim(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: y.len() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProblemName {
    Lorenz,
    LinearDecay,
    FitzhughNagumo,
    OlsenPeroxide,
    KeplerPerturbed,
    Pendulum,
    HenonHeiles,
    /// Closed susceptible-infected-recovered cycle; conserves total mass.
    Sirs,
}

impl ProblemName {
    pub const ALL: [ProblemName; 8] = [
        ProblemName::Lorenz,
        ProblemName::LinearDecay,
        ProblemName::FitzhughNagumo,
        ProblemName::OlsenPeroxide,
        ProblemName::KeplerPerturbed,
        ProblemName::Pendulum,
        ProblemName::HenonHeiles,
        ProblemName::Sirs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProblemName::Lorenz => "lorenz",
            ProblemName::LinearDecay => "linear_decay",
            ProblemName::FitzhughNagumo => "fitzhugh_nagumo",
            ProblemName::OlsenPeroxide => "olsen_peroxide",
            ProblemName::KeplerPerturbed => "kepler_perturbed",
            ProblemName::Pendulum => "pendulum",
            ProblemName::HenonHeiles => "henon_heiles",
            ProblemName::Sirs => "sirs",
        }
    }

    /// Default parameter values; these are also the only keys accepted as overrides.
    pub fn default_params(self) -> Params {
        let pairs: &[(&str, f64)] = match self {
            ProblemName::Lorenz => &[("sigma", 10.0), ("rho", 28.0), ("beta", 8.0 / 3.0)],
            ProblemName::LinearDecay => &[("lambda", 1.0), ("y0", 1.0)],
            ProblemName::FitzhughNagumo => &[("a", 0.2), ("b", 0.2), ("c", 3.0)],
            ProblemName::OlsenPeroxide => &[
                ("k1", 0.35),
                ("k2", 250.0),
                ("k3", 0.035),
                ("k4", 20.0),
                ("k5", 5.35),
                ("k6", 1e-5),
                ("k7", 0.1),
                ("k8", 0.825),
                ("a0", 8.0),
                ("b0", 1.0),
                ("x0", 1.0),
            ],
            ProblemName::KeplerPerturbed => &[("delta", 0.015), ("e", 0.6)],
            ProblemName::Pendulum => &[("v0", 1.5), ("w0", -PI)],
            ProblemName::HenonHeiles => &[("energy", 0.13), ("w1", 0.0), ("w2", 0.1)],
            ProblemName::Sirs => &[("beta", 1.5), ("nu", 0.5), ("gamma", 0.2)],
        };
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }
}

impl fmt::Display for ProblemName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProblemName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProblemName::ALL
            .iter()
            .copied()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::UnknownProblem(s.to_string()))
    }
}

/// Builds a catalogued system, applying `overrides` on top of its defaults.
pub fn make_problem(name: ProblemName, overrides: &Params) -> Result<OdeSystem> {
    let mut params = name.default_params();
    for (key, value) in overrides {
        if !params.contains_key(key) {
            return Err(Error::invalid_param(key, format!("not a parameter of {name}")));
        }
        if !value.is_finite() {
            return Err(Error::invalid_param(key, "must be finite"));
        }
        params.insert(key.clone(), *value);
    }
    let p = |k: &str| params[k];
    match name {
        ProblemName::Lorenz => Ok(lorenz(p("sigma"), p("rho"), p("beta"))),
        ProblemName::LinearDecay => Ok(linear_decay(p("lambda"), p("y0"))),
        ProblemName::FitzhughNagumo => Ok(fitzhugh_nagumo(p("a"), p("b"), p("c"))),
        ProblemName::OlsenPeroxide => {
            let k = [p("k1"), p("k2"), p("k3"), p("k4"), p("k5"), p("k6"), p("k7"), p("k8")];
            if let Some(i) = k.iter().position(|&r| r < 0.0) {
                return Err(Error::invalid_param(&format!("k{}", i + 1), "rates must be non-negative"));
            }
            Ok(olsen_peroxide(k, p("a0"), p("b0"), p("x0")))
        }
        ProblemName::KeplerPerturbed => {
            let e = p("e");
            if !(0.0..1.0).contains(&e) {
                return Err(Error::invalid_param("e", "eccentricity must satisfy 0 <= e < 1 (1 - e > 0)"));
            }
            kepler_perturbed(p("delta"), e)
        }
        ProblemName::Pendulum => pendulum(p("v0"), p("w0")),
        ProblemName::HenonHeiles => henon_heiles(p("energy"), p("w1"), p("w2")),
        ProblemName::Sirs => {
            for key in ["beta", "nu", "gamma"] {
                if p(key) < 0.0 {
                    return Err(Error::invalid_param(key, "rates must be non-negative"));
                }
            }
            Ok(sirs(p("beta"), p("nu"), p("gamma")))
        }
    }
}

/// Evaluates a first integral, checking dimensions.
pub fn eval_integral(integral: &FirstIntegral, y: &[f64]) -> Result<f64> {
    integral.eval(y)
}

/// Evaluates a Hamiltonian, checking dimensions.
pub fn eval_energy(ham: &HamiltonianStructure, y: &[f64]) -> Result<f64> {
    ham.energy(y)
}

fn lorenz(sigma: f64, rho: f64, beta: f64) -> OdeSystem {
    let rhs: VectorField = Arc::new(move |y, out| {
        out[0] = sigma * (y[1] - y[0]);
        out[1] = y[0] * (rho - y[2]) - y[1];
        out[2] = y[0] * y[1] - beta * y[2];
    });
    OdeSystem::new("lorenz", vec![-10.0, -1.0, 40.0], rhs).expect("static dimension")
}

fn linear_decay(lambda: f64, y0: f64) -> OdeSystem {
    let rhs: VectorField = Arc::new(move |y, out| out[0] = -lambda * y[0]);
    OdeSystem::new("linear_decay", vec![y0], rhs)
        .expect("static dimension")
        .with_exact_flow(Arc::new(move |t, y| vec![y[0] * (-lambda * t).exp()]))
        .with_jacobian(Arc::new(move |_, out| out[0] = -lambda))
}

fn fitzhugh_nagumo(a: f64, b: f64, c: f64) -> OdeSystem {
    let rhs: VectorField = Arc::new(move |y, out| {
        out[0] = c * (y[0] - y[0] * y[0] * y[0] / 3.0 + y[1]);
        out[1] = -(y[0] - a + b * y[1]) / c;
    });
    OdeSystem::new("fitzhugh_nagumo", vec![-1.0, 1.0], rhs).expect("static dimension")
}

/// Peroxidase-oxidase reaction; state `(A, B, X, Y)`.
fn olsen_peroxide(k: [f64; 8], a0: f64, b0: f64, x0: f64) -> OdeSystem {
    let [k1, k2, k3, k4, k5, k6, k7, k8] = k;
    let rhs: VectorField = Arc::new(move |y, out| {
        let (a, b, x, yy) = (y[0], y[1], y[2], y[3]);
        let aby = k3 * a * b * yy;
        out[0] = k7 * (a0 - a) - aby;
        out[1] = k8 * b0 - k1 * b * x - aby;
        out[2] = k1 * b * x - 2.0 * k2 * x * x + 3.0 * aby - k4 * x + k6 * x0;
        out[3] = 2.0 * k2 * x * x - k5 * yy - aby;
    });
    OdeSystem::new("olsen_peroxide", vec![6.0, 58.0, 0.0, 0.0], rhs).expect("static dimension")
}

/// Perturbed Kepler problem; state `(v1, v2, w1, w2)`.
fn kepler_perturbed(delta: f64, e: f64) -> Result<OdeSystem> {
    let energy: ScalarField = Arc::new(move |y| {
        let r = y[2].hypot(y[3]);
        0.5 * (y[0] * y[0] + y[1] * y[1]) - 1.0 / r - delta / (3.0 * r * r * r)
    });
    let grad_v: HalfGradient = Arc::new(|v, _, out| out.copy_from_slice(v));
    let grad_w: HalfGradient = Arc::new(move |_, w, out| {
        let r2 = w[0] * w[0] + w[1] * w[1];
        let r = r2.sqrt();
        let r3 = r2 * r;
        let scale = 1.0 / r3 + delta / (r3 * r2);
        out[0] = scale * w[0];
        out[1] = scale * w[1];
    });
    let ham = HamiltonianStructure::new(2, energy.clone(), grad_v, grad_w, true);
    let y0 = vec![0.0, ((1.0 + e) / (1.0 - e)).sqrt(), 1.0 - e, 0.0];
    // w1 v2 - w2 v1 as yᵀCy
    #[rustfmt::skip]
    let c = vec![
        0.0, 0.0, 0.0, -0.5,
        0.0, 0.0, 0.5, 0.0,
        0.0, 0.5, 0.0, 0.0,
        -0.5, 0.0, 0.0, 0.0,
    ];
    OdeSystem::hamiltonian("kepler_perturbed", y0, ham)?
        .with_integral(FirstIntegral::quadratic("angular_momentum", 4, c)?)?
        .with_integral(FirstIntegral::generic("energy", 4, energy))
}

/// Mathematical pendulum `Q(v, w) = v²/2 - cos w`; state `(v, w)`.
fn pendulum(v0: f64, w0: f64) -> Result<OdeSystem> {
    let energy: ScalarField = Arc::new(|y| 0.5 * y[0] * y[0] - y[1].cos());
    let grad_v: HalfGradient = Arc::new(|v, _, out| out[0] = v[0]);
    let grad_w: HalfGradient = Arc::new(|_, w, out| out[0] = w[0].sin());
    let ham = HamiltonianStructure::new(1, energy.clone(), grad_v, grad_w, true);
    Ok(OdeSystem::hamiltonian("pendulum", vec![v0, w0], ham)?
        .with_jacobian(Arc::new(|y, out| {
            out[0] = 0.0;
            out[1] = -y[1].cos();
            out[2] = 1.0;
            out[3] = 0.0;
        }))
        .with_integral(FirstIntegral::generic("energy", 2, energy))?)
}

fn henon_heiles_potential(w: &[f64]) -> f64 {
    0.5 * (w[0] * w[0] + w[1] * w[1]) + w[0] * w[0] * w[1] - w[1] * w[1] * w[1] / 3.0
}

/// Hénon–Heiles system; state `(v1, v2, w1, w2)`. The initial condition sits
/// at position `(w1, w2)` with `v1 = 0` and `v2 ≥ 0` chosen to hit `energy`.
fn henon_heiles(energy_level: f64, w1: f64, w2: f64) -> Result<OdeSystem> {
    let potential = henon_heiles_potential(&[w1, w2]);
    let kinetic = energy_level - potential;
    if kinetic < 0.0 {
        return Err(Error::invalid_param(
            "energy",
            format!("energy {energy_level} lies below the potential {potential} at the initial position"),
        ));
    }
    let energy: ScalarField = Arc::new(|y| 0.5 * (y[0] * y[0] + y[1] * y[1]) + henon_heiles_potential(&y[2..]));
    let grad_v: HalfGradient = Arc::new(|v, _, out| out.copy_from_slice(v));
    let grad_w: HalfGradient = Arc::new(|_, w, out| {
        out[0] = w[0] + 2.0 * w[0] * w[1];
        out[1] = w[1] + w[0] * w[0] - w[1] * w[1];
    });
    let ham = HamiltonianStructure::new(2, energy.clone(), grad_v, grad_w, true);
    let y0 = vec![0.0, (2.0 * kinetic).sqrt(), w1, w2];
    OdeSystem::hamiltonian("henon_heiles", y0, ham)?.with_integral(FirstIntegral::generic("energy", 4, energy))
}

/// `S + I -> 2I`, `I -> R`, `R -> S`; state `(S, I, R)`.
fn sirs(beta: f64, nu: f64, gamma: f64) -> OdeSystem {
    let rhs: VectorField = Arc::new(move |y, out| {
        let infection = beta * y[0] * y[1];
        let recovery = nu * y[1];
        let waning = gamma * y[2];
        out[0] = -infection + waning;
        out[1] = infection - recovery;
        out[2] = recovery - waning;
    });
    OdeSystem::new("sirs", vec![0.9, 0.1, 0.0], rhs)
        .expect("static dimension")
        .with_integral(FirstIntegral::linear("mass", vec![1.0, 1.0, 1.0]))
        .expect("matching dimension")
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn problem(name: ProblemName) -> OdeSystem {
        make_problem(name, &Params::new()).unwrap()
    }

    #[test]
    fn fitzhugh_nagumo_rhs_at_initial_condition() {
        let f = problem(ProblemName::FitzhughNagumo).rhs(&[-1.0, 1.0]).unwrap();
        assert!((f[0] - 1.0).abs() < 1e-15);
        assert!((f[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn linear_decay_flow_is_identity_at_zero() {
        let sys = problem(ProblemName::LinearDecay);
        assert_eq!(sys.exact_flow(0.0, &[1.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn kepler_angular_momentum_at_y0() {
        let sys = problem(ProblemName::KeplerPerturbed);
        let am = sys.integral("angular_momentum").unwrap();
        let value = eval_integral(am, sys.default_y0()).unwrap();
        assert!((value - 0.8).abs() < 1e-14, "{value}");
    }

    #[test]
    fn pendulum_energy_values() {
        let sys = problem(ProblemName::Pendulum);
        let ham = sys.hamiltonian_structure().unwrap();
        assert!((eval_energy(ham, &[1.5, -PI]).unwrap() - 2.125).abs() < 1e-15);
        assert_eq!(eval_energy(ham, &[0.0, 0.0]).unwrap(), -1.0);
        let integral = sys.integral("energy").unwrap();
        assert!((eval_integral(integral, &[1.5, -PI]).unwrap() - 2.125).abs() < 1e-15);
    }

    #[test]
    fn henon_heiles_energy_level() {
        let sys = problem(ProblemName::HenonHeiles);
        let q = eval_energy(sys.hamiltonian_structure().unwrap(), sys.default_y0()).unwrap();
        assert!((q - 0.13).abs() < 1e-15);
        let y0 = sys.default_y0();
        assert_eq!((y0[0], y0[2], y0[3]), (0.0, 0.0, 0.1));
        assert!(y0[1] >= 0.0);
    }

    #[test]
    fn catalogue_defaults() {
        assert_eq!(problem(ProblemName::Lorenz).default_y0(), &[-10.0, -1.0, 40.0]);
        assert_eq!(problem(ProblemName::FitzhughNagumo).default_y0(), &[-1.0, 1.0]);
        assert_eq!(problem(ProblemName::OlsenPeroxide).default_y0(), &[6.0, 58.0, 0.0, 0.0]);
        assert_eq!(problem(ProblemName::Pendulum).default_y0(), &[1.5, -PI]);
        for name in ProblemName::ALL {
            assert_eq!(name.as_str().parse::<ProblemName>().unwrap(), name);
        }
    }

    #[test]
    fn rejects_bad_names_and_parameters() {
        assert!(matches!("duffing".parse::<ProblemName>(), Err(Error::UnknownProblem(_))));
        let mut params = Params::new();
        params.insert("e".into(), 1.0);
        assert!(matches!(
            make_problem(ProblemName::KeplerPerturbed, &params),
            Err(Error::InvalidParameter { .. })
        ));
        let mut params = Params::new();
        params.insert("omega".into(), 1.0);
        assert!(make_problem(ProblemName::Pendulum, &params).is_err());
        let mut params = Params::new();
        params.insert("energy".into(), -1.0);
        assert!(make_problem(ProblemName::HenonHeiles, &params).is_err());
    }

    #[test]
    fn integral_dimension_mismatch() {
        let sys = problem(ProblemName::KeplerPerturbed);
        let am = sys.integral("angular_momentum").unwrap();
        assert!(matches!(eval_integral(am, &[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
        let ham = sys.hamiltonian_structure().unwrap();
        assert!(eval_energy(ham, &[1.0; 3]).is_err());
    }

    #[test]
    fn linear_integral_is_linear() {
        let mass = FirstIntegral::linear("mass", vec![1.0; 4]);
        let y = [6.0, 58.0, 0.3, 0.1];
        let shifted = [6.5, 57.0, 0.6, 0.3];
        let a = mass.eval(&y).unwrap();
        let b = mass.eval(&shifted).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn catalogued_linear_integrals_annihilate_rhs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for name in ProblemName::ALL {
            let sys = problem(name);
            for integral in sys.integrals() {
                let FirstIntegral::Linear { weights, .. } = integral else { continue };
                for _ in 0..100 {
                    let y: Vec<f64> = (0..sys.dim()).map(|_| rng.random_range(0.0..2.0)).collect();
                    let f = sys.rhs(&y).unwrap();
                    assert!(dot(weights, &f).abs() <= 1e-12 * norm(weights) * norm(&f).max(1e-300));
                }
            }
        }
    }

    #[test]
    fn exact_flow_semigroup() {
        let sys = problem(ProblemName::LinearDecay);
        for &(s, t, y) in &[(0.3, 0.7, 1.0), (1.5, 0.25, -2.0), (0.0, 3.0, 0.5)] {
            let lhs = sys.exact_flow(s, &sys.exact_flow(t, &[y]).unwrap()).unwrap();
            let rhs = sys.exact_flow(s + t, &[y]).unwrap();
            assert!((lhs[0] - rhs[0]).abs() <= 1e-12);
        }
    }

    #[test]
    fn hamiltonian_vector_fields_match_energy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for name in [ProblemName::KeplerPerturbed, ProblemName::Pendulum, ProblemName::HenonHeiles] {
            let sys = problem(name);
            let ham = sys.hamiltonian_structure().unwrap();
            let d = ham.half_dim();
            for _ in 0..20 {
                let y: Vec<f64> = (0..sys.dim()).map(|_| rng.random_range(0.4..1.2)).collect();
                let f = sys.rhs(&y).unwrap();
                // J⁻¹∇Q by central differences of the energy.
                let mut grad = vec![0.0; y.len()];
                for (j, g) in grad.iter_mut().enumerate() {
                    let step = 1e-6;
                    let mut yp = y.clone();
                    let mut ym = y.clone();
                    yp[j] += step;
                    ym[j] -= step;
                    *g = (ham.energy(&yp).unwrap() - ham.energy(&ym).unwrap()) / (2.0 * step);
                }
                let mut expected = vec![0.0; y.len()];
                for i in 0..d {
                    expected[i] = -grad[d + i];
                    expected[d + i] = grad[i];
                }
                let diff: Vec<f64> = f.iter().zip(&expected).map(|(a, b)| a - b).collect();
                assert!(norm(&diff) <= 1e-6 * norm(&f), "{name}: {f:?} vs {expected:?}");
            }
        }
    }

    #[test]
    fn separable_energies_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for name in [ProblemName::KeplerPerturbed, ProblemName::Pendulum, ProblemName::HenonHeiles] {
            let sys = problem(name);
            let ham = sys.hamiltonian_structure().unwrap();
            assert!(ham.is_separable());
            assert_eq!(ham.dim() % 2, 0);
            let d = ham.half_dim();
            for _ in 0..20 {
                let a: Vec<f64> = (0..2 * d).map(|_| rng.random_range(0.4..1.2)).collect();
                let b: Vec<f64> = (0..2 * d).map(|_| rng.random_range(0.4..1.2)).collect();
                // Q(v_a, w_a) + Q(v_b, w_b) = Q(v_a, w_b) + Q(v_b, w_a) for separable Q.
                let cross_ab: Vec<f64> = a[..d].iter().chain(&b[d..]).copied().collect();
                let cross_ba: Vec<f64> = b[..d].iter().chain(&a[d..]).copied().collect();
                let lhs = ham.energy(&a).unwrap() + ham.energy(&b).unwrap();
                let rhs = ham.energy(&cross_ab).unwrap() + ham.energy(&cross_ba).unwrap();
                assert!((lhs - rhs).abs() <= 1e-13 * lhs.abs().max(1.0));
            }
        }
    }

    #[test]
    fn finite_difference_jacobian_matches_analytic() {
        let sys = problem(ProblemName::Pendulum);
        let stripped = OdeSystem::new("pendulum_fd", vec![1.5, -PI], sys.rhs.clone()).unwrap();
        let y = [0.3, 1.1];
        let mut analytic = [0.0; 4];
        let mut fd = [0.0; 4];
        let mut scratch = [0.0; 6];
        sys.jacobian_into(&y, &mut analytic, &mut scratch);
        stripped.jacobian_into(&y, &mut fd, &mut scratch);
        for (a, b) in analytic.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}
