//! Deterministic one-step maps `Ψ_h`.
//!
//! All steppers write into caller-provided buffers and draw scratch space from
//! a [`Workspace`], so an integration loop allocates nothing per step.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::solve_in_place;
use crate::problems::{norm, HamiltonianStructure, OdeSystem};

#[derive(Debug, Clone, PartialEq)]
pub struct ButcherTableau {
    name: &'static str,
    stages: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    order: usize,
}

impl ButcherTableau {
    pub fn new(name: &'static str, a: Vec<f64>, b: Vec<f64>, c: Vec<f64>, order: usize) -> Result<Self> {
        let s = b.len();
        if s == 0 || a.len() != s * s || c.len() != s {
            return Err(Error::InvalidInput(format!("tableau `{name}` has inconsistent shapes")));
        }
        let sum: f64 = b.iter().sum();
        if (sum - 1.0).abs() > 1e-14 {
            return Err(Error::InvalidInput(format!("tableau `{name}` weights sum to {sum}, not 1")));
        }
        Ok(Self { name, stages: s, a, b, c, order })
    }

    pub fn euler() -> Self {
        Self::new("euler", vec![0.0], vec![1.0], vec![0.0], 1).expect("valid tableau")
    }

    /// Explicit trapezoidal rule (Heun's method).
    pub fn heun() -> Self {
        Self::new("heun", vec![0.0, 0.0, 1.0, 0.0], vec![0.5, 0.5], vec![0.0, 1.0], 2).expect("valid tableau")
    }

    pub fn rk4() -> Self {
        #[rustfmt::skip]
        let a = vec![
            0.0, 0.0, 0.0, 0.0,
            0.5, 0.0, 0.0, 0.0,
            0.0, 0.5, 0.0, 0.0,
            0.0, 0.0, 1.0, 0.0,
        ];
        Self::new("rk4", a, vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0], vec![0.0, 0.5, 0.5, 1.0], 4)
            .expect("valid tableau")
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn a(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.stages + j]
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Strictly lower triangular `A`.
    pub fn is_explicit(&self) -> bool {
        (0..self.stages).all(|i| (i..self.stages).all(|j| self.a(i, j) == 0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl NewtonConfig {
    pub fn new(tol: f64, max_iter: usize) -> Result<Self> {
        if !(tol > 0.0) || max_iter == 0 {
            return Err(Error::InvalidInput("Newton config needs tol > 0 and max_iter >= 1".into()));
        }
        Ok(Self { tol, max_iter })
    }
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self { tol: 1e-12, max_iter: 50 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RkcConfig {
    /// Fixed stage count; `None` selects `s = ⌈√(hρ/0.65)⌉` from a spectral radius estimate.
    pub stages: Option<usize>,
    pub damping: f64,
}

impl Default for RkcConfig {
    fn default() -> Self {
        Self { stages: None, damping: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stepper {
    ExplicitRk(ButcherTableau),
    ImplicitMidpoint(NewtonConfig),
    StormerVerlet(NewtonConfig),
    Rkc(RkcConfig),
}

impl Stepper {
    pub const NAMES: [&'static str; 6] = ["euler", "heun", "rk4", "midpoint", "verlet", "rkc"];

    pub fn name(&self) -> &'static str {
        match self {
            Stepper::ExplicitRk(tab) => tab.name(),
            Stepper::ImplicitMidpoint(_) => "midpoint",
            Stepper::StormerVerlet(_) => "verlet",
            Stepper::Rkc(_) => "rkc",
        }
    }

    pub fn order(&self) -> usize {
        match self {
            Stepper::ExplicitRk(tab) => tab.order(),
            Stepper::ImplicitMidpoint(_) | Stepper::StormerVerlet(_) => 2,
            Stepper::Rkc(_) => 1,
        }
    }

    /// Applies `Ψ_h` to `y`, writing the result into `out`.
    pub fn step_into(
        &self,
        sys: &OdeSystem,
        y: &[f64],
        h: f64,
        out: &mut [f64],
        ws: &mut Workspace,
    ) -> Result<(), StepError> {
        match self {
            Stepper::ExplicitRk(tab) => explicit_rk_into(tab, sys, y, h, out, ws),
            Stepper::ImplicitMidpoint(cfg) => implicit_midpoint_into(cfg, sys, y, h, out, ws),
            Stepper::StormerVerlet(cfg) => {
                let ham = sys.hamiltonian_structure().ok_or(StepError::NotHamiltonian)?;
                stormer_verlet_into(ham, cfg, y, h, out, ws)
            }
            Stepper::Rkc(cfg) => {
                let stages = match cfg.stages {
                    Some(s) => s,
                    None => rkc_stage_count(h, spectral_radius(sys, y, ws)),
                };
                // A runaway stiffness estimate means the state has left the
                // regime the problem lives in.
                if stages > RKC_MAX_STAGES {
                    return Err(StepError::Diverged);
                }
                rkc_into(sys, y, h, stages, cfg.damping, out, ws)
            }
        }?;
        if out.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(StepError::Diverged)
        }
    }

    /// Allocating convenience wrapper around [`Stepper::step_into`].
    pub fn step(&self, sys: &OdeSystem, y: &[f64], h: f64) -> Result<Vec<f64>, StepError> {
        let mut ws = Workspace::new(sys.dim());
        let mut out = vec![0.0; sys.dim()];
        self.step_into(sys, y, h, &mut out, &mut ws)?;
        Ok(out)
    }
}

impl fmt::Display for Stepper {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stepper {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "euler" => Stepper::ExplicitRk(ButcherTableau::euler()),
            "heun" => Stepper::ExplicitRk(ButcherTableau::heun()),
            "rk4" => Stepper::ExplicitRk(ButcherTableau::rk4()),
            "midpoint" => Stepper::ImplicitMidpoint(NewtonConfig::default()),
            "verlet" => Stepper::StormerVerlet(NewtonConfig::default()),
            "rkc" => Stepper::Rkc(RkcConfig::default()),
            other => return Err(Error::UnknownStepper(other.to_string())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepError {
    Diverged,
    Newton { iterations: usize, residual: f64 },
    FixedPoint { iterations: usize, residual: f64 },
    NotHamiltonian,
}

impl StepError {
    pub(crate) fn at_step(self, step: usize, last_finite: &[f64]) -> Error {
        match self {
            StepError::Diverged => Error::Divergence { step, last_finite: last_finite.to_vec() },
            StepError::Newton { iterations, residual } => Error::NewtonFailure { step, iterations, residual },
            StepError::FixedPoint { iterations, residual } => {
                Error::FixedPointFailure { step, iterations, residual }
            }
            StepError::NotHamiltonian => {
                Error::InvalidInput("Störmer-Verlet needs a Hamiltonian system".to_string())
            }
        }
    }
}

impl fmt::Display for StepError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepError::Diverged => write!(f, "non-finite state"),
            StepError::Newton { iterations, residual } => {
                write!(f, "Newton did not converge in {iterations} iterations (residual {residual:e})")
            }
            StepError::FixedPoint { iterations, residual } => {
                write!(f, "fixed point did not converge in {iterations} iterations (residual {residual:e})")
            }
            StepError::NotHamiltonian => write!(f, "system has no Hamiltonian structure"),
        }
    }
}

impl std::error::Error for StepError {}

/// Scratch buffers sized for one system dimension.
#[derive(Debug, Clone)]
pub struct Workspace {
    dim: usize,
    stages: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    jac: Vec<f64>,
    scratch: Vec<f64>,
    coeffs: Vec<f64>,
}

impl Workspace {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            stages: vec![0.0; 4 * dim],
            a: vec![0.0; dim],
            b: vec![0.0; dim],
            c: vec![0.0; dim],
            jac: vec![0.0; dim * dim],
            scratch: vec![0.0; 3 * dim],
            coeffs: Vec::new(),
        }
    }

    fn ensure_stages(&mut self, s: usize) {
        if self.stages.len() < s * self.dim {
            self.stages.resize(s * self.dim, 0.0);
        }
    }
}

fn explicit_rk_into(
    tab: &ButcherTableau,
    sys: &OdeSystem,
    y: &[f64],
    h: f64,
    out: &mut [f64],
    ws: &mut Workspace,
) -> Result<(), StepError> {
    let d = y.len();
    let s = tab.stages();
    ws.ensure_stages(s);
    let arg = &mut ws.a;
    for i in 0..s {
        arg.copy_from_slice(y);
        for j in 0..i {
            let aij = tab.a(i, j);
            if aij != 0.0 {
                let kj = &ws.stages[j * d..(j + 1) * d];
                for (x, k) in arg.iter_mut().zip(kj) {
                    *x += h * aij * k;
                }
            }
        }
        sys.rhs_into(arg, &mut ws.stages[i * d..(i + 1) * d]);
    }
    out.copy_from_slice(y);
    for (i, &bi) in tab.b().iter().enumerate() {
        let ki = &ws.stages[i * d..(i + 1) * d];
        for (x, k) in out.iter_mut().zip(ki) {
            *x += h * bi * k;
        }
    }
    Ok(())
}

/// Explicit Runge–Kutta step with `tab.stages()` evaluations of `f`.
pub fn step_explicit_rk(tab: &ButcherTableau, sys: &OdeSystem, y: &[f64], h: f64) -> Result<Vec<f64>> {
    sys.check_dim(y)?;
    if !tab.is_explicit() {
        return Err(Error::InvalidInput(format!("tableau `{}` is not explicit", tab.name())));
    }
    check_step(h)?;
    let mut ws = Workspace::new(y.len());
    let mut out = vec![0.0; y.len()];
    explicit_rk_into(tab, sys, y, h, &mut out, &mut ws).map_err(|e| e.at_step(0, y))?;
    finite_or_diverged(out, y)
}

/// Implicit midpoint: `m = y + (h/2) f(m)` solved by Newton on the increment
/// `z = m - y`, converged once `‖z - (h/2) f(y + z)‖ ≤ tol · max(1, ‖y‖)`.
fn implicit_midpoint_into(
    cfg: &NewtonConfig,
    sys: &OdeSystem,
    y: &[f64],
    h: f64,
    out: &mut [f64],
    ws: &mut Workspace,
) -> Result<(), StepError> {
    let d = y.len();
    let half = 0.5 * h;
    let threshold = cfg.tol * norm(y).max(1.0);
    let Workspace { a: z, b: m, c: fm, jac, scratch, .. } = ws;

    sys.rhs_into(y, fm);
    for i in 0..d {
        z[i] = half * fm[i];
    }
    let mut residual = f64::INFINITY;
    for iteration in 0..=cfg.max_iter {
        for i in 0..d {
            m[i] = y[i] + z[i];
        }
        sys.rhs_into(m, fm);
        // residual G = z - (h/2) f(m), stored negated in `out` as the Newton right-hand side
        let mut sq = 0.0;
        for i in 0..d {
            let g = z[i] - half * fm[i];
            out[i] = -g;
            sq += g * g;
        }
        residual = sq.sqrt();
        if !residual.is_finite() {
            return Err(StepError::Diverged);
        }
        if residual <= threshold {
            for i in 0..d {
                out[i] = y[i] + h * fm[i];
            }
            return Ok(());
        }
        if iteration == cfg.max_iter {
            break;
        }
        sys.jacobian_into(m, jac, scratch);
        for r in 0..d {
            for c in 0..d {
                let ident = if r == c { 1.0 } else { 0.0 };
                jac[r * d + c] = ident - half * jac[r * d + c];
            }
        }
        if !solve_in_place(jac, out, d) {
            return Err(StepError::Newton { iterations: iteration + 1, residual });
        }
        for i in 0..d {
            z[i] += out[i];
        }
    }
    Err(StepError::Newton { iterations: cfg.max_iter, residual })
}

/// Implicit midpoint step; requires a Jacobian (analytic or finite-difference).
pub fn step_implicit_midpoint(cfg: &NewtonConfig, sys: &OdeSystem, y: &[f64], h: f64) -> Result<Vec<f64>> {
    sys.check_dim(y)?;
    check_step(h)?;
    let mut ws = Workspace::new(y.len());
    let mut out = vec![0.0; y.len()];
    implicit_midpoint_into(cfg, sys, y, h, &mut out, &mut ws).map_err(|e| e.at_step(0, y))?;
    finite_or_diverged(out, y)
}

/// Störmer–Verlet. Separable Hamiltonians take the explicit kick-drift-kick
/// form with three gradient evaluations; otherwise the two implicit
/// sub-steps are solved by fixed-point iteration.
fn stormer_verlet_into(
    ham: &HamiltonianStructure,
    cfg: &NewtonConfig,
    y: &[f64],
    h: f64,
    out: &mut [f64],
    ws: &mut Workspace,
) -> Result<(), StepError> {
    let d = ham.half_dim();
    let (v, w) = y.split_at(d);
    let Workspace { a: grad, b: prev, c: grad2, .. } = ws;
    let (grad, grad2, prev) = (&mut grad[..d], &mut grad2[..d], &mut prev[..d]);
    let (v_out, w_out) = out.split_at_mut(d);

    if ham.is_separable() {
        ham.grad_w(v, w, grad);
        for i in 0..d {
            v_out[i] = v[i] - 0.5 * h * grad[i];
        }
        ham.grad_v(v_out, w, grad);
        for i in 0..d {
            w_out[i] = w[i] + h * grad[i];
        }
        ham.grad_w(v_out, w_out, grad);
        for i in 0..d {
            v_out[i] -= 0.5 * h * grad[i];
        }
        return Ok(());
    }

    let threshold = |x: &[f64]| cfg.tol * norm(x).max(1.0);

    // v_{1/2} = v - (h/2) ∇_w Q(v_{1/2}, w)
    v_out.copy_from_slice(v);
    let mut converged = false;
    let mut residual = f64::INFINITY;
    for _ in 0..cfg.max_iter {
        prev.copy_from_slice(v_out);
        ham.grad_w(prev, w, grad);
        let mut sq = 0.0;
        for i in 0..d {
            v_out[i] = v[i] - 0.5 * h * grad[i];
            sq += (v_out[i] - prev[i]).powi(2);
        }
        residual = sq.sqrt();
        if !residual.is_finite() {
            return Err(StepError::Diverged);
        }
        if residual <= threshold(v) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(StepError::FixedPoint { iterations: cfg.max_iter, residual });
    }

    // w_{n+1} = w + (h/2)(∇_v Q(v_{1/2}, w) + ∇_v Q(v_{1/2}, w_{n+1}))
    ham.grad_v(v_out, w, grad2);
    w_out.copy_from_slice(w);
    converged = false;
    for _ in 0..cfg.max_iter {
        prev.copy_from_slice(w_out);
        ham.grad_v(v_out, prev, grad);
        let mut sq = 0.0;
        for i in 0..d {
            w_out[i] = w[i] + 0.5 * h * (grad2[i] + grad[i]);
            sq += (w_out[i] - prev[i]).powi(2);
        }
        residual = sq.sqrt();
        if !residual.is_finite() {
            return Err(StepError::Diverged);
        }
        if residual <= threshold(w) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(StepError::FixedPoint { iterations: cfg.max_iter, residual });
    }

    ham.grad_w(v_out, w_out, grad);
    for i in 0..d {
        v_out[i] -= 0.5 * h * grad[i];
    }
    Ok(())
}

pub fn step_stormer_verlet(ham: &HamiltonianStructure, y: &[f64], h: f64) -> Result<Vec<f64>> {
    if y.len() != ham.dim() {
        return Err(Error::DimensionMismatch { expected: ham.dim(), got: y.len() });
    }
    if !h.is_finite() || h == 0.0 {
        return Err(Error::InvalidInput(format!("step must be finite and non-zero, got {h}")));
    }
    let mut ws = Workspace::new(y.len());
    let mut out = vec![0.0; y.len()];
    stormer_verlet_into(ham, &NewtonConfig::default(), y, h, &mut out, &mut ws)
        .map_err(|e| e.at_step(0, y))?;
    finite_or_diverged(out, y)
}

/// First-order damped Runge–Kutta–Chebyshev step with `stages` stages.
fn rkc_into(
    sys: &OdeSystem,
    y: &[f64],
    h: f64,
    stages: usize,
    damping: f64,
    out: &mut [f64],
    ws: &mut Workspace,
) -> Result<(), StepError> {
    let d = y.len();
    let s = stages.max(1);
    rkc_coefficients(s, damping, &mut ws.coeffs);
    let (w0, w1) = (ws.coeffs[0], ws.coeffs[1]);
    let b = &ws.coeffs[2..];

    // The recurrence is carried on increments D_j = Y_j - Y_0, so that
    // Y_j = (1 - μ - ν)Y_0 + μY_{j-1} + νY_{j-2} + μ̃hF(Y_{j-1}) becomes
    // D_j = μD_{j-1} + νD_{j-2} + μ̃hF(Y_0 + D_{j-1}).
    let Workspace { a: d2, b: d1, c: f, scratch, .. } = ws;
    let stage = &mut scratch[..d];
    sys.rhs_into(y, f);
    for i in 0..d {
        d2[i] = 0.0;
        d1[i] = (w1 / w0) * h * f[i];
    }
    for j in 2..=s {
        let mu = 2.0 * w0 * b[j] / b[j - 1];
        let nu = -b[j] / b[j - 2];
        let mu_tilde = 2.0 * w1 * b[j] / b[j - 1];
        for i in 0..d {
            stage[i] = y[i] + d1[i];
        }
        sys.rhs_into(stage, f);
        for i in 0..d {
            let next = mu * d1[i] + nu * d2[i] + mu_tilde * h * f[i];
            d2[i] = d1[i];
            d1[i] = next;
        }
    }
    for i in 0..d {
        out[i] = y[i] + d1[i];
    }
    Ok(())
}

/// Fills `out` with `[w0, w1, b_0, …, b_s]`, where `b_j = 1/T_j(w0)`.
fn rkc_coefficients(s: usize, damping: f64, out: &mut Vec<f64>) {
    let sf = s as f64;
    let w0 = 1.0 + damping / (sf * sf);
    out.clear();
    out.resize(s + 3, 0.0);
    let (mut t_prev, mut t) = (1.0, w0);
    let (mut dt_prev, mut dt) = (0.0, 1.0);
    out[2] = 1.0;
    out[3] = 1.0 / w0;
    for j in 2..=s {
        let t_next = 2.0 * w0 * t - t_prev;
        let dt_next = 2.0 * t + 2.0 * w0 * dt - dt_prev;
        t_prev = t;
        t = t_next;
        dt_prev = dt;
        dt = dt_next;
        out[2 + j] = 1.0 / t;
    }
    out[0] = w0;
    out[1] = t / dt;
}

/// Stage counts above this are treated as a breakdown of the step.
pub const RKC_MAX_STAGES: usize = 10_000;

/// `s = ⌈√(hρ/0.65)⌉`, at least one stage.
pub fn rkc_stage_count(h: f64, spectral_radius: f64) -> usize {
    let s = (h * spectral_radius / 0.65).sqrt().ceil();
    if s.is_finite() && s >= 1.0 {
        s as usize
    } else {
        1
    }
}

/// Nonlinear power iteration for the spectral radius of `∂f/∂y` at `y`,
/// inflated by 20% as a safety margin.
pub fn spectral_radius(sys: &OdeSystem, y: &[f64], ws: &mut Workspace) -> f64 {
    const MAX_ITERS: usize = 50;
    let d = y.len();
    let Workspace { a: fy, b: dir, c: probe, scratch, .. } = ws;
    let fp = &mut scratch[..d];
    sys.rhs_into(y, fy);
    let ynorm = norm(y);
    let scale = f64::EPSILON.sqrt() * ynorm.max(1.0);
    // Start from f(y) when it is informative, else a fixed direction.
    if norm(fy) > 0.0 {
        dir.copy_from_slice(fy);
    } else {
        for (i, x) in dir.iter_mut().enumerate() {
            *x = 1.0 + 0.1 * i as f64;
        }
    }
    let dn = norm(dir);
    for x in dir.iter_mut() {
        *x *= scale / dn;
    }
    let mut rho = 0.0;
    for _ in 0..MAX_ITERS {
        for i in 0..d {
            probe[i] = y[i] + dir[i];
        }
        sys.rhs_into(probe, fp);
        for i in 0..d {
            dir[i] = fp[i] - fy[i];
        }
        let dn = norm(dir);
        if dn == 0.0 || !dn.is_finite() {
            break;
        }
        let estimate = dn / scale;
        for x in dir.iter_mut() {
            *x *= scale / dn;
        }
        let done = (estimate - rho).abs() <= 0.01 * estimate;
        rho = estimate;
        if done {
            break;
        }
    }
    1.2 * rho
}

/// RKC step with an explicit stage count.
pub fn step_rkc(sys: &OdeSystem, y: &[f64], h: f64, stages: usize, damping: f64) -> Result<Vec<f64>> {
    sys.check_dim(y)?;
    check_step(h)?;
    if stages == 0 {
        return Err(Error::InvalidInput("RKC needs at least one stage".into()));
    }
    let mut ws = Workspace::new(y.len());
    let mut out = vec![0.0; y.len()];
    rkc_into(sys, y, h, stages, damping, &mut out, &mut ws).map_err(|e| e.at_step(0, y))?;
    finite_or_diverged(out, y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedStep {
    pub euler: Vec<f64>,
    pub heun: Vec<f64>,
    pub error_estimate: f64,
}

/// Embedded explicit Euler / Heun pair; the estimate is `‖y_heun − y_euler‖`.
pub fn step_embedded_euler_heun(sys: &OdeSystem, y: &[f64], h: f64) -> Result<EmbeddedStep> {
    sys.check_dim(y)?;
    check_step(h)?;
    let f0 = sys.rhs(y)?;
    let euler: Vec<f64> = y.iter().zip(&f0).map(|(yi, fi)| yi + h * fi).collect();
    let f1 = sys.rhs(&euler)?;
    let heun: Vec<f64> = y.iter().zip(f0.iter().zip(&f1)).map(|(yi, (a, b))| yi + 0.5 * h * (a + b)).collect();
    let diff: Vec<f64> = heun.iter().zip(&euler).map(|(a, b)| a - b).collect();
    Ok(EmbeddedStep { error_estimate: norm(&diff), euler, heun })
}

fn check_step(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("step size must be positive and finite, got {h}")))
    }
}

fn finite_or_diverged(out: Vec<f64>, y: &[f64]) -> Result<Vec<f64>> {
    if out.iter().all(|x| x.is_finite()) {
        Ok(out)
    } else {
        Err(Error::Divergence { step: 0, last_finite: y.to_vec() })
    }
}
