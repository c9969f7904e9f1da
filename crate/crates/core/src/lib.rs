//! Random time-step Runge–Kutta integration.
//!
//! A deterministic one-step map `Ψ_h` run with i.i.d. random step sizes
//! `H_k` (mean `h`, variance `C h^{2p+1}`) yields a probabilistic solver that
//! keeps the geometric properties of `Ψ`. The crate provides the test
//! problems, the steppers, the step laws, trajectory and ensemble generation,
//! convergence harnesses and a pseudo-marginal sampler for inverse problems.

pub mod error;
mod linalg;
pub mod problems;
pub mod rk;
pub mod steps;
pub mod integrators;
pub mod ensemble;
pub mod analysis;
pub mod bayes;

pub use error::{Error, Result};
pub use problems::{make_problem, FirstIntegral, HamiltonianStructure, OdeSystem, Params, ProblemName};
pub use rk::{ButcherTableau, NewtonConfig, RkcConfig, StepError, Stepper, Workspace};
pub use steps::{analytic_moments, derive_seed, sample_step, validate_assumption1, RngStream, StepDistribution, StepLaw};
pub use integrators::{integrate, integrate_additive_noise, integrate_deterministic, integrate_rts_rk, propagate, Recording, Scheme, SchemeTag, Trajectory};
pub use ensemble::{estimator_mse, mc_functional, ms_error, run_ensemble, std_indicator, weak_error, Ensemble, EnsembleConfig, Estimate, MseReport};
pub use analysis::{fit_order, reference_solution, study_estimator_mse, study_mean_square, study_weak, ConvergenceStudy, SeriesReport, StudySetup};
pub use bayes::{
    hellinger, linear_analytic_posterior, pmmh, potential, rwmh, Chain, ChainKind, Covariance, GaussianPrior, InverseProblem,
    LinearPosterior, McmcConfig, PosteriorKind,
};
