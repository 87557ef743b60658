//! Numerical tolerances shared by the gradient checks across the crate.

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Relative tolerance for analytic-vs-finite-difference gradient checks.
pub const GRAD_REL_TOL: f64 = 1e-5;

/// Relative tolerance for weight conservation through resampling.
pub const CONSERVATION_REL_TOL: f64 = 1e-12;

/// Gelman-Rubin pass threshold.
pub const RHAT_PASS: f64 = 1.05;
