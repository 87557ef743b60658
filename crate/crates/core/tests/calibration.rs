//! Long-run calibration of every kernel on closed-form targets.

use gradpf_core::diagnostics::{ess_chain, mean_sd, Truncation};
use gradpf_core::mcmc::targets::{LogGamma, StandardNormal};
use gradpf_core::mcmc::{run_chain, Kernel, LogDensity, SamplerConfig};

const DRAWS: usize = 10_000;
const BURN_IN: usize = 1_000;
const MAX_LAG: usize = 1_000;
const EPSILON: f64 = 0.5;

fn kernels() -> Vec<Kernel> {
    vec![
        Kernel::nuts(),
        Kernel::Hmc { steps: 5 },
        Kernel::Mala { gamma: None },
        Kernel::Rhmc { mean_steps: 2.5 },
    ]
}

/// Mean and variance errors in units of their Monte Carlo standard errors.
fn z_scores(x: &[f64], mean: f64, var: f64) -> (f64, f64) {
    let (m, sd) = mean_sd(x);
    let se_mean = sd / ess_chain(x, MAX_LAG, Truncation::InitialPositive).unwrap().sqrt();
    let sq: Vec<f64> = x.iter().map(|v| (v - m).powi(2)).collect();
    let (v, sd_sq) = mean_sd(&sq);
    let se_var = sd_sq / ess_chain(&sq, MAX_LAG, Truncation::InitialPositive).unwrap().sqrt();
    ((m - mean).abs() / se_mean, (v - var).abs() / se_var)
}

fn check<D: LogDensity>(mut target: D, init: f64, mean: f64, var: f64, seed: u64) {
    for kernel in kernels() {
        let cfg = SamplerConfig::new(kernel.clone(), DRAWS + BURN_IN)
            .with_burn_in(BURN_IN)
            .with_epsilon(EPSILON);
        let chain = run_chain(&mut target, &cfg, &[init], seed).unwrap();
        let x = chain.column(0, BURN_IN);
        assert_eq!(x.len(), DRAWS);
        let (zm, zv) = z_scores(&x, mean, var);
        assert!(zm < 3.0 && zv < 3.0, "{}: z_mean {zm:.2}, z_var {zv:.2}", kernel.label());
    }
}

#[test]
fn standard_normal() {
    check(StandardNormal(1), 0.5, 0.0, 1.0, 21);
}

#[test]
fn log_transformed_gamma() {
    check(LogGamma { shape: 3.0, rate: 2.0 }, 0.0, 1.5, 0.75, 22);
}

