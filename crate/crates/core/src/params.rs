//! Parameter metadata: constraints, priors and the unconstrained transform.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Constraint {
    Unconstrained,
    /// Sampled as `log θ`.
    Positive,
}

impl Constraint {
    pub fn to_unconstrained(self, value: f64) -> f64 {
        match self {
            Constraint::Unconstrained => value,
            Constraint::Positive => value.ln(),
        }
    }

    pub fn to_constrained(self, eta: f64) -> f64 {
        match self {
            Constraint::Unconstrained => eta,
            Constraint::Positive => eta.exp(),
        }
    }

    /// `log |dθ/dη|`.
    pub fn log_jacobian(self, eta: f64) -> f64 {
        match self {
            Constraint::Unconstrained => 0.0,
            Constraint::Positive => eta,
        }
    }

    /// `dθ/dη` at constrained value `theta`.
    pub fn dconstrained(self, theta: f64) -> f64 {
        match self {
            Constraint::Unconstrained => 1.0,
            Constraint::Positive => theta,
        }
    }

    /// `d log|dθ/dη| / dη`.
    pub fn dlog_jacobian(self) -> f64 {
        match self {
            Constraint::Unconstrained => 0.0,
            Constraint::Positive => 1.0,
        }
    }

    pub fn admits(self, value: f64) -> bool {
        value.is_finite()
            && match self {
                Constraint::Unconstrained => true,
                Constraint::Positive => value > 0.0,
            }
    }
}

/// Prior density for one parameter component.
///
/// `Gamma` is shape-rate: `Gamma(2, 10)` has mean 0.2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase")]
pub enum Prior {
    Normal { mean: f64, sd: f64 },
    Gamma { shape: f64, rate: f64 },
}

impl Prior {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            Prior::Normal { mean, sd } if mean.is_finite() && sd > 0.0 => Ok(()),
            Prior::Gamma { shape, rate } if shape > 0.0 && rate > 0.0 => Ok(()),
            other => Err(format!("invalid prior hyperparameters: {other:?}")),
        }
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        match *self {
            Prior::Normal { mean, sd } => {
                let z = (x - mean) / sd;
                -0.5 * z * z - sd.ln() - LN_SQRT_2PI
            }
            Prior::Gamma { shape, rate } => {
                if x <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
            }
        }
    }

    pub fn dlog_pdf(&self, x: f64) -> f64 {
        match *self {
            Prior::Normal { mean, sd } => -(x - mean) / (sd * sd),
            Prior::Gamma { shape, rate } => (shape - 1.0) / x - rate,
        }
    }

    /// Draws from the prior restricted to the support admitted by `constraint`.
    pub fn sample(&self, constraint: Constraint, rng: &mut impl Rng) -> f64 {
        loop {
            let v = match *self {
                Prior::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
                Prior::Gamma { shape, rate } => Gamma::new(shape, 1.0 / rate)
                    .expect("validated gamma prior")
                    .sample(rng),
            };
            if constraint.admits(v) {
                return v;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub constraint: Constraint,
    pub prior: Prior,
}

impl ParamInfo {
    pub fn new(name: &str, constraint: Constraint, prior: Prior) -> Self {
        Self {
            name: name.to_string(),
            constraint,
            prior,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_prior_plus_log_jacobian_score() {
        // d/dη [log Gamma(e^η; k, λ) + η] = k - λ e^η
        let prior = Prior::Gamma { shape: 2.0, rate: 10.0 };
        let c = Constraint::Positive;
        let f = |eta: f64| prior.log_pdf(c.to_constrained(eta)) + c.log_jacobian(eta);
        for &eta in &[-2.0, -0.3, 0.5] {
            let sigma = c.to_constrained(eta);
            let analytic = prior.dlog_pdf(sigma) * c.dconstrained(sigma) + c.dlog_jacobian();
            let fd = (f(eta + 1e-6) - f(eta - 1e-6)) / 2e-6;
            assert!((analytic - (2.0 - 10.0 * sigma)).abs() < 1e-12);
            assert!((analytic - fd).abs() < 1e-6 * analytic.abs().max(1.0));
        }
    }

    #[test]
    fn gamma_log_pdf_normalised() {
        // Gamma(1, 1) is Exp(1)
        let p = Prior::Gamma { shape: 1.0, rate: 1.0 };
        assert!((p.log_pdf(0.7) + 0.7).abs() < 1e-12);
    }

    #[test]
    fn samples_respect_constraint() {
        let mut rng = rand::rng();
        let p = Prior::Normal { mean: 0.0, sd: 1.0 };
        for _ in 0..200 {
            assert!(p.sample(Constraint::Positive, &mut rng) > 0.0);
        }
    }
}
