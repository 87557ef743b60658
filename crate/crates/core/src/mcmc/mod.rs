//! Gradient-based MCMC over model parameters.
//!
//! Kernels act on a [`LogDensity`] in unconstrained coordinates. For
//! state-space models the density is [`FilterPosterior`], whose likelihood
//! and gradient come from the differentiable particle filter run with one
//! noise bank fixed for the whole chain.

mod chain;
mod kernels;

pub use chain::{run_chain, Chain, ChainError, ChainSummary, Kernel, SamplerConfig};
pub use kernels::{
    find_reasonable_epsilon, hmc_step, leapfrog, mala_step, nuts_step, rhmc_draw_steps, rhmc_step,
    Leapfrog, StepOutcome,
};

use rand::Rng;

use crate::dpf::{run_filter, FilterConfig, FilterError};
use crate::gaussian::Vector;
use crate::noise::{hash_f64s, NoiseBank};
use crate::params::ParamInfo;
use crate::ssm::StateSpaceModel;

/// Log-posterior, its gradient in unconstrained space, and the
/// log-likelihood part.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEval {
    pub logpost: f64,
    pub grad: Vec<f64>,
    pub loglik: f64,
}

impl PosteriorEval {
    pub fn failed(dim: usize) -> Self {
        Self {
            logpost: f64::NEG_INFINITY,
            grad: vec![0.0; dim],
            loglik: f64::NEG_INFINITY,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.logpost.is_finite() && self.grad.iter().all(|g| g.is_finite())
    }
}

/// A differentiable target density over `R^d`.
pub trait LogDensity {
    fn dim(&self) -> usize;

    fn eval(&self, eta: &[f64]) -> PosteriorEval;

    /// Maps a point of the sampling space to the reported parameter space.
    fn constrain(&self, eta: &[f64]) -> Vec<f64> {
        eta.to_vec()
    }

    fn names(&self) -> Vec<String> {
        (1..=self.dim()).map(|i| format!("theta_{i}")).collect()
    }

    /// Called before every iteration. Returns `true` when the density itself
    /// changed, so cached evaluations must be recomputed.
    fn begin_iteration(&mut self, _iteration: usize) -> bool {
        false
    }
}

/// Posterior `p(θ | y) ∝ p̂(y | θ) p(θ)` sampled in `η`, where positive
/// parameters are `η = log θ`.
pub struct FilterPosterior<'a, const NX: usize, const NY: usize, const NT: usize, M: ?Sized> {
    model: &'a M,
    params: Vec<ParamInfo>,
    y: &'a [Vector<NY>],
    config: FilterConfig,
    bank: NoiseBank,
    seed: u64,
    refresh: bool,
}

impl<'a, const NX: usize, const NY: usize, const NT: usize, M> FilterPosterior<'a, NX, NY, NT, M>
where
    M: StateSpaceModel<NX, NY, NT> + ?Sized,
{
    /// `params` carries constraints and priors (normally
    /// `ModelSpec::params()`). The bank is drawn from `seed` and reused for
    /// every evaluation unless `refresh` is set.
    pub fn new(
        model: &'a M,
        params: Vec<ParamInfo>,
        y: &'a [Vector<NY>],
        config: FilterConfig,
        seed: u64,
        refresh: bool,
    ) -> Self {
        assert_eq!(params.len(), NT, "one ParamInfo per parameter");
        let bank = NoiseBank::new(seed, y.len(), config.particles, NX);
        Self {
            model,
            params,
            y,
            config,
            bank,
            seed,
            refresh,
        }
    }

    pub fn params(&self) -> &[ParamInfo] {
        &self.params
    }

    pub fn to_unconstrained(&self, theta: &[f64]) -> Vec<f64> {
        self.params
            .iter()
            .zip(theta)
            .map(|(p, &v)| p.constraint.to_unconstrained(v))
            .collect()
    }

    /// Draws `η` from the prior until the posterior is finite there.
    pub fn sample_initial(&self, rng: &mut impl Rng, max_tries: usize) -> Option<Vec<f64>> {
        (0..max_tries).find_map(|_| {
            let theta: Vec<f64> = self
                .params
                .iter()
                .map(|p| p.prior.sample(p.constraint, rng))
                .collect();
            let eta = self.to_unconstrained(&theta);
            self.eval(&eta).is_valid().then_some(eta)
        })
    }

    /// Filter failure is reported as an error instead of `-∞`.
    pub fn try_eval(&self, eta: &[f64]) -> Result<PosteriorEval, FilterError> {
        let mut theta = Vector::<NT>::zeros();
        let mut log_prior = 0.0;
        let mut dprior = [0.0; NT];
        for (k, p) in self.params.iter().enumerate() {
            let v = p.constraint.to_constrained(eta[k]);
            theta[k] = v;
            log_prior += p.prior.log_pdf(v) + p.constraint.log_jacobian(eta[k]);
            dprior[k] = p.prior.dlog_pdf(v);
        }
        if !log_prior.is_finite()
            || self
                .params
                .iter()
                .zip(theta.iter())
                .any(|(p, &v)| !p.constraint.admits(v))
        {
            return Ok(PosteriorEval::failed(NT));
        }
        let out = run_filter(self.model, &theta, self.y, &self.config, &self.bank)?;
        let grad = (0..NT)
            .map(|k| {
                let c = self.params[k].constraint;
                (out.grad[k] + dprior[k]) * c.dconstrained(theta[k]) + c.dlog_jacobian()
            })
            .collect();
        Ok(PosteriorEval {
            logpost: out.loglik + log_prior,
            grad,
            loglik: out.loglik,
        })
    }
}

impl<const NX: usize, const NY: usize, const NT: usize, M> LogDensity
    for FilterPosterior<'_, NX, NY, NT, M>
where
    M: StateSpaceModel<NX, NY, NT> + ?Sized,
{
    fn dim(&self) -> usize {
        NT
    }

    fn eval(&self, eta: &[f64]) -> PosteriorEval {
        match self.try_eval(eta) {
            Ok(e) if e.is_valid() => e,
            _ => PosteriorEval::failed(NT),
        }
    }

    fn constrain(&self, eta: &[f64]) -> Vec<f64> {
        self.params
            .iter()
            .zip(eta)
            .map(|(p, &e)| p.constraint.to_constrained(e))
            .collect()
    }

    fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    fn begin_iteration(&mut self, iteration: usize) -> bool {
        if self.refresh {
            let seed = hash_f64s(&[self.seed as f64, iteration as f64]);
            self.bank = NoiseBank::new(seed, self.y.len(), self.config.particles, NX);
        }
        self.refresh
    }
}

/// Standard closed-form targets used to calibrate the kernels.
pub mod targets {
    use super::{LogDensity, PosteriorEval};
    use statrs::function::gamma::ln_gamma;

    /// `N(0, I_d)`.
    pub struct StandardNormal(pub usize);

    impl LogDensity for StandardNormal {
        fn dim(&self) -> usize {
            self.0
        }
        fn eval(&self, eta: &[f64]) -> PosteriorEval {
            PosteriorEval {
                logpost: -0.5 * eta.iter().map(|e| e * e).sum::<f64>(),
                grad: eta.iter().map(|e| -e).collect(),
                loglik: 0.0,
            }
        }
    }

    /// `Gamma(shape, rate)` sampled through `η = log θ`.
    pub struct LogGamma {
        pub shape: f64,
        pub rate: f64,
    }

    impl LogDensity for LogGamma {
        fn dim(&self) -> usize {
            1
        }
        fn eval(&self, eta: &[f64]) -> PosteriorEval {
            let e = eta[0];
            let theta = e.exp();
            // log Gamma(e^η) + η
            let logpost = self.shape * self.rate.ln() - ln_gamma(self.shape) + self.shape * e
                - self.rate * theta;
            if !logpost.is_finite() {
                return PosteriorEval::failed(1);
            }
            PosteriorEval {
                logpost,
                grad: vec![self.shape - self.rate * theta],
                loglik: 0.0,
            }
        }
        fn constrain(&self, eta: &[f64]) -> Vec<f64> {
            vec![eta[0].exp()]
        }
    }
}
