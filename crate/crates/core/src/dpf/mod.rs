//! Differentiable particle filter.
//!
//! Every particle carries its state, the state's sensitivity `dx/dθ`, an
//! unnormalised log-weight and that weight's gradient. With a fixed
//! [`NoiseBank`] the returned log-likelihood estimate is a deterministic,
//! piecewise smooth function of `θ` and the returned gradient is its exact
//! derivative between ancestry changes.

mod resample;
mod weights;

pub use resample::{
    ess, resample_crn, resample_gumbel, resample_soft, summarize, ResampleError, WeightSummary,
};
pub use weights::{
    incremental_logw_and_grad, log_density_with_grad, propagate, WeightInputs,
};

use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::{GaussianFactor, LinalgError, Matrix, SqrtFactor, Vector};
use crate::noise::{hash_f64s, NoiseBank};
use crate::ssm::{IncrementalWeightKind, ModelError, StateSpaceModel};
use weights::{explicit_score, log_density_with_factor, propagate_with, FactorCache, SqrtCache};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle<const NX: usize, const NT: usize> {
    pub x: Vector<NX>,
    pub dx: Matrix<NX, NT>,
    pub logw: f64,
    pub dlogw: Vector<NT>,
    /// Running score `Σ ∂θ log p(x, y | θ)` along the particle's ancestry,
    /// used by the Fisher-identity estimator.
    pub alpha: Vector<NT>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Resampler {
    /// Multinomial with the bank's fixed uniforms.
    Crn,
    /// Multinomial with uniforms that change with `θ`.
    Multinomial,
    Soft {
        #[serde(default = "half")]
        alpha: f64,
    },
    Gumbel {
        #[serde(default = "half")]
        lambda: f64,
    },
}

fn half() -> f64 {
    0.5
}

impl Resampler {
    pub fn label(&self) -> String {
        match self {
            Resampler::Crn => "crn".into(),
            Resampler::Multinomial => "multinomial".into(),
            Resampler::Soft { alpha } => format!("soft{alpha}"),
            Resampler::Gumbel { lambda } => format!("gumbel{lambda}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientEstimator {
    #[default]
    Reparam,
    Fisher,
}

fn default_resampler() -> Resampler {
    Resampler::Crn
}
fn default_threshold() -> f64 {
    0.5
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub particles: usize,
    #[serde(default = "default_resampler")]
    pub resampler: Resampler,
    #[serde(default)]
    pub estimator: GradientEstimator,
    /// Resample when `ESS < ess_threshold · N`; `0` disables resampling.
    #[serde(default = "default_threshold")]
    pub ess_threshold: f64,
    #[serde(default = "yes")]
    pub record_ancestry: bool,
}

impl FilterConfig {
    pub fn new(particles: usize) -> Self {
        Self {
            particles,
            resampler: Resampler::Crn,
            estimator: GradientEstimator::Reparam,
            ess_threshold: 0.5,
            record_ancestry: true,
        }
    }

    pub fn with_resampler(mut self, resampler: Resampler) -> Self {
        self.resampler = resampler;
        self
    }

    pub fn with_estimator(mut self, estimator: GradientEstimator) -> Self {
        self.estimator = estimator;
        self
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.ess_threshold = threshold;
        self
    }

    pub fn without_ancestry(mut self) -> Self {
        self.record_ancestry = false;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.particles == 0 {
            return Err("filter.particles must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.ess_threshold) {
            return Err(format!(
                "filter.ess_threshold must lie in [0, 1], got {}",
                self.ess_threshold
            ));
        }
        match self.resampler {
            Resampler::Soft { alpha } if !(0.0..=1.0).contains(&alpha) => {
                Err(format!("soft resampling alpha must lie in [0, 1], got {alpha}"))
            }
            Resampler::Gumbel { lambda } if !(lambda > 0.0) => {
                Err(format!("Gumbel-softmax lambda must be positive, got {lambda}"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepTrace {
    pub ess: f64,
    pub resampled: bool,
    /// Parent index per offspring, present when the step resampled and
    /// ancestry recording is on.
    pub ancestry: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterOutput {
    pub loglik: f64,
    pub grad: Vec<f64>,
    pub trace: Vec<StepTrace>,
}

impl FilterOutput {
    /// `{loglik, grad, ess_trace, resample_flags}`.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "loglik": self.loglik,
            "grad": self.grad,
            "ess_trace": self.trace.iter().map(|s| s.ess).collect::<Vec<_>>(),
            "resample_flags": self.trace.iter().map(|s| s.resampled).collect::<Vec<_>>(),
        })
    }

    /// Hash of the full resampling history; equal fingerprints mean equal
    /// family trees.
    pub fn ancestry_fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (t, step) in self.trace.iter().enumerate() {
            if let Some(a) = &step.ancestry {
                t.hash(&mut h);
                a.hash(&mut h);
            } else if step.resampled {
                (t, u32::MAX).hash(&mut h);
            }
        }
        h.finish()
    }

    /// Ancestry as CSV rows `t,i,parent` (1-based `t`).
    pub fn ancestry_csv(&self) -> String {
        let mut s = String::from("t,i,parent\n");
        for (t, step) in self.trace.iter().enumerate() {
            if let Some(a) = &step.ancestry {
                for (i, k) in a.iter().enumerate() {
                    s.push_str(&format!("{},{i},{k}\n", t + 1));
                }
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("invalid filter configuration: {0}")]
    Config(String),
    #[error("noise bank sized for T={steps}, N={particles}, n_x={dim} cannot serve T={need_steps}, N={need_particles}, n_x={need_dim}")]
    BankMismatch {
        steps: usize,
        particles: usize,
        dim: usize,
        need_steps: usize,
        need_particles: usize,
        need_dim: usize,
    },
    #[error("model failure at t={t}: {source}")]
    Model { t: usize, source: ModelError },
    #[error("linear algebra failure at t={t}: {source}")]
    Linalg { t: usize, source: LinalgError },
    #[error("all particle weights underflowed at t={t}")]
    Underflow { t: usize },
    #[error("resampling failed at t={t}: {source}")]
    Resample { t: usize, source: ResampleError },
}

impl FilterError {
    fn model(t: usize) -> impl FnOnce(ModelError) -> FilterError {
        move |source| FilterError::Model { t, source }
    }
    fn linalg(t: usize) -> impl FnOnce(LinalgError) -> FilterError {
        move |source| FilterError::Linalg { t, source }
    }
}

fn check_bank(
    bank: &NoiseBank,
    steps: usize,
    particles: usize,
    dim: usize,
) -> Result<(), FilterError> {
    if bank.steps() < steps || bank.particles() != particles || bank.state_dim() != dim {
        return Err(FilterError::BankMismatch {
            steps: bank.steps(),
            particles: bank.particles(),
            dim: bank.state_dim(),
            need_steps: steps,
            need_particles: particles,
            need_dim: dim,
        });
    }
    Ok(())
}

/// Runs the filter over `y` (observations `y_1..y_T`) and returns
/// `log p̂(y_{1:T} | θ)` with its gradient.
///
/// The gradient is `Σᵢ w̃ᵢ d log wᵢ/dθ` for [`GradientEstimator::Reparam`] and
/// `Σᵢ w̃ᵢ αᵢ` for [`GradientEstimator::Fisher`].
pub fn run_filter<const NX: usize, const NY: usize, const NT: usize, M>(
    model: &M,
    theta: &Vector<NT>,
    y: &[Vector<NY>],
    config: &FilterConfig,
    bank: &NoiseBank,
) -> Result<FilterOutput, FilterError>
where
    M: StateSpaceModel<NX, NY, NT> + ?Sized,
{
    config.validate().map_err(FilterError::Config)?;
    let n = config.particles;
    check_bank(bank, y.len(), n, NX)?;
    let fisher = config.estimator == GradientEstimator::Fisher;
    let kind = model.weight_kind();

    let init = model.initial(theta).map_err(FilterError::model(0))?;
    let mut particles: Vec<Particle<NX, NT>> = Vec::with_capacity(n);
    let init_density = init.as_gaussian();
    let init_sqrt = match &init.cov {
        Some(c) => Some(SqrtFactor::new(c, "initial covariance").map_err(FilterError::linalg(0))?),
        None => None,
    };
    let init_factor = match (&init_density, fisher) {
        (Some(g), true) => {
            Some(GaussianFactor::new(&g.cov, "initial covariance").map_err(FilterError::linalg(0))?)
        }
        _ => None,
    };
    let dsqrt0: Option<Vec<Matrix<NX, NX>>> = init_sqrt
        .as_ref()
        .map(|s| init.dcov_dtheta.iter().map(|dc| s.derivative(dc)).collect());
    for i in 0..n {
        let mut x = init.mean;
        let mut dx = init.dmean_dtheta;
        if let (Some(s), Some(ds)) = (&init_sqrt, &dsqrt0) {
            let eps = Vector::<NX>::from_column_slice(bank.eps_initial(i));
            x += s.sqrt() * eps;
            for k in 0..NT {
                let mut col = dx.column_mut(k);
                col += ds[k] * eps;
            }
        }
        let alpha = match (&init_factor, &init_density) {
            (Some(f), Some(g)) => explicit_score(f, &x, g),
            _ => Vector::zeros(),
        };
        particles.push(Particle {
            x,
            dx,
            logw: 0.0,
            dlogw: Vector::zeros(),
            alpha,
        });
    }

    let need_transition = fisher || kind == IncrementalWeightKind::FullRatio;
    let theta_key = hash_f64s(theta.as_slice());
    let mut sqrt_cache = SqrtCache::<NX>::default();
    let mut obs_cache = FactorCache::<NY>::default();
    let mut tr_cache = FactorCache::<NX>::default();
    let mut q_cache = FactorCache::<NX>::default();
    let mut logw_buf = vec![0.0; n];
    let mut trace = Vec::with_capacity(y.len());
    let zero_y = Matrix::<NY, NT>::zeros();

    for (s, yt) in y.iter().enumerate() {
        let t = s + 1;
        for (l, p) in logw_buf.iter_mut().zip(&particles) {
            *l = p.logw;
        }
        let ess_t = ess(&logw_buf).map_err(|_| FilterError::Underflow { t: t - 1 })?;
        let resampled = ess_t < config.ess_threshold * n as f64;
        let mut ancestry = None;
        if resampled {
            let wrap = |source| FilterError::Resample { t, source };
            let a = match config.resampler {
                Resampler::Crn => resample_crn(&mut particles, bank.uniforms(s)),
                Resampler::Multinomial => {
                    resample_crn(&mut particles, &bank.fresh_uniforms(s, theta_key))
                }
                Resampler::Soft { alpha } => resample_soft(&mut particles, bank.uniforms(s), alpha),
                Resampler::Gumbel { lambda } => {
                    resample_gumbel(&mut particles, &bank.gumbels(s), lambda)
                }
            }
            .map_err(wrap)?;
            if config.record_ancestry {
                ancestry = Some(a);
            }
        }
        trace.push(StepTrace {
            ess: ess_t,
            resampled,
            ancestry,
        });

        for (i, p) in particles.iter_mut().enumerate() {
            let prev = *p;
            let q = model
                .proposal(&prev.x, theta, yt)
                .map_err(FilterError::model(t))?;
            let sqrt = sqrt_cache
                .get_or_try(&q.cov, |c| SqrtFactor::new(c, "proposal covariance"))
                .map_err(FilterError::linalg(t))?;
            let eps = Vector::<NX>::from_column_slice(bank.eps(s, i));
            let (x, dx) = propagate_with(&prev.dx, &q, sqrt, &eps);
            if !x.iter().all(|v| v.is_finite()) {
                return Err(FilterError::Model {
                    t,
                    source: ModelError::Divergence,
                });
            }
            p.x = x;
            p.dx = dx;

            let tr = if need_transition {
                Some(model.transition(&prev.x, theta).map_err(FilterError::model(t))?)
            } else {
                None
            };
            let obs = if kind != IncrementalWeightKind::Predictive || fisher {
                Some(model.observation(&x, theta).map_err(FilterError::model(t))?)
            } else {
                None
            };

            let (lw, dlw) = match kind {
                IncrementalWeightKind::LikelihoodAtNewState => {
                    let obs = obs.as_ref().expect("observation evaluated");
                    let f = obs_cache
                        .get_or_try(&obs.density.cov, |c| GaussianFactor::new(c, "observation covariance"))
                        .map_err(FilterError::linalg(t))?;
                    log_density_with_factor(f, yt, &zero_y, &obs.density, &dx)
                }
                IncrementalWeightKind::Predictive => {
                    let pred = model
                        .predictive(&prev.x, theta)
                        .map_err(FilterError::model(t))?;
                    let f = GaussianFactor::new(&pred.cov, "predictive covariance")
                        .map_err(FilterError::linalg(t))?;
                    log_density_with_factor(&f, yt, &zero_y, &pred, &prev.dx)
                }
                IncrementalWeightKind::FullRatio => {
                    let obs = obs.as_ref().expect("observation evaluated");
                    let tr = tr.as_ref().expect("transition evaluated");
                    let fo = obs_cache
                        .get_or_try(&obs.density.cov, |c| GaussianFactor::new(c, "observation covariance"))
                        .map_err(FilterError::linalg(t))?;
                    let (l, dl) = log_density_with_factor(fo, yt, &zero_y, &obs.density, &dx);
                    let ft = tr_cache
                        .get_or_try(&tr.cov, |c| GaussianFactor::new(c, "transition covariance"))
                        .map_err(FilterError::linalg(t))?;
                    let (pr, dpr) = log_density_with_factor(ft, &x, &dx, tr, &prev.dx);
                    let fq = q_cache
                        .get_or_try(&q.cov, |c| GaussianFactor::new(c, "proposal covariance"))
                        .map_err(FilterError::linalg(t))?;
                    let (lq, dlq) = log_density_with_factor(fq, &x, &dx, &q, &prev.dx);
                    (l + pr - lq, dl + dpr - dlq)
                }
            };
            p.logw += lw;
            p.dlogw += dlw;

            if fisher {
                let obs = obs.as_ref().expect("observation evaluated");
                let tr = tr.as_ref().expect("transition evaluated");
                let fo = obs_cache
                    .get_or_try(&obs.density.cov, |c| GaussianFactor::new(c, "observation covariance"))
                    .map_err(FilterError::linalg(t))?;
                let so = explicit_score(fo, yt, &obs.density);
                let ft = tr_cache
                    .get_or_try(&tr.cov, |c| GaussianFactor::new(c, "transition covariance"))
                    .map_err(FilterError::linalg(t))?;
                p.alpha += so + explicit_score(ft, &x, tr);
            }
        }
    }

    let summary = summarize(&particles).map_err(|_| FilterError::Underflow { t: y.len() })?;
    let grad = if fisher {
        particles
            .iter()
            .zip(&summary.normalized)
            .filter(|(_, &w)| w > 0.0)
            .fold(Vector::<NT>::zeros(), |acc, (p, &w)| acc + p.alpha * w)
    } else {
        summary.mean_grad
    };
    let loglik = summary.log_total - (n as f64).ln();
    if !loglik.is_finite() {
        return Err(FilterError::Underflow { t: y.len() });
    }
    Ok(FilterOutput {
        loglik,
        grad: grad.iter().copied().collect(),
        trace,
    })
}

/// Fisher-identity gradient estimate `Σᵢ w̃ᵢ αᵢ`.
pub fn fisher_gradient<const NX: usize, const NY: usize, const NT: usize, M>(
    model: &M,
    theta: &Vector<NT>,
    y: &[Vector<NY>],
    config: &FilterConfig,
    bank: &NoiseBank,
) -> Result<Vec<f64>, FilterError>
where
    M: StateSpaceModel<NX, NY, NT> + ?Sized,
{
    let config = config.clone().with_estimator(GradientEstimator::Fisher);
    Ok(run_filter(model, theta, y, &config, bank)?.grad)
}

#[cfg(test)]
mod tests;
