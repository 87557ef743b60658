//! State-space models with Gaussian transition, observation and proposal
//! densities, together with every partial derivative the differentiable
//! filter needs.
//!
//! Dimensions are const generics (`NX` state, `NY` observation, `NT`
//! parameters) so that filtering never allocates per particle. A runtime
//! [`ModelSpec`] selects a concrete model and hands it to a
//! [`ModelVisitor`], which is where the monomorphised code runs.

mod generate;
mod lorenz;
mod models;

pub use generate::{generate, Simulation};
pub use lorenz::{lorenz_rk4, Lorenz63, LORENZ_B, LORENZ_R, LORENZ_SIGMA};
pub use models::{Lgss, RandomWalk, StochVol};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::{LinalgError, Matrix, Vector};
use crate::params::{ParamInfo, Prior};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("state diverged (non-finite value)")]
    Divergence,
    #[error("parameter {name} = {value} is outside the model's domain")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("proposal policy {policy:?} is not available for model {model}")]
    Unsupported {
        model: &'static str,
        policy: ProposalPolicy,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalPolicy {
    #[default]
    Prior,
    Optimal,
    Ekf,
}

/// How the incremental weight `σ_t` is formed from the model densities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IncrementalWeightKind {
    /// `p(y_t | x_t)`; the proposal is the transition density.
    LikelihoodAtNewState,
    /// `p(y_t | x_{t-1})`; the proposal is the exact conditional.
    Predictive,
    /// `p(y_t | x_t) p(x_t | x_{t-1}) / q(x_t | x_{t-1}, y_t)`.
    FullRatio,
}

/// A Gaussian density over a `D`-vector whose mean and covariance depend on a
/// conditioning state `x` (dimension `NX`) and on `θ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSpec<const D: usize, const NX: usize, const NT: usize> {
    pub mean: Vector<D>,
    pub cov: Matrix<D, D>,
    pub dmean_dx: Matrix<D, NX>,
    pub dmean_dtheta: Matrix<D, NT>,
    pub dcov_dx: [Matrix<D, D>; NX],
    pub dcov_dtheta: [Matrix<D, D>; NT],
}

impl<const D: usize, const NX: usize, const NT: usize> GaussianSpec<D, NX, NT> {
    pub fn zeros() -> Self {
        Self {
            mean: Vector::zeros(),
            cov: Matrix::zeros(),
            dmean_dx: Matrix::zeros(),
            dmean_dtheta: Matrix::zeros(),
            dcov_dx: [Matrix::zeros(); NX],
            dcov_dtheta: [Matrix::zeros(); NT],
        }
    }

    /// Total θ-derivative of the mean when the conditioning state has
    /// sensitivity `dx_dtheta`.
    pub fn total_dmean(&self, dx_dtheta: &Matrix<NX, NT>) -> Matrix<D, NT> {
        self.dmean_dx * dx_dtheta + self.dmean_dtheta
    }

    /// Total θ-derivative of the covariance along component `k`.
    pub fn total_dcov(&self, dx_dtheta: &Matrix<NX, NT>, k: usize) -> Matrix<D, D> {
        let mut out = self.dcov_dtheta[k];
        for j in 0..NX {
            let s = dx_dtheta[(j, k)];
            if s != 0.0 {
                out += self.dcov_dx[j] * s;
            }
        }
        out
    }
}

pub type TransitionSpec<const NX: usize, const NT: usize> = GaussianSpec<NX, NX, NT>;
pub type ProposalSpec<const NX: usize, const NT: usize> = GaussianSpec<NX, NX, NT>;

/// Observation density `N(y; h(x, θ), R(x, θ))` plus the second derivatives
/// of `h` used by the linearised Kalman proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationSpec<const NX: usize, const NY: usize, const NT: usize> {
    pub density: GaussianSpec<NY, NX, NT>,
    /// `d2h_dx2[j] = ∂(∂h/∂x)/∂x_j`.
    pub d2h_dx2: [Matrix<NY, NX>; NX],
    /// `d2h_dxdtheta[k] = ∂(∂h/∂x)/∂θ_k`.
    pub d2h_dxdtheta: [Matrix<NY, NX>; NT],
}

impl<const NX: usize, const NY: usize, const NT: usize> ObservationSpec<NX, NY, NT> {
    pub fn zeros() -> Self {
        Self {
            density: GaussianSpec::zeros(),
            d2h_dx2: [Matrix::zeros(); NX],
            d2h_dxdtheta: [Matrix::zeros(); NT],
        }
    }

    pub fn h(&self) -> &Vector<NY> {
        &self.density.mean
    }

    pub fn r(&self) -> &Matrix<NY, NY> {
        &self.density.cov
    }
}

/// Distribution of `x_0`. A `None` covariance is a point mass at `mean`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialSpec<const NX: usize, const NT: usize> {
    pub mean: Vector<NX>,
    pub dmean_dtheta: Matrix<NX, NT>,
    pub cov: Option<Matrix<NX, NX>>,
    pub dcov_dtheta: [Matrix<NX, NX>; NT],
}

impl<const NX: usize, const NT: usize> InitialSpec<NX, NT> {
    pub fn point(mean: Vector<NX>) -> Self {
        Self {
            mean,
            dmean_dtheta: Matrix::zeros(),
            cov: None,
            dcov_dtheta: [Matrix::zeros(); NT],
        }
    }

    /// The initial density as an unconditional [`GaussianSpec`], if any.
    pub fn as_gaussian(&self) -> Option<GaussianSpec<NX, NX, NT>> {
        self.cov.map(|cov| GaussianSpec {
            mean: self.mean,
            cov,
            dmean_dx: Matrix::zeros(),
            dmean_dtheta: self.dmean_dtheta,
            dcov_dx: [Matrix::zeros(); NX],
            dcov_dtheta: self.dcov_dtheta,
        })
    }
}

/// `x_t = F x_{t-1} + v`, `y_t = H x_t + e`, with `x_0 ~ N(m0, P0)` and the
/// θ-derivatives of every matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearForm<const NX: usize, const NY: usize, const NT: usize> {
    pub m0: Vector<NX>,
    pub p0: Matrix<NX, NX>,
    pub f: Matrix<NX, NX>,
    pub q: Matrix<NX, NX>,
    pub h: Matrix<NY, NX>,
    pub r: Matrix<NY, NY>,
    pub dm0: [Vector<NX>; NT],
    pub dp0: [Matrix<NX, NX>; NT],
    pub df: [Matrix<NX, NX>; NT],
    pub dq: [Matrix<NX, NX>; NT],
    pub dh: [Matrix<NY, NX>; NT],
    pub dr: [Matrix<NY, NY>; NT],
}

pub trait StateSpaceModel<const NX: usize, const NY: usize, const NT: usize>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Parameter metadata in θ order, including default priors.
    fn params(&self) -> Vec<ParamInfo>;

    fn policy(&self) -> ProposalPolicy;

    fn initial(&self, theta: &Vector<NT>) -> Result<InitialSpec<NX, NT>, ModelError>;

    fn transition(
        &self,
        x: &Vector<NX>,
        theta: &Vector<NT>,
    ) -> Result<TransitionSpec<NX, NT>, ModelError>;

    fn observation(
        &self,
        x: &Vector<NX>,
        theta: &Vector<NT>,
    ) -> Result<ObservationSpec<NX, NY, NT>, ModelError>;

    /// The exact conditional `p(x_t | x_{t-1}, y_t)` when it is Gaussian.
    fn optimal_proposal(
        &self,
        _x: &Vector<NX>,
        _theta: &Vector<NT>,
        _y: &Vector<NY>,
    ) -> Result<ProposalSpec<NX, NT>, ModelError> {
        Err(ModelError::Unsupported {
            model: self.name(),
            policy: ProposalPolicy::Optimal,
        })
    }

    /// `p(y_t | x_{t-1})` as a Gaussian in `y` conditioned on `x_{t-1}`.
    fn predictive(
        &self,
        _x: &Vector<NX>,
        _theta: &Vector<NT>,
    ) -> Result<GaussianSpec<NY, NX, NT>, ModelError> {
        Err(ModelError::Unsupported {
            model: self.name(),
            policy: ProposalPolicy::Optimal,
        })
    }

    /// Whether `Q` and `R` are free of the state, which the linearised Kalman
    /// proposal requires.
    fn state_independent_noise(&self) -> bool {
        true
    }

    /// Matrix form of a linear-Gaussian model, used by the exact Kalman
    /// filter.
    fn linear_form(&self, _theta: &Vector<NT>) -> Option<LinearForm<NX, NY, NT>> {
        None
    }

    fn proposal(
        &self,
        x: &Vector<NX>,
        theta: &Vector<NT>,
        y: &Vector<NY>,
    ) -> Result<ProposalSpec<NX, NT>, ModelError> {
        match self.policy() {
            ProposalPolicy::Prior => self.transition(x, theta),
            ProposalPolicy::Optimal => self.optimal_proposal(x, theta, y),
            ProposalPolicy::Ekf => {
                if !self.state_independent_noise() {
                    return Err(ModelError::Unsupported {
                        model: self.name(),
                        policy: ProposalPolicy::Ekf,
                    });
                }
                let tr = self.transition(x, theta)?;
                let obs = self.observation(&tr.mean, theta)?;
                Ok(crate::kalman::ekf_proposal(&tr, &obs, y)?)
            }
        }
    }

    fn weight_kind(&self) -> IncrementalWeightKind {
        match self.policy() {
            ProposalPolicy::Prior => IncrementalWeightKind::LikelihoodAtNewState,
            ProposalPolicy::Optimal => IncrementalWeightKind::Predictive,
            ProposalPolicy::Ekf => IncrementalWeightKind::FullRatio,
        }
    }
}

/// Runtime model selection as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelKind {
    #[serde(rename = "randomwalk")]
    RandomWalk {
        #[serde(default = "default_obs_var")]
        obs_var: f64,
    },
    Lgss,
    Sv,
    Lorenz63 {
        #[serde(default = "default_lorenz_ny")]
        n_y: usize,
        #[serde(default)]
        estimate_sigma_r: bool,
        #[serde(default = "default_sigma_r")]
        sigma_r: f64,
        #[serde(default = "default_lorenz_m0")]
        m0: [f64; 3],
        #[serde(default = "default_lorenz_s0")]
        s0: f64,
    },
}

fn default_obs_var() -> f64 {
    1.0
}
fn default_lorenz_ny() -> usize {
    2
}
fn default_sigma_r() -> f64 {
    1.0
}
fn default_lorenz_m0() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}
fn default_lorenz_s0() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub kind: ModelKind,
    #[serde(default)]
    pub policy: ProposalPolicy,
    /// Overrides the model's default priors component by component.
    #[serde(default)]
    pub priors: Option<Vec<Prior>>,
}

/// Receives a concrete, statically-dimensioned model.
pub trait ModelVisitor {
    type Output;

    fn visit<const NX: usize, const NY: usize, const NT: usize, M>(self, model: &M) -> Self::Output
    where
        M: StateSpaceModel<NX, NY, NT>;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelSpecError {
    #[error("proposal policy {policy:?} is not available for model {model}")]
    UnsupportedPolicy {
        model: &'static str,
        policy: ProposalPolicy,
    },
    #[error("invalid model setting: {0}")]
    Invalid(String),
}

impl ModelSpec {
    pub fn new(kind: ModelKind, policy: ProposalPolicy) -> Self {
        Self {
            kind,
            policy,
            priors: None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ModelKind::RandomWalk { .. } => "randomwalk",
            ModelKind::Lgss => "lgss",
            ModelKind::Sv => "sv",
            ModelKind::Lorenz63 { .. } => "lorenz63",
        }
    }

    /// `(n_x, n_y, n_θ)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        match &self.kind {
            ModelKind::RandomWalk { .. } => (1, 1, 1),
            ModelKind::Lgss | ModelKind::Sv => (1, 1, 3),
            ModelKind::Lorenz63 {
                n_y,
                estimate_sigma_r,
                ..
            } => (3, *n_y, if *estimate_sigma_r { 2 } else { 1 }),
        }
    }

    pub fn validate(&self) -> Result<(), ModelSpecError> {
        let supported = match (&self.kind, self.policy) {
            (_, ProposalPolicy::Prior) => true,
            (ModelKind::Lgss | ModelKind::RandomWalk { .. }, ProposalPolicy::Optimal) => true,
            (ModelKind::Sv, ProposalPolicy::Ekf) => false,
            (_, ProposalPolicy::Ekf) => true,
            _ => false,
        };
        if !supported {
            return Err(ModelSpecError::UnsupportedPolicy {
                model: self.name(),
                policy: self.policy,
            });
        }
        match &self.kind {
            ModelKind::RandomWalk { obs_var } if !(*obs_var > 0.0) => {
                return Err(ModelSpecError::Invalid(format!(
                    "randomwalk obs_var must be positive, got {obs_var}"
                )))
            }
            ModelKind::Lorenz63 {
                n_y, sigma_r, s0, ..
            } => {
                if !(1..=2).contains(n_y) {
                    return Err(ModelSpecError::Invalid(format!(
                        "lorenz63 n_y must be 1 or 2, got {n_y}"
                    )));
                }
                if !(*sigma_r > 0.0) || !(*s0 > 0.0) {
                    return Err(ModelSpecError::Invalid(
                        "lorenz63 sigma_r and s0 must be positive".into(),
                    ));
                }
            }
            _ => {}
        }
        if let Some(priors) = &self.priors {
            let nt = self.dims().2;
            if priors.len() != nt {
                return Err(ModelSpecError::Invalid(format!(
                    "{} priors given for {nt} parameters",
                    priors.len()
                )));
            }
            for p in priors {
                p.validate().map_err(ModelSpecError::Invalid)?;
            }
        }
        Ok(())
    }

    /// Parameter metadata with any configured prior overrides applied.
    pub fn params(&self) -> Vec<ParamInfo> {
        struct Params;
        impl ModelVisitor for Params {
            type Output = Vec<ParamInfo>;
            fn visit<const NX: usize, const NY: usize, const NT: usize, M>(
                self,
                model: &M,
            ) -> Vec<ParamInfo>
            where
                M: StateSpaceModel<NX, NY, NT>,
            {
                model.params()
            }
        }
        let mut params = self.dispatch(Params).unwrap_or_default();
        if let Some(priors) = &self.priors {
            for (p, prior) in params.iter_mut().zip(priors) {
                p.prior = *prior;
            }
        }
        params
    }

    /// Builds the concrete model and runs `visitor` on it.
    pub fn dispatch<V: ModelVisitor>(&self, visitor: V) -> Result<V::Output, ModelSpecError> {
        self.validate()?;
        let policy = self.policy;
        Ok(match &self.kind {
            ModelKind::RandomWalk { obs_var } => visitor.visit(&RandomWalk::new(*obs_var, policy)),
            ModelKind::Lgss => visitor.visit(&Lgss::new(policy)),
            ModelKind::Sv => visitor.visit(&StochVol::new(policy)),
            ModelKind::Lorenz63 {
                n_y,
                estimate_sigma_r,
                sigma_r,
                m0,
                s0,
            } => {
                let m0 = Vector::<3>::from(*m0);
                match (*n_y, *estimate_sigma_r) {
                    (1, false) => visitor.visit(&Lorenz63::<1, 1>::new(*sigma_r, m0, *s0, policy)),
                    (1, true) => visitor.visit(&Lorenz63::<1, 2>::new(*sigma_r, m0, *s0, policy)),
                    (2, false) => visitor.visit(&Lorenz63::<2, 1>::new(*sigma_r, m0, *s0, policy)),
                    _ => visitor.visit(&Lorenz63::<2, 2>::new(*sigma_r, m0, *s0, policy)),
                }
            }
        })
    }
}
