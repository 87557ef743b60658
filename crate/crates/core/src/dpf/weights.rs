//! Particle propagation through the reparameterised proposal and the
//! incremental log-weight with its total θ-derivative.

use crate::gaussian::{frobenius, GaussianFactor, LinalgError, Matrix, SqrtFactor, Vector};
use crate::ssm::{GaussianSpec, IncrementalWeightKind, ObservationSpec, ProposalSpec, TransitionSpec};

use super::Particle;

/// Reuses a factorisation while the covariance it was built from is
/// unchanged, which is the common case for state-independent noise.
#[derive(Debug)]
pub(crate) struct Cached<T, const D: usize> {
    key: Option<Matrix<D, D>>,
    value: Option<T>,
}

impl<T, const D: usize> Default for Cached<T, D> {
    fn default() -> Self {
        Self {
            key: None,
            value: None,
        }
    }
}

impl<T, const D: usize> Cached<T, D> {
    pub(crate) fn get_or_try(
        &mut self,
        cov: &Matrix<D, D>,
        build: impl FnOnce(&Matrix<D, D>) -> Result<T, LinalgError>,
    ) -> Result<&T, LinalgError> {
        if self.key.as_ref() != Some(cov) || self.value.is_none() {
            self.value = Some(build(cov)?);
            self.key = Some(*cov);
        }
        Ok(self.value.as_ref().expect("just filled"))
    }
}

pub(crate) type FactorCache<const D: usize> = Cached<GaussianFactor<D>, D>;
pub(crate) type SqrtCache<const D: usize> = Cached<SqrtFactor<D>, D>;

/// `log N(z; m, C)` and its total θ-derivative, where `z` has sensitivity
/// `dz` and the density's conditioning state has sensitivity `dcond`.
pub fn log_density_with_grad<const D: usize, const NX: usize, const NT: usize>(
    z: &Vector<D>,
    dz: &Matrix<D, NT>,
    spec: &GaussianSpec<D, NX, NT>,
    dcond: &Matrix<NX, NT>,
) -> Result<(f64, Vector<NT>), LinalgError> {
    let factor = GaussianFactor::new(&spec.cov, "density covariance")?;
    Ok(log_density_with_factor(&factor, z, dz, spec, dcond))
}

pub(crate) fn log_density_with_factor<const D: usize, const NX: usize, const NT: usize>(
    factor: &GaussianFactor<D>,
    z: &Vector<D>,
    dz: &Matrix<D, NT>,
    spec: &GaussianSpec<D, NX, NT>,
    dcond: &Matrix<NX, NT>,
) -> (f64, Vector<NT>) {
    let value = factor.log_pdf(z, &spec.mean);
    let p = factor.dlog_pdf(z, &spec.mean);
    let dmean = spec.total_dmean(dcond);
    let mut grad = Vector::<NT>::zeros();
    for k in 0..NT {
        grad[k] = p.dx.dot(&dz.column(k))
            + p.dmu.dot(&dmean.column(k))
            + frobenius(&p.dcov, &spec.total_dcov(dcond, k));
    }
    (value, grad)
}

/// Explicit θ-partials of `log N(z; m(x, θ), C(x, θ))` with `z` and `x` held
/// fixed.
pub(crate) fn explicit_score<const D: usize, const NX: usize, const NT: usize>(
    factor: &GaussianFactor<D>,
    z: &Vector<D>,
    spec: &GaussianSpec<D, NX, NT>,
) -> Vector<NT> {
    let p = factor.dlog_pdf(z, &spec.mean);
    let mut out = Vector::<NT>::zeros();
    for k in 0..NT {
        out[k] = p.dmu.dot(&spec.dmean_dtheta.column(k)) + frobenius(&p.dcov, &spec.dcov_dtheta[k]);
    }
    out
}

/// `x' = μ + √C ε` and `dx'/dθ = ∂f/∂x · dx/dθ + ∂f/∂θ`.
pub(crate) fn propagate_with<const NX: usize, const NT: usize>(
    dx_prev: &Matrix<NX, NT>,
    spec: &ProposalSpec<NX, NT>,
    sqrt: &SqrtFactor<NX>,
    eps: &Vector<NX>,
) -> (Vector<NX>, Matrix<NX, NT>) {
    let x = spec.mean + sqrt.sqrt() * eps;
    let mut dx = spec.total_dmean(dx_prev);
    for k in 0..NT {
        let dc = spec.total_dcov(dx_prev, k);
        if dc.iter().any(|&v| v != 0.0) {
            let col = sqrt.derivative(&dc) * eps;
            let mut target = dx.column_mut(k);
            target += col;
        }
    }
    (x, dx)
}

/// Moves a particle through its proposal with pre-drawn noise `eps`,
/// carrying its weight fields unchanged.
pub fn propagate<const NX: usize, const NT: usize>(
    particle: &Particle<NX, NT>,
    spec: &ProposalSpec<NX, NT>,
    eps: &Vector<NX>,
) -> Result<Particle<NX, NT>, LinalgError> {
    let sqrt = SqrtFactor::new(&spec.cov, "proposal covariance")?;
    let (x, dx) = propagate_with(&particle.dx, spec, &sqrt, eps);
    Ok(Particle { x, dx, ..*particle })
}

/// Densities needed to form one incremental weight.
pub struct WeightInputs<'a, const NX: usize, const NY: usize, const NT: usize> {
    pub kind: IncrementalWeightKind,
    pub y: &'a Vector<NY>,
    /// Proposal, conditioned on the previous state.
    pub proposal: &'a ProposalSpec<NX, NT>,
    /// Transition, conditioned on the previous state (full ratio only).
    pub transition: Option<&'a TransitionSpec<NX, NT>>,
    /// Observation density at the new state (all kinds but predictive).
    pub observation: Option<&'a ObservationSpec<NX, NY, NT>>,
    /// `p(y | x_prev)` (predictive only).
    pub predictive: Option<&'a GaussianSpec<NY, NX, NT>>,
}

/// `log σ_t` and `d log σ_t / dθ` for a particle that moved from `prev` to
/// `new`.
pub fn incremental_logw_and_grad<const NX: usize, const NY: usize, const NT: usize>(
    prev: &Particle<NX, NT>,
    new: &Particle<NX, NT>,
    inputs: &WeightInputs<'_, NX, NY, NT>,
) -> Result<(f64, Vector<NT>), LinalgError> {
    let zero_y = Matrix::<NY, NT>::zeros();
    let missing = LinalgError::NonFinite {
        what: "incremental weight inputs",
    };
    match inputs.kind {
        IncrementalWeightKind::LikelihoodAtNewState => {
            let obs = inputs.observation.ok_or(missing)?;
            log_density_with_grad(inputs.y, &zero_y, &obs.density, &new.dx)
        }
        IncrementalWeightKind::Predictive => {
            let pred = inputs.predictive.ok_or(missing)?;
            log_density_with_grad(inputs.y, &zero_y, pred, &prev.dx)
        }
        IncrementalWeightKind::FullRatio => {
            let obs = inputs.observation.ok_or(missing.clone())?;
            let tr = inputs.transition.ok_or(missing)?;
            let (l, dl) = log_density_with_grad(inputs.y, &zero_y, &obs.density, &new.dx)?;
            let (p, dp) = log_density_with_grad(&new.x, &new.dx, tr, &prev.dx)?;
            let (q, dq) = log_density_with_grad(&new.x, &new.dx, inputs.proposal, &prev.dx)?;
            Ok((l + p - q, dl + dp - dq))
        }
    }
}
