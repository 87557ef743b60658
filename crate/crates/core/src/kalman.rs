//! Exact Kalman filtering for linear-Gaussian models and the linearised
//! Kalman proposal with its derivatives.

use thiserror::Error;

use crate::gaussian::{inv_derivative_with, GaussianFactor, LinalgError, Matrix, Vector};
use crate::ssm::{ObservationSpec, ProposalSpec, StateSpaceModel, TransitionSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KalmanError {
    #[error("model {0} has no linear-Gaussian form")]
    NotLinear(&'static str),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Filtering mean and covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KfState<const NX: usize> {
    pub mean: Vector<NX>,
    pub cov: Matrix<NX, NX>,
}

fn symmetrize<const D: usize>(m: &Matrix<D, D>) -> Matrix<D, D> {
    0.5 * (m + m.transpose())
}

/// Exact `log p(y_{1:T} | θ)`.
pub fn kf_loglik<const NX: usize, const NY: usize, const NT: usize, M>(
    model: &M,
    y: &[Vector<NY>],
    theta: &Vector<NT>,
) -> Result<f64, KalmanError>
where
    M: StateSpaceModel<NX, NY, NT> + ?Sized,
{
    let lf = model
        .linear_form(theta)
        .ok_or(KalmanError::NotLinear(model.name()))?;
    let mut state = KfState {
        mean: lf.m0,
        cov: lf.p0,
    };
    let mut ll = 0.0;
    for yt in y {
        let mp = lf.f * state.mean;
        let pp = lf.f * state.cov * lf.f.transpose() + lf.q;
        let s = symmetrize(&(lf.h * pp * lf.h.transpose() + lf.r));
        let fs = GaussianFactor::new(&s, "innovation covariance")?;
        let v = yt - lf.h * mp;
        ll += fs.log_pdf(&v, &Vector::zeros());
        let k = pp * lf.h.transpose() * fs.inverse();
        state.mean = mp + k * v;
        state.cov = symmetrize(&(pp - k * lf.h * pp));
    }
    Ok(ll)
}

/// Exact log-likelihood and its θ-gradient, the latter obtained by
/// differentiating every step of the recursion.
pub fn kf_loglik_grad<const NX: usize, const NY: usize, const NT: usize, M>(
    model: &M,
    y: &[Vector<NY>],
    theta: &Vector<NT>,
) -> Result<(f64, Vector<NT>), KalmanError>
where
    M: StateSpaceModel<NX, NY, NT> + ?Sized,
{
    let lf = model
        .linear_form(theta)
        .ok_or(KalmanError::NotLinear(model.name()))?;
    let (f, q, h, r) = (lf.f, lf.q, lf.h, lf.r);
    let mut m = lf.m0;
    let mut p = lf.p0;
    let mut dm = lf.dm0;
    let mut dp = lf.dp0;
    let mut ll = 0.0;
    let mut grad = Vector::<NT>::zeros();
    for yt in y {
        let mp = f * m;
        let pp = f * p * f.transpose() + q;
        let s = symmetrize(&(h * pp * h.transpose() + r));
        let fs = GaussianFactor::new(&s, "innovation covariance")?;
        let s_inv = *fs.inverse();
        let v = yt - h * mp;
        ll += fs.log_pdf(&v, &Vector::zeros());
        let k = pp * h.transpose() * s_inv;
        let sv = s_inv * v;

        for i in 0..NT {
            let (df, dh) = (lf.df[i], lf.dh[i]);
            let dmp = df * m + f * dm[i];
            let dpp = df * p * f.transpose() + f * dp[i] * f.transpose()
                + f * p * df.transpose()
                + lf.dq[i];
            let dv = -dh * mp - h * dmp;
            let ds = dh * pp * h.transpose() + h * dpp * h.transpose() + h * pp * dh.transpose()
                + lf.dr[i];
            // d/dθ [-½ vᵀS⁻¹v - ½ log|S|]
            grad[i] += -sv.dot(&dv) + 0.5 * sv.dot(&(ds * sv)) - 0.5 * (s_inv * ds).trace();
            let ds_inv = inv_derivative_with(&s_inv, &ds);
            let dk = dpp * h.transpose() * s_inv + pp * dh.transpose() * s_inv
                + pp * h.transpose() * ds_inv;
            dm[i] = dmp + dk * v + k * dv;
            dp[i] = symmetrize(&(dpp - dk * h * pp - k * dh * pp - k * h * dpp));
        }
        m = mp + k * v;
        p = symmetrize(&(pp - k * h * pp));
    }
    Ok((ll, grad))
}

/// One direction of differentiation for [`ekf_proposal`]: either a component
/// of the previous state or of `θ`.
struct Direction<const NX: usize, const NY: usize> {
    da: Vector<NX>,
    dq: Matrix<NX, NX>,
    /// Explicit θ-partials of `h`, `∂h/∂x` and `R` (zero for state directions).
    dh_explicit: Vector<NY>,
    dhx_explicit: Matrix<NY, NX>,
    dr_explicit: Matrix<NY, NY>,
}

/// Linearised Kalman proposal
/// `μ = a + K(y - h̃)`, `C = Q - K H̃ Q`, `S = H̃ Q H̃ᵀ + R̃`, `K = Q H̃ᵀ S⁻¹`,
/// where `h̃`, `H̃`, `R̃` are evaluated at the prior mean `a`.
///
/// `obs` must be evaluated at `tr.mean`. Derivatives with respect to `x_{t-1}`
/// and `θ` follow from the product rule, with `h̃`, `H̃`, `R̃` differentiated
/// through `a`.
pub fn ekf_proposal<const NX: usize, const NY: usize, const NT: usize>(
    tr: &TransitionSpec<NX, NT>,
    obs: &ObservationSpec<NX, NY, NT>,
    y: &Vector<NY>,
) -> Result<ProposalSpec<NX, NT>, LinalgError> {
    let a = tr.mean;
    let q = tr.cov;
    let h_t = obs.density.mean;
    let hx = obs.density.dmean_dx;
    let r_t = obs.density.cov;

    let s = symmetrize(&(hx * q * hx.transpose() + r_t));
    let s_inv = *GaussianFactor::new(&s, "innovation covariance")?.inverse();
    let k = q * hx.transpose() * s_inv;
    let innov = y - h_t;

    let mut spec = ProposalSpec::<NX, NT>::zeros();
    spec.mean = a + k * innov;
    spec.cov = symmetrize(&(q - k * hx * q));

    let differentiate = |d: &Direction<NX, NY>| -> (Vector<NX>, Matrix<NX, NX>) {
        let dh = hx * d.da + d.dh_explicit;
        let mut dhx = d.dhx_explicit;
        let mut dr = d.dr_explicit;
        for i in 0..NX {
            let w = d.da[i];
            if w != 0.0 {
                dhx += obs.d2h_dx2[i] * w;
                dr += obs.density.dcov_dx[i] * w;
            }
        }
        let ds = dhx * q * hx.transpose() + hx * d.dq * hx.transpose() + hx * q * dhx.transpose()
            + dr;
        let ds_inv = inv_derivative_with(&s_inv, &ds);
        let dk = d.dq * hx.transpose() * s_inv + q * dhx.transpose() * s_inv
            + q * hx.transpose() * ds_inv;
        let dmu = d.da + dk * innov - k * dh;
        let dc = d.dq - dk * hx * q - k * dhx * q - k * hx * d.dq;
        (dmu, symmetrize(&dc))
    };

    for j in 0..NX {
        let (dmu, dc) = differentiate(&Direction {
            da: tr.dmean_dx.column(j).into_owned(),
            dq: tr.dcov_dx[j],
            dh_explicit: Vector::zeros(),
            dhx_explicit: Matrix::zeros(),
            dr_explicit: Matrix::zeros(),
        });
        spec.dmean_dx.set_column(j, &dmu);
        spec.dcov_dx[j] = dc;
    }
    for k_ in 0..NT {
        let (dmu, dc) = differentiate(&Direction {
            da: tr.dmean_dtheta.column(k_).into_owned(),
            dq: tr.dcov_dtheta[k_],
            dh_explicit: obs.density.dmean_dtheta.column(k_).into_owned(),
            dhx_explicit: obs.d2h_dxdtheta[k_],
            dr_explicit: obs.density.dcov_dtheta[k_],
        });
        spec.dmean_dtheta.set_column(k_, &dmu);
        spec.dcov_dtheta[k_] = dc;
    }
    Ok(spec)
}
