//! Lorenz-63 with an RK4 propagator and its exact tangent map.

use super::{
    GaussianSpec, InitialSpec, ModelError, ObservationSpec, ProposalPolicy, StateSpaceModel,
    TransitionSpec,
};
use crate::gaussian::{Matrix, Vector};
use crate::params::{Constraint, ParamInfo, Prior};

pub const LORENZ_SIGMA: f64 = 10.0;
pub const LORENZ_R: f64 = 28.0;
pub const LORENZ_B: f64 = 8.0 / 3.0;

/// Integration step and number of steps per assimilation interval.
pub const RK4_STEP: f64 = 0.001;
pub const RK4_SUBSTEPS: usize = 50;

type V3 = Vector<3>;
type M3 = Matrix<3, 3>;

fn vector_field(x: &V3) -> V3 {
    V3::new(
        LORENZ_SIGMA * (x[1] - x[0]),
        x[0] * (LORENZ_R - x[2]) - x[1],
        x[0] * x[1] - LORENZ_B * x[2],
    )
}

fn jacobian(x: &V3) -> M3 {
    M3::new(
        -LORENZ_SIGMA, LORENZ_SIGMA, 0.0,
        LORENZ_R - x[2], -1.0, -x[0],
        x[1], x[0], -LORENZ_B,
    )
}

/// Integrates `substeps` RK4 steps of size `h` from `x`, returning the end
/// state and the Jacobian of the whole map with respect to `x`.
pub fn lorenz_rk4(x: &V3, h: f64, substeps: usize) -> (V3, M3) {
    let mut x = *x;
    let mut m = M3::identity();
    for _ in 0..substeps {
        let k1 = vector_field(&x);
        let t1 = jacobian(&x) * m;
        let x2 = x + 0.5 * h * k1;
        let k2 = vector_field(&x2);
        let t2 = jacobian(&x2) * (m + 0.5 * h * t1);
        let x3 = x + 0.5 * h * k2;
        let k3 = vector_field(&x3);
        let t3 = jacobian(&x3) * (m + 0.5 * h * t2);
        let x4 = x + h * k3;
        let k4 = vector_field(&x4);
        let t4 = jacobian(&x4) * (m + h * t3);
        x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        m += h / 6.0 * (t1 + 2.0 * t2 + 2.0 * t3 + t4);
    }
    (x, m)
}

/// Lorenz-63 observed through its first `NY` coordinates.
///
/// `θ = (σ_Q)` when `NT = 1` and `θ = (σ_Q, σ_R)` when `NT = 2`; with
/// `NT = 1` the observation noise scale is fixed at construction.
#[derive(Debug, Clone)]
pub struct Lorenz63<const NY: usize, const NT: usize> {
    sigma_r: f64,
    m0: V3,
    s0: f64,
    policy: ProposalPolicy,
}

impl<const NY: usize, const NT: usize> Lorenz63<NY, NT> {
    pub fn new(sigma_r: f64, m0: V3, s0: f64, policy: ProposalPolicy) -> Self {
        assert!((1..=3).contains(&NY) && (1..=2).contains(&NT));
        Self {
            sigma_r,
            m0,
            s0,
            policy,
        }
    }

    fn sigma_r(&self, theta: &Vector<NT>) -> f64 {
        if NT == 2 {
            theta[1]
        } else {
            self.sigma_r
        }
    }
}

impl<const NY: usize, const NT: usize> StateSpaceModel<3, NY, NT> for Lorenz63<NY, NT> {
    fn name(&self) -> &'static str {
        "lorenz63"
    }

    fn params(&self) -> Vec<ParamInfo> {
        let prior = Prior::Normal { mean: 0.0, sd: 1.0 };
        let mut p = vec![ParamInfo::new("sigma_q", Constraint::Positive, prior)];
        if NT == 2 {
            p.push(ParamInfo::new("sigma_r", Constraint::Positive, prior));
        }
        p
    }

    fn policy(&self) -> ProposalPolicy {
        self.policy
    }

    fn initial(&self, _theta: &Vector<NT>) -> Result<InitialSpec<3, NT>, ModelError> {
        Ok(InitialSpec {
            mean: self.m0,
            dmean_dtheta: Matrix::zeros(),
            cov: Some(M3::identity() * (self.s0 * self.s0)),
            dcov_dtheta: [M3::zeros(); NT],
        })
    }

    fn transition(&self, x: &V3, theta: &Vector<NT>) -> Result<TransitionSpec<3, NT>, ModelError> {
        let (a, da) = lorenz_rk4(x, RK4_STEP, RK4_SUBSTEPS);
        if !a.iter().chain(da.iter()).all(|v| v.is_finite()) {
            return Err(ModelError::Divergence);
        }
        let q = theta[0];
        let mut spec = GaussianSpec::zeros();
        spec.mean = a;
        spec.cov = M3::identity() * (q * q);
        spec.dmean_dx = da;
        spec.dcov_dtheta[0] = M3::identity() * (2.0 * q);
        Ok(spec)
    }

    fn observation(
        &self,
        x: &V3,
        theta: &Vector<NT>,
    ) -> Result<ObservationSpec<3, NY, NT>, ModelError> {
        let r = self.sigma_r(theta);
        let mut obs = ObservationSpec::zeros();
        obs.density.mean = x.fixed_rows::<NY>(0).into_owned();
        obs.density.cov = Matrix::<NY, NY>::identity() * (r * r);
        obs.density.dmean_dx = Matrix::<NY, 3>::identity();
        if NT == 2 {
            obs.density.dcov_dtheta[1] = Matrix::<NY, NY>::identity() * (2.0 * r);
        }
        Ok(obs)
    }
}
