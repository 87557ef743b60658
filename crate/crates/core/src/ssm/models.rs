use super::{
    GaussianSpec, InitialSpec, LinearForm, ModelError, ObservationSpec, ProposalPolicy,
    ProposalSpec, StateSpaceModel, TransitionSpec,
};
use crate::gaussian::{Matrix, Vector};
use crate::params::{Constraint, ParamInfo, Prior};

type V1 = Vector<1>;
type M1 = Matrix<1, 1>;

fn m1(v: f64) -> M1 {
    M1::new(v)
}

/// Scalar observation `y = x + e`, `e ~ N(0, r)` with `r` fixed.
fn identity_observation<const NT: usize>(x: &V1, r: f64) -> ObservationSpec<1, 1, NT> {
    let mut obs = ObservationSpec::zeros();
    obs.density.mean = *x;
    obs.density.cov = m1(r);
    obs.density.dmean_dx = m1(1.0);
    obs
}

/// `x_t = x_{t-1} + θ v_t`, `y_t = x_t + e_t` with `x_0 = 0` and known
/// observation variance.
#[derive(Debug, Clone)]
pub struct RandomWalk {
    obs_var: f64,
    policy: ProposalPolicy,
}

impl RandomWalk {
    pub fn new(obs_var: f64, policy: ProposalPolicy) -> Self {
        Self { obs_var, policy }
    }
}

impl StateSpaceModel<1, 1, 1> for RandomWalk {
    fn name(&self) -> &'static str {
        "randomwalk"
    }

    fn params(&self) -> Vec<ParamInfo> {
        vec![ParamInfo::new(
            "theta",
            Constraint::Positive,
            Prior::Gamma { shape: 1.0, rate: 1.0 },
        )]
    }

    fn policy(&self) -> ProposalPolicy {
        self.policy
    }

    fn initial(&self, _theta: &V1) -> Result<InitialSpec<1, 1>, ModelError> {
        Ok(InitialSpec::point(V1::zeros()))
    }

    fn transition(&self, x: &V1, theta: &V1) -> Result<TransitionSpec<1, 1>, ModelError> {
        let s = theta[0];
        let mut spec = GaussianSpec::zeros();
        spec.mean = *x;
        spec.cov = m1(s * s);
        spec.dmean_dx = m1(1.0);
        spec.dcov_dtheta = [m1(2.0 * s)];
        Ok(spec)
    }

    fn observation(&self, x: &V1, _theta: &V1) -> Result<ObservationSpec<1, 1, 1>, ModelError> {
        Ok(identity_observation(x, self.obs_var))
    }

    fn optimal_proposal(&self, x: &V1, theta: &V1, y: &V1) -> Result<ProposalSpec<1, 1>, ModelError> {
        let s = theta[0];
        let (pv, pe) = (1.0 / (s * s), 1.0 / self.obs_var);
        let s2 = 1.0 / (pv + pe);
        let inner = y[0] * pe + x[0] * pv;
        let ds2 = 2.0 * s2 * s2 / (s * s * s);
        let mut spec = GaussianSpec::zeros();
        spec.mean = V1::new(s2 * inner);
        spec.cov = m1(s2);
        spec.dmean_dx = m1(s2 * pv);
        spec.dmean_dtheta = m1(ds2 * inner - 2.0 * s2 * x[0] / (s * s * s));
        spec.dcov_dtheta = [m1(ds2)];
        Ok(spec)
    }

    fn predictive(&self, x: &V1, theta: &V1) -> Result<GaussianSpec<1, 1, 1>, ModelError> {
        let s = theta[0];
        let mut spec = GaussianSpec::zeros();
        spec.mean = *x;
        spec.cov = m1(s * s + self.obs_var);
        spec.dmean_dx = m1(1.0);
        spec.dcov_dtheta = [m1(2.0 * s)];
        Ok(spec)
    }

    fn linear_form(&self, theta: &V1) -> Option<LinearForm<1, 1, 1>> {
        let s = theta[0];
        Some(LinearForm {
            m0: V1::zeros(),
            p0: M1::zeros(),
            f: m1(1.0),
            q: m1(s * s),
            h: m1(1.0),
            r: m1(self.obs_var),
            dm0: [V1::zeros()],
            dp0: [M1::zeros()],
            df: [M1::zeros()],
            dq: [m1(2.0 * s)],
            dh: [M1::zeros()],
            dr: [M1::zeros()],
        })
    }
}

/// Linear Gaussian model with `θ = (φ, σ_v, σ_e)`:
/// `x_t = φ x_{t-1} + σ_v v_t`, `y_t = x_t + σ_e e_t`, `x_0 = 0`.
#[derive(Debug, Clone)]
pub struct Lgss {
    policy: ProposalPolicy,
}

impl Lgss {
    pub fn new(policy: ProposalPolicy) -> Self {
        Self { policy }
    }
}

impl StateSpaceModel<1, 1, 3> for Lgss {
    fn name(&self) -> &'static str {
        "lgss"
    }

    fn params(&self) -> Vec<ParamInfo> {
        vec![
            ParamInfo::new("phi", Constraint::Unconstrained, Prior::Normal { mean: 0.0, sd: 1.0 }),
            ParamInfo::new("sigma_v", Constraint::Positive, Prior::Gamma { shape: 1.0, rate: 1.0 }),
            ParamInfo::new("sigma_e", Constraint::Positive, Prior::Gamma { shape: 1.0, rate: 1.0 }),
        ]
    }

    fn policy(&self) -> ProposalPolicy {
        self.policy
    }

    fn initial(&self, _theta: &Vector<3>) -> Result<InitialSpec<1, 3>, ModelError> {
        Ok(InitialSpec::point(V1::zeros()))
    }

    fn transition(&self, x: &V1, theta: &Vector<3>) -> Result<TransitionSpec<1, 3>, ModelError> {
        let (phi, sv) = (theta[0], theta[1]);
        let mut spec = GaussianSpec::zeros();
        spec.mean = V1::new(phi * x[0]);
        spec.cov = m1(sv * sv);
        spec.dmean_dx = m1(phi);
        spec.dmean_dtheta = Matrix::<1, 3>::new(x[0], 0.0, 0.0);
        spec.dcov_dtheta[1] = m1(2.0 * sv);
        Ok(spec)
    }

    fn observation(
        &self,
        x: &V1,
        theta: &Vector<3>,
    ) -> Result<ObservationSpec<1, 1, 3>, ModelError> {
        let se = theta[2];
        let mut obs = identity_observation(x, se * se);
        obs.density.dcov_dtheta[2] = m1(2.0 * se);
        Ok(obs)
    }

    fn optimal_proposal(
        &self,
        x: &V1,
        theta: &Vector<3>,
        y: &V1,
    ) -> Result<ProposalSpec<1, 3>, ModelError> {
        let (phi, sv, se) = (theta[0], theta[1], theta[2]);
        let (x, y) = (x[0], y[0]);
        let (pv, pe) = (1.0 / (sv * sv), 1.0 / (se * se));
        let s2 = 1.0 / (pv + pe);
        let inner = y * pe + phi * x * pv;
        // ∂s²/∂σ = 2 s⁴ / σ³ for either noise scale
        let ds2_dsv = 2.0 * s2 * s2 / (sv * sv * sv);
        let ds2_dse = 2.0 * s2 * s2 / (se * se * se);

        let mut spec = GaussianSpec::zeros();
        spec.mean = V1::new(s2 * inner);
        spec.cov = m1(s2);
        spec.dmean_dx = m1(s2 * phi * pv);
        spec.dmean_dtheta = Matrix::<1, 3>::new(
            s2 * x * pv,
            ds2_dsv * inner - 2.0 * s2 * phi * x / (sv * sv * sv),
            ds2_dse * inner - 2.0 * s2 * y / (se * se * se),
        );
        spec.dcov_dtheta = [M1::zeros(), m1(ds2_dsv), m1(ds2_dse)];
        Ok(spec)
    }

    fn predictive(
        &self,
        x: &V1,
        theta: &Vector<3>,
    ) -> Result<GaussianSpec<1, 1, 3>, ModelError> {
        let (phi, sv, se) = (theta[0], theta[1], theta[2]);
        let mut spec = GaussianSpec::zeros();
        spec.mean = V1::new(phi * x[0]);
        spec.cov = m1(sv * sv + se * se);
        spec.dmean_dx = m1(phi);
        spec.dmean_dtheta = Matrix::<1, 3>::new(x[0], 0.0, 0.0);
        spec.dcov_dtheta = [M1::zeros(), m1(2.0 * sv), m1(2.0 * se)];
        Ok(spec)
    }

    fn linear_form(&self, theta: &Vector<3>) -> Option<LinearForm<1, 1, 3>> {
        let (phi, sv, se) = (theta[0], theta[1], theta[2]);
        Some(LinearForm {
            m0: V1::zeros(),
            p0: M1::zeros(),
            f: m1(phi),
            q: m1(sv * sv),
            h: m1(1.0),
            r: m1(se * se),
            dm0: [V1::zeros(); 3],
            dp0: [M1::zeros(); 3],
            df: [m1(1.0), M1::zeros(), M1::zeros()],
            dq: [M1::zeros(), m1(2.0 * sv), M1::zeros()],
            dh: [M1::zeros(); 3],
            dr: [M1::zeros(), M1::zeros(), m1(2.0 * se)],
        })
    }
}

/// Stochastic volatility with `θ = (μ, φ, σ_v)`:
/// `x_0 ~ N(μ, σ_v²/(1-φ²))`, `x_t = μ + φ(x_{t-1} - μ) + σ_v v_t`,
/// `y_t ~ N(0, exp(x_t))`.
#[derive(Debug, Clone)]
pub struct StochVol {
    policy: ProposalPolicy,
}

impl StochVol {
    pub fn new(policy: ProposalPolicy) -> Self {
        Self { policy }
    }
}

impl StateSpaceModel<1, 1, 3> for StochVol {
    fn name(&self) -> &'static str {
        "sv"
    }

    fn params(&self) -> Vec<ParamInfo> {
        vec![
            ParamInfo::new("mu", Constraint::Unconstrained, Prior::Normal { mean: 0.0, sd: 1.0 }),
            ParamInfo::new("phi", Constraint::Unconstrained, Prior::Normal { mean: 0.0, sd: 1.0 }),
            ParamInfo::new("sigma_v", Constraint::Positive, Prior::Gamma { shape: 2.0, rate: 10.0 }),
        ]
    }

    fn policy(&self) -> ProposalPolicy {
        self.policy
    }

    fn state_independent_noise(&self) -> bool {
        false
    }

    fn initial(&self, theta: &Vector<3>) -> Result<InitialSpec<1, 3>, ModelError> {
        let (mu, phi, sv) = (theta[0], theta[1], theta[2]);
        if !(phi.abs() < 1.0) {
            return Err(ModelError::InvalidParameter { name: "phi", value: phi });
        }
        let one_m = 1.0 - phi * phi;
        Ok(InitialSpec {
            mean: V1::new(mu),
            dmean_dtheta: Matrix::<1, 3>::new(1.0, 0.0, 0.0),
            cov: Some(m1(sv * sv / one_m)),
            dcov_dtheta: [
                M1::zeros(),
                m1(2.0 * phi * sv * sv / (one_m * one_m)),
                m1(2.0 * sv / one_m),
            ],
        })
    }

    fn transition(&self, x: &V1, theta: &Vector<3>) -> Result<TransitionSpec<1, 3>, ModelError> {
        let (mu, phi, sv) = (theta[0], theta[1], theta[2]);
        let mut spec = GaussianSpec::zeros();
        spec.mean = V1::new(mu + phi * (x[0] - mu));
        spec.cov = m1(sv * sv);
        spec.dmean_dx = m1(phi);
        spec.dmean_dtheta = Matrix::<1, 3>::new(1.0 - phi, x[0] - mu, 0.0);
        spec.dcov_dtheta[2] = m1(2.0 * sv);
        Ok(spec)
    }

    fn observation(
        &self,
        x: &V1,
        _theta: &Vector<3>,
    ) -> Result<ObservationSpec<1, 1, 3>, ModelError> {
        let r = x[0].exp();
        if !r.is_finite() || r <= 0.0 {
            return Err(ModelError::Divergence);
        }
        let mut obs = ObservationSpec::zeros();
        obs.density.cov = m1(r);
        obs.density.dcov_dx = [m1(r)];
        Ok(obs)
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::{check_gaussian_partials, check_observation_curvature};
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lgss_transition_example() {
        let m = Lgss::new(ProposalPolicy::Prior);
        let t = m
            .transition(&V1::new(2.0), &Vector::<3>::new(0.5, 1.0, 1.0))
            .unwrap();
        assert_eq!(t.mean[0], 1.0);
        assert_eq!(t.cov[(0, 0)], 1.0);
        assert_eq!(t.dmean_dx[(0, 0)], 0.5);
        assert_eq!(t.dmean_dtheta, Matrix::<1, 3>::new(2.0, 0.0, 0.0));
        assert_eq!(t.dcov_dtheta[1][(0, 0)], 2.0);
    }

    #[test]
    fn lgss_observation_example() {
        let m = Lgss::new(ProposalPolicy::Prior);
        let o = m
            .observation(&V1::new(3.0), &Vector::<3>::new(0.5, 1.0, 2.0))
            .unwrap();
        assert_eq!(o.h()[0], 3.0);
        assert_eq!(o.r()[(0, 0)], 4.0);
        assert_eq!(o.density.dmean_dx[(0, 0)], 1.0);
        assert_eq!(o.density.dcov_dtheta[2][(0, 0)], 4.0);
    }

    #[test]
    fn sv_at_mean_has_no_phi_sensitivity() {
        let m = StochVol::new(ProposalPolicy::Prior);
        for phi in [-0.5, 0.3, 0.97] {
            let theta = Vector::<3>::new(-0.7, phi, 0.2);
            let t = m.transition(&V1::new(-0.7), &theta).unwrap();
            assert_eq!(t.mean[0], -0.7);
            assert_eq!(t.dmean_dtheta[(0, 1)], 0.0);
        }
    }

    #[test]
    fn sv_observation_at_zero() {
        let m = StochVol::new(ProposalPolicy::Prior);
        let o = m.observation(&V1::new(0.0), &Vector::<3>::new(0.0, 0.9, 0.2)).unwrap();
        assert_eq!(o.r()[(0, 0)], 1.0);
        assert_eq!(o.density.dcov_dx[0][(0, 0)], 1.0);
        assert_eq!(o.h()[0], 0.0);
    }

    #[test]
    fn sv_prior_proposal_equals_transition() {
        let m = StochVol::new(ProposalPolicy::Prior);
        let theta = Vector::<3>::new(-0.2, 0.95, 0.2);
        let x = V1::new(-0.2);
        assert_eq!(
            m.proposal(&x, &theta, &V1::new(1.3)).unwrap(),
            m.transition(&x, &theta).unwrap()
        );
    }

    #[test]
    fn sv_rejects_nonstationary_phi() {
        let m = StochVol::new(ProposalPolicy::Prior);
        assert!(m.initial(&Vector::<3>::new(0.0, 1.0, 0.2)).is_err());
        assert!(m.initial(&Vector::<3>::new(0.0, -1.3, 0.2)).is_err());
    }

    #[test]
    fn lgss_optimal_examples() {
        let m = Lgss::new(ProposalPolicy::Optimal);
        let theta = Vector::<3>::new(0.7, 1.0, 1.0);
        let p = m.proposal(&V1::new(0.0), &theta, &V1::new(0.0)).unwrap();
        assert_eq!(p.cov[(0, 0)], 0.5);
        assert_eq!(p.mean[0], 0.0);
        let pred = m.predictive(&V1::new(2.0), &theta).unwrap();
        assert!((pred.cov[(0, 0)] - 2.0).abs() < 1e-15);
        assert!((pred.mean[0] - 1.4).abs() < 1e-15);
    }

    #[test]
    fn lgss_optimal_is_the_exact_conditional() {
        // p(x|x_prev) p(y|x) / p(y|x_prev) must equal q(x|x_prev, y) pointwise
        use crate::gaussian::log_normal;
        let m = Lgss::new(ProposalPolicy::Optimal);
        let theta = Vector::<3>::new(0.6, 0.8, 1.7);
        let (xp, y) = (V1::new(0.4), V1::new(-1.1));
        let q = m.optimal_proposal(&xp, &theta, &y).unwrap();
        let tr = m.transition(&xp, &theta).unwrap();
        let pred = m.predictive(&xp, &theta).unwrap();
        for x in [-2.0, 0.1, 1.5] {
            let x = V1::new(x);
            let obs = m.observation(&x, &theta).unwrap();
            let lhs = log_normal(&x, &tr.mean, &tr.cov).unwrap()
                + log_normal(&y, obs.h(), obs.r()).unwrap()
                - log_normal(&y, &pred.mean, &pred.cov).unwrap();
            let rhs = log_normal(&x, &q.mean, &q.cov).unwrap();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn sv_initial_partials() {
        let m = StochVol::new(ProposalPolicy::Prior);
        let f = |_: &V1, t: &Vector<3>| m.initial(t).unwrap().as_gaussian().unwrap();
        check_gaussian_partials(f, &V1::zeros(), &Vector::<3>::new(-0.2, 0.95, 0.2), 1e-5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn lgss_partials_match_fd(
            x in -3.0..3.0f64, y in -3.0..3.0f64,
            phi in -0.99..0.99f64, sv in 0.2..2.0f64, se in 0.2..2.0f64,
        ) {
            let m = Lgss::new(ProposalPolicy::Optimal);
            let (x, y, theta) = (V1::new(x), V1::new(y), Vector::<3>::new(phi, sv, se));
            check_gaussian_partials(|x, t| m.transition(x, t).unwrap(), &x, &theta, 1e-5);
            check_gaussian_partials(|x, t| m.observation(x, t).unwrap().density, &x, &theta, 1e-5);
            check_gaussian_partials(|x, t| m.optimal_proposal(x, t, &y).unwrap(), &x, &theta, 1e-5);
            check_gaussian_partials(|x, t| m.predictive(x, t).unwrap(), &x, &theta, 1e-5);
            check_observation_curvature(|x, t| m.observation(x, t).unwrap(), &x, &theta, 1e-5);
        }

        #[test]
        fn sv_partials_match_fd(
            x in -3.0..3.0f64, mu in -1.0..1.0f64, phi in -0.99..0.99f64, sv in 0.05..1.0f64,
        ) {
            let m = StochVol::new(ProposalPolicy::Prior);
            let (x, theta) = (V1::new(x), Vector::<3>::new(mu, phi, sv));
            check_gaussian_partials(|x, t| m.transition(x, t).unwrap(), &x, &theta, 1e-5);
            check_gaussian_partials(|x, t| m.observation(x, t).unwrap().density, &x, &theta, 1e-5);
        }

        #[test]
        fn randomwalk_partials_match_fd(x in -3.0..3.0f64, y in -3.0..3.0f64, s in 0.1..4.0f64, r in 0.2..3.0f64) {
            let m = RandomWalk::new(r, ProposalPolicy::Optimal);
            let (x, y, theta) = (V1::new(x), V1::new(y), V1::new(s));
            check_gaussian_partials(|x, t| m.transition(x, t).unwrap(), &x, &theta, 1e-5);
            check_gaussian_partials(|x, t| m.observation(x, t).unwrap().density, &x, &theta, 1e-5);
            check_gaussian_partials(|x, t| m.optimal_proposal(x, t, &y).unwrap(), &x, &theta, 1e-5);
            check_gaussian_partials(|x, t| m.predictive(x, t).unwrap(), &x, &theta, 1e-5);
        }
    }
}
