use super::*;
use crate::kalman::{kf_loglik, kf_loglik_grad};
use crate::params::{Constraint, ParamInfo, Prior};
use crate::ssm::{
    generate, GaussianSpec, InitialSpec, Lgss, Lorenz63, ObservationSpec, ProposalPolicy,
    RandomWalk, StochVol, TransitionSpec,
};
use crate::tolerances::FD_STEP;

type V1 = Vector<1>;

fn fd_grad<const NT: usize>(f: impl Fn(&Vector<NT>) -> f64, theta: &Vector<NT>) -> Vector<NT> {
    let mut g = Vector::<NT>::zeros();
    for k in 0..NT {
        let mut tp = *theta;
        let mut tm = *theta;
        tp[k] += FD_STEP;
        tm[k] -= FD_STEP;
        g[k] = (f(&tp) - f(&tm)) / (2.0 * FD_STEP);
    }
    g
}

fn rel_err<const NT: usize>(a: &[f64], b: &Vector<NT>) -> f64 {
    let diff = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    diff / b.amax().max(1e-8)
}

fn check_sis_gradient<const NX: usize, const NY: usize, const NT: usize, M>(
    model: &M,
    theta: &Vector<NT>,
    y: &[Vector<NY>],
    n: usize,
    tol: f64,
) where
    M: StateSpaceModel<NX, NY, NT>,
{
    let cfg = FilterConfig::new(n).with_threshold(0.0);
    let bank = NoiseBank::new(17, y.len(), n, NX);
    let out = run_filter(model, theta, y, &cfg, &bank).unwrap();
    assert!(out.trace.iter().all(|s| !s.resampled));
    let fd = fd_grad(|t| run_filter(model, t, y, &cfg, &bank).unwrap().loglik, theta);
    let e = rel_err(&out.grad, &fd);
    assert!(e < tol, "{}: {:?} vs {fd} (rel {e})", model.name(), out.grad);
}

#[test]
fn sis_gradient_is_exact_for_every_model() {
    let lgss_theta = Vector::<3>::new(0.7, 1.2, 1.0);
    let y = generate(&Lgss::new(ProposalPolicy::Prior), &lgss_theta, 30, 3)
        .unwrap()
        .observations;
    for policy in [ProposalPolicy::Prior, ProposalPolicy::Optimal, ProposalPolicy::Ekf] {
        check_sis_gradient(&Lgss::new(policy), &lgss_theta, &y, 64, 1e-5);
    }

    let rw = RandomWalk::new(1.0, ProposalPolicy::Ekf);
    let y = generate(&rw, &V1::new(2.0), 30, 3).unwrap().observations;
    check_sis_gradient(&rw, &V1::new(1.7), &y, 64, 1e-5);
    check_sis_gradient(&RandomWalk::new(1.0, ProposalPolicy::Prior), &V1::new(1.7), &y, 64, 1e-5);
    check_sis_gradient(&RandomWalk::new(1.0, ProposalPolicy::Optimal), &V1::new(1.7), &y, 64, 1e-5);

    let sv = StochVol::new(ProposalPolicy::Prior);
    let sv_theta = Vector::<3>::new(-0.2, 0.95, 0.2);
    let y = generate(&sv, &sv_theta, 30, 3).unwrap().observations;
    check_sis_gradient(&sv, &Vector::<3>::new(-0.1, 0.9, 0.3), &y, 64, 1e-5);

    let lz = Lorenz63::<2, 2>::new(1.0, Vector::<3>::new(1.0, 1.0, 1.0), 1.0, ProposalPolicy::Prior);
    let lz_theta = Vector::<2>::new(0.5, 1.0);
    let y = generate(&lz, &lz_theta, 10, 3).unwrap().observations;
    check_sis_gradient(&lz, &Vector::<2>::new(0.6, 1.2), &y, 32, 1e-5);
    let lz = Lorenz63::<2, 1>::new(1.0, Vector::<3>::new(1.0, 1.0, 1.0), 1.0, ProposalPolicy::Ekf);
    check_sis_gradient(&lz, &Vector::<1>::new(0.6), &y, 32, 1e-5);
}

#[test]
fn single_particle_is_one_trajectory() {
    let m = Lgss::new(ProposalPolicy::Prior);
    let theta = Vector::<3>::new(0.5, 0.8, 1.1);
    let y = generate(&m, &theta, 20, 9).unwrap().observations;
    let bank = NoiseBank::new(2, 20, 1, 1);
    let cfg = FilterConfig::new(1);
    let out = run_filter(&m, &theta, &y, &cfg, &bank).unwrap();
    // replay the trajectory by hand
    let mut x = 0.0;
    let mut ll = 0.0;
    for (s, yt) in y.iter().enumerate() {
        x = 0.5 * x + 0.8 * bank.eps(s, 0)[0];
        let v = 1.1f64 * 1.1;
        ll += -0.5 * ((yt[0] - x).powi(2) / v + (2.0 * std::f64::consts::PI * v).ln());
    }
    assert!((out.loglik - ll).abs() < 1e-10);
    let fd = fd_grad(|t| run_filter(&m, t, &y, &cfg, &bank).unwrap().loglik, &theta);
    assert!(rel_err(&out.grad, &fd) < 1e-5);
}

#[test]
fn same_inputs_same_output_bitwise() {
    let m = Lgss::new(ProposalPolicy::Optimal);
    let theta = Vector::<3>::new(0.7, 1.2, 1.0);
    let y = generate(&m, &theta, 50, 1).unwrap().observations;
    let bank = NoiseBank::new(4, 50, 200, 1);
    for r in [
        Resampler::Crn,
        Resampler::Multinomial,
        Resampler::Soft { alpha: 0.5 },
        Resampler::Gumbel { lambda: 0.5 },
    ] {
        let cfg = FilterConfig::new(200).with_resampler(r);
        let a = run_filter(&m, &theta, &y, &cfg, &bank).unwrap();
        let b = run_filter(&m, &theta, &y, &cfg, &bank).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.loglik.to_bits(), b.loglik.to_bits());
        assert!(a.trace.iter().any(|s| s.resampled));
        assert!(a.trace.iter().all(|s| s.ess >= 1.0 - 1e-9 && s.ess <= 200.0 + 1e-9));
    }
}

#[test]
fn randomwalk_tracks_kalman_likelihood() {
    let m = RandomWalk::new(1.0, ProposalPolicy::Ekf);
    let y = generate(&m, &V1::new(2.0), 250, 5).unwrap().observations;
    let bank = NoiseBank::new(8, 250, 2000, 1);
    let cfg = FilterConfig::new(2000);
    for th in [1.0, 2.0, 3.5] {
        let pf = run_filter(&m, &V1::new(th), &y, &cfg, &bank).unwrap();
        let kf = kf_loglik(&m, &y, &V1::new(th)).unwrap();
        assert!(((pf.loglik - kf) / kf).abs() < 0.005, "θ={th}: {} vs {kf}", pf.loglik);
    }
}

#[test]
fn ekf_and_optimal_agree_on_linear_model() {
    let theta = Vector::<3>::new(0.7, 1.2, 1.0);
    let y = generate(&Lgss::new(ProposalPolicy::Prior), &theta, 40, 2)
        .unwrap()
        .observations;
    let bank = NoiseBank::new(3, 40, 10_000, 1);
    let cfg = FilterConfig::new(10_000);
    let a = run_filter(&Lgss::new(ProposalPolicy::Ekf), &theta, &y, &cfg, &bank).unwrap();
    let b = run_filter(&Lgss::new(ProposalPolicy::Optimal), &theta, &y, &cfg, &bank).unwrap();
    assert!((a.loglik - b.loglik).abs() < 1e-6, "{} vs {}", a.loglik, b.loglik);
}

#[test]
fn secant_matches_gradient_when_ancestry_is_shared() {
    let m = Lgss::new(ProposalPolicy::Optimal);
    let theta = Vector::<3>::new(0.7, 1.2, 1.0);
    let y = generate(&m, &theta, 50, 1).unwrap().observations;
    let bank = NoiseBank::new(6, 50, 100, 1);
    let cfg = FilterConfig::new(100);
    let h = 1e-7;
    let mut checked = 0;
    for i in 0..20 {
        let t0 = Vector::<3>::new(0.6 + 0.01 * i as f64, 1.1, 0.9);
        for k in 0..3 {
            let mut t1 = t0;
            t1[k] += h;
            let a = run_filter(&m, &t0, &y, &cfg, &bank).unwrap();
            let b = run_filter(&m, &t1, &y, &cfg, &bank).unwrap();
            if a.ancestry_fingerprint() != b.ancestry_fingerprint() {
                continue;
            }
            let secant = (b.loglik - a.loglik) / h;
            assert!(
                (secant - a.grad[k]).abs() <= 1e-3 * a.grad[k].abs().max(1.0),
                "{secant} vs {}",
                a.grad[k]
            );
            checked += 1;
        }
    }
    assert!(checked > 30);
}

#[test]
fn fisher_agrees_with_reparam_at_one_step_where_state_is_theta_free() {
    let m = Lgss::new(ProposalPolicy::Prior);
    let theta = Vector::<3>::new(0.7, 1.2, 1.0);
    let y = vec![V1::new(0.8)];
    let bank = NoiseBank::new(1, 1, 500, 1);
    let cfg = FilterConfig::new(500);
    let reparam = run_filter(&m, &theta, &y, &cfg, &bank).unwrap().grad;
    let fisher = fisher_gradient(&m, &theta, &y, &cfg, &bank).unwrap();
    assert!((reparam[2] - fisher[2]).abs() < 1e-12);
}

#[test]
fn fisher_gradient_is_consistent_with_kalman() {
    let m = Lgss::new(ProposalPolicy::Optimal);
    let theta = Vector::<3>::new(0.7, 1.2, 1.0);
    let y = generate(&m, &theta, 20, 12).unwrap().observations;
    let (_, exact) = kf_loglik_grad(&m, &y, &theta).unwrap();
    let cfg = FilterConfig::new(10_000).with_estimator(GradientEstimator::Fisher);
    let reps: Vec<Vec<f64>> = (0..20)
        .map(|r| {
            let bank = NoiseBank::new(100 + r, 20, 10_000, 1);
            run_filter(&m, &theta, &y, &cfg, &bank).unwrap().grad
        })
        .collect();
    for k in 0..3 {
        let xs: Vec<f64> = reps.iter().map(|g| g[k]).collect();
        let mean = xs.iter().sum::<f64>() / 20.0;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 19.0).sqrt();
        let se = sd / 20f64.sqrt();
        assert!(
            (mean - exact[k]).abs() < 3.0 * se.max(1e-3),
            "component {k}: {mean} ± {se} vs {}",
            exact[k]
        );
    }
}

/// A model in which nothing depends on θ.
struct Frozen;

impl StateSpaceModel<1, 1, 1> for Frozen {
    fn name(&self) -> &'static str {
        "frozen"
    }
    fn params(&self) -> Vec<ParamInfo> {
        vec![ParamInfo::new("unused", Constraint::Unconstrained, Prior::Normal { mean: 0.0, sd: 1.0 })]
    }
    fn policy(&self) -> ProposalPolicy {
        ProposalPolicy::Prior
    }
    fn initial(&self, _: &V1) -> Result<InitialSpec<1, 1>, ModelError> {
        Ok(InitialSpec::point(V1::zeros()))
    }
    fn transition(&self, x: &V1, _: &V1) -> Result<TransitionSpec<1, 1>, ModelError> {
        let mut s = GaussianSpec::zeros();
        s.mean = *x * 0.5;
        s.cov = Matrix::<1, 1>::new(1.0);
        s.dmean_dx = Matrix::<1, 1>::new(0.5);
        Ok(s)
    }
    fn observation(&self, x: &V1, _: &V1) -> Result<ObservationSpec<1, 1, 1>, ModelError> {
        let mut o = ObservationSpec::zeros();
        o.density.mean = *x;
        o.density.cov = Matrix::<1, 1>::new(1.0);
        o.density.dmean_dx = Matrix::<1, 1>::new(1.0);
        Ok(o)
    }
}

#[test]
fn theta_free_model_has_zero_gradients() {
    let y: Vec<V1> = (0..15).map(|t| V1::new((t as f64).sin())).collect();
    let bank = NoiseBank::new(3, 15, 50, 1);
    let cfg = FilterConfig::new(50);
    let r = run_filter(&Frozen, &V1::new(0.3), &y, &cfg, &bank).unwrap();
    assert_eq!(r.grad, vec![0.0]);
    assert!(r.trace.iter().any(|s| s.resampled));
    let f = fisher_gradient(&Frozen, &V1::new(0.3), &y, &cfg, &bank).unwrap();
    assert_eq!(f, vec![0.0]);
}

#[test]
fn bank_shape_is_checked() {
    let m = Lgss::new(ProposalPolicy::Prior);
    let y = vec![V1::new(0.0); 5];
    let bank = NoiseBank::new(1, 4, 10, 1);
    let r = run_filter(&m, &Vector::<3>::new(0.5, 1.0, 1.0), &y, &FilterConfig::new(10), &bank);
    assert!(matches!(r, Err(FilterError::BankMismatch { .. })));
}

#[test]
fn underflow_reports_time_index() {
    let m = Lgss::new(ProposalPolicy::Prior);
    let mut y = vec![V1::new(0.0); 6];
    y[3] = V1::new(1e200);
    let bank = NoiseBank::new(1, 6, 10, 1);
    let r = run_filter(&m, &Vector::<3>::new(0.5, 1.0, 1.0), &y, &FilterConfig::new(10), &bank);
    assert!(matches!(r, Err(FilterError::Underflow { t: 4 })), "{r:?}");
}

#[test]
fn summary_json_has_expected_keys() {
    let m = RandomWalk::new(1.0, ProposalPolicy::Prior);
    let y = vec![V1::new(0.1), V1::new(-0.4)];
    let bank = NoiseBank::new(1, 2, 8, 1);
    let out = run_filter(&m, &V1::new(1.0), &y, &FilterConfig::new(8), &bank).unwrap();
    let j = out.summary_json();
    for key in ["loglik", "grad", "ess_trace", "resample_flags"] {
        assert!(j.get(key).is_some());
    }
    assert!(out.ancestry_csv().starts_with("t,i,parent\n"));
}
