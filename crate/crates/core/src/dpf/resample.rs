//! Resampling schemes that keep the total unnormalised weight and the
//! weighted gradient sum unchanged.

use thiserror::Error;

use crate::gaussian::{Matrix, Vector};

use super::Particle;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ResampleError {
    #[error("all particle weights are zero or non-finite")]
    Degenerate,
    #[error("resampling uniform {0} lies outside (0, 1]")]
    UniformOutOfRange(f64),
    #[error("soft resampling mixture {0} lies outside [0, 1]")]
    BadAlpha(f64),
    #[error("Gumbel-softmax temperature must be positive, got {0}")]
    BadLambda(f64),
    #[error("expected {expected} random inputs, got {got}")]
    Shape { expected: usize, got: usize },
}

/// Normalised weights and the quantities every resampler preserves.
#[derive(Debug, Clone)]
pub struct WeightSummary<const NT: usize> {
    /// `log Σᵢ wᵢ`.
    pub log_total: f64,
    /// `w̃ᵢ = wᵢ / Σⱼ wⱼ`.
    pub normalized: Vec<f64>,
    /// `Σᵢ w̃ᵢ d log wᵢ/dθ`.
    pub mean_grad: Vector<NT>,
}

pub fn summarize<const NX: usize, const NT: usize>(
    particles: &[Particle<NX, NT>],
) -> Result<WeightSummary<NT>, ResampleError> {
    let max = particles
        .iter()
        .map(|p| p.logw)
        .filter(|l| !l.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(ResampleError::Degenerate);
    }
    let mut normalized: Vec<f64> = particles
        .iter()
        .map(|p| if p.logw.is_nan() { 0.0 } else { (p.logw - max).exp() })
        .collect();
    let sum: f64 = normalized.iter().sum();
    for w in &mut normalized {
        *w /= sum;
    }
    let mut mean_grad = Vector::<NT>::zeros();
    for (p, &w) in particles.iter().zip(&normalized) {
        if w > 0.0 {
            mean_grad += p.dlogw * w;
        }
    }
    Ok(WeightSummary {
        log_total: max + sum.ln(),
        normalized,
        mean_grad,
    })
}

/// Effective sample size `1 / Σ w̃ᵢ²` from unnormalised log-weights.
pub fn ess(logw: &[f64]) -> Result<f64, ResampleError> {
    let max = logw
        .iter()
        .copied()
        .filter(|l| !l.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(ResampleError::Degenerate);
    }
    let (s1, s2) = logw.iter().fold((0.0, 0.0), |(s1, s2), &l| {
        let w = if l.is_nan() { 0.0 } else { (l - max).exp() };
        (s1 + w, s2 + w * w)
    });
    Ok(s1 * s1 / s2)
}

fn check_uniforms(u: &[f64], n: usize) -> Result<(), ResampleError> {
    if u.len() != n {
        return Err(ResampleError::Shape {
            expected: n,
            got: u.len(),
        });
    }
    match u.iter().find(|&&v| !(v > 0.0 && v <= 1.0)) {
        Some(&bad) => Err(ResampleError::UniformOutOfRange(bad)),
        None => Ok(()),
    }
}

/// `κ(u) = #{j : u > cⱼ}` over the cumulative sums of `probs`, clamped to the
/// last index with positive probability.
fn select(probs: &[f64], u: &[f64]) -> Vec<u32> {
    let mut cumulative = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for &p in probs {
        acc += p;
        cumulative.push(acc);
    }
    let last = probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    u.iter()
        .map(|&ui| cumulative.partition_point(|&c| c < ui).min(last) as u32)
        .collect()
}

fn reset_weights<const NX: usize, const NT: usize>(
    out: &mut [Particle<NX, NT>],
    summary: &WeightSummary<NT>,
) {
    let logw = summary.log_total - (out.len() as f64).ln();
    for p in out {
        p.logw = logw;
        p.dlogw = summary.mean_grad;
    }
}

/// Multinomial resampling driven by the supplied uniforms `u ∈ (0, 1]`.
///
/// Offspring inherit their parent's state, state sensitivity and score
/// accumulator; every offspring gets log-weight `log(W/N)` and gradient
/// `Σⱼ w̃ⱼ d log wⱼ/dθ`. Returns the parent index of each offspring.
pub fn resample_crn<const NX: usize, const NT: usize>(
    particles: &mut Vec<Particle<NX, NT>>,
    u: &[f64],
) -> Result<Vec<u32>, ResampleError> {
    check_uniforms(u, particles.len())?;
    let summary = summarize(particles)?;
    let ancestry = select(&summary.normalized, u);
    let mut out: Vec<_> = ancestry.iter().map(|&k| particles[k as usize]).collect();
    reset_weights(&mut out, &summary);
    *particles = out;
    Ok(ancestry)
}

/// Draws parents from `q ∝ αw̃ + (1-α)/N` and reweights offspring by
/// `w̃/q` so that the total weight is preserved.
pub fn resample_soft<const NX: usize, const NT: usize>(
    particles: &mut Vec<Particle<NX, NT>>,
    u: &[f64],
    alpha: f64,
) -> Result<Vec<u32>, ResampleError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ResampleError::BadAlpha(alpha));
    }
    let n = particles.len();
    check_uniforms(u, n)?;
    let summary = summarize(particles)?;
    let uniform = (1.0 - alpha) / n as f64;
    let q: Vec<f64> = summary
        .normalized
        .iter()
        .map(|&w| alpha * w + uniform)
        .collect();
    let ancestry = select(&q, u);

    let mut out: Vec<_> = ancestry.iter().map(|&k| particles[k as usize]).collect();
    let mut log_ratio = Vec::with_capacity(n);
    let mut dlog_ratio = Vec::with_capacity(n);
    for &k in &ancestry {
        let k = k as usize;
        let w = summary.normalized[k];
        log_ratio.push(w.ln() - q[k].ln());
        // d log(w̃/q) = d log w̃ · (1-α)/(N q)
        let dlog_w = particles[k].dlogw - summary.mean_grad;
        dlog_ratio.push(dlog_w * (uniform / q[k]));
    }
    let max = log_ratio.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ratios: Vec<f64> = log_ratio.iter().map(|l| (l - max).exp()).collect();
    let ratio_sum: f64 = ratios.iter().sum();
    let mut dmean = Vector::<NT>::zeros();
    for (r, d) in ratios.iter().zip(&dlog_ratio) {
        dmean += d * (r / ratio_sum);
    }
    let log_norm = max + ratio_sum.ln();
    for ((p, l), d) in out.iter_mut().zip(&log_ratio).zip(&dlog_ratio) {
        p.logw = summary.log_total + l - log_norm;
        p.dlogw = summary.mean_grad + d - dmean;
    }
    *particles = out;
    Ok(ancestry)
}

/// Relaxed resampling: offspring `i` is the convex mixture `Σⱼ zᵢⱼ xⱼ` with
/// `zᵢ = softmax((Gᵢ + log w̃)/λ)`.
///
/// State sensitivities flow through both the mixed states and `z`. Score
/// accumulators are mixed with the same `z` without differentiating it.
/// Weights reset as in [`resample_crn`]; the reported ancestry is `argmaxⱼ zᵢⱼ`.
pub fn resample_gumbel<const NX: usize, const NT: usize>(
    particles: &mut Vec<Particle<NX, NT>>,
    gumbels: &[f64],
    lambda: f64,
) -> Result<Vec<u32>, ResampleError> {
    if !(lambda > 0.0) {
        return Err(ResampleError::BadLambda(lambda));
    }
    let n = particles.len();
    if gumbels.len() != n * n {
        return Err(ResampleError::Shape {
            expected: n * n,
            got: gumbels.len(),
        });
    }
    let summary = summarize(particles)?;
    let log_w: Vec<f64> = summary.normalized.iter().map(|w| w.ln()).collect();
    let dlog_w: Vec<Vector<NT>> = particles
        .iter()
        .map(|p| p.dlogw - summary.mean_grad)
        .collect();

    let mut out = Vec::with_capacity(n);
    let mut ancestry = Vec::with_capacity(n);
    let mut z = vec![0.0; n];
    for i in 0..n {
        let row = &gumbels[i * n..(i + 1) * n];
        let mut best = (f64::NEG_INFINITY, 0usize);
        for j in 0..n {
            z[j] = (row[j] + log_w[j]) / lambda;
            if z[j] > best.0 {
                best = (z[j], j);
            }
        }
        let mut sum = 0.0;
        for v in z.iter_mut() {
            *v = (*v - best.0).exp();
            sum += *v;
        }
        let mut zbar = Vector::<NT>::zeros();
        for (v, d) in z.iter_mut().zip(&dlog_w) {
            *v /= sum;
            if *v > 0.0 {
                zbar += d * *v;
            }
        }
        let mut x = Vector::<NX>::zeros();
        let mut dx = Matrix::<NX, NT>::zeros();
        let mut alpha = Vector::<NT>::zeros();
        for j in 0..n {
            let zj = z[j];
            if zj == 0.0 {
                continue;
            }
            let pj = &particles[j];
            x += pj.x * zj;
            dx += pj.dx * zj;
            alpha += pj.alpha * zj;
            // dzᵢⱼ/dθ = zᵢⱼ (d log w̃ⱼ - Σₖ zᵢₖ d log w̃ₖ) / λ
            let dz = (dlog_w[j] - zbar) * (zj / lambda);
            dx += pj.x * dz.transpose();
        }
        out.push(Particle {
            x,
            dx,
            logw: 0.0,
            dlogw: Vector::zeros(),
            alpha,
        });
        ancestry.push(best.1 as u32);
    }
    reset_weights(&mut out, &summary);
    *particles = out;
    Ok(ancestry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    type P = Particle<1, 1>;

    fn particles(logw: &[f64]) -> Vec<P> {
        logw.iter()
            .enumerate()
            .map(|(i, &l)| Particle {
                x: Vector::<1>::new(i as f64),
                dx: Matrix::<1, 1>::new(0.1 * i as f64),
                logw: l,
                dlogw: Vector::<1>::new(1.0 - 0.5 * i as f64),
                alpha: Vector::<1>::new(i as f64),
            })
            .collect()
    }

    #[test]
    fn ess_examples() {
        assert!((ess(&[0.0; 7]).unwrap() - 7.0).abs() < 1e-12);
        assert!((ess(&[0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap() - 1.0).abs() < 1e-15);
        let l = [0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()];
        assert!((ess(&l).unwrap() - 8.0 / 3.0).abs() < 1e-12);
        assert!(ess(&[f64::NEG_INFINITY; 3]).is_err());
    }

    #[test]
    fn crn_examples() {
        let mut p = particles(&[0.0, f64::NEG_INFINITY]);
        assert_eq!(resample_crn(&mut p, &[0.3, 1.0]).unwrap(), vec![0, 0]);
        let mut p = particles(&[0.0; 3]);
        assert_eq!(resample_crn(&mut p, &[0.1, 0.5, 0.9]).unwrap(), vec![0, 1, 2]);
        assert!(resample_crn(&mut particles(&[0.0; 2]), &[0.0, 0.5]).is_err());
        assert!(resample_crn(&mut particles(&[0.0; 2]), &[0.5, 1.5]).is_err());
    }

    #[test]
    fn crn_copies_parent_sensitivity() {
        let mut p = particles(&[-3.0, 0.0, -1.0]);
        let before = p.clone();
        let anc = resample_crn(&mut p, &[0.9, 0.2, 0.6]).unwrap();
        for (child, &k) in p.iter().zip(&anc) {
            assert_eq!(child.x, before[k as usize].x);
            assert_eq!(child.dx, before[k as usize].dx);
            assert_eq!(child.alpha, before[k as usize].alpha);
        }
    }

    #[test]
    fn soft_examples() {
        // α = 0.5, w̃ = [0.8, 0.2] → q = [0.65, 0.35]; relative weights w̃/q
        let lw = [0.8f64.ln(), 0.2f64.ln()];
        let mut p = particles(&lw);
        let anc = resample_soft(&mut p, &[0.6, 0.7], 0.5).unwrap();
        assert_eq!(anc, vec![0, 1]);
        let ratio = (p[0].logw - p[1].logw).exp();
        assert!((ratio - (0.8 / 0.65) / (0.2 / 0.35)).abs() < 1e-12);

        // α = 0: uniform parent draw, weights ∝ w̃
        let mut p = particles(&lw);
        let anc = resample_soft(&mut p, &[0.4, 0.9], 0.0).unwrap();
        assert_eq!(anc, vec![0, 1]);
        assert!(((p[0].logw - p[1].logw).exp() - 4.0).abs() < 1e-12);
        assert!(resample_soft(&mut particles(&lw), &[0.4, 0.9], 1.5).is_err());
    }

    #[test]
    fn gumbel_examples() {
        // equal weights and identical Gumbel rows → uniform mixture
        let mut p = particles(&[0.0; 4]);
        let g = vec![0.3; 16];
        resample_gumbel(&mut p, &g, 0.5).unwrap();
        for c in &p {
            assert!((c.x[0] - 1.5).abs() < 1e-14);
        }
        // direct softmax evaluation for N = 2
        let lw = [0.7f64.ln(), 0.3f64.ln()];
        let mut p = particles(&lw);
        let g = [0.2, -0.1, 1.0, 0.4];
        resample_gumbel(&mut p, &g, 0.5).unwrap();
        for i in 0..2 {
            let s0 = ((g[2 * i] + 0.7f64.ln()) / 0.5).exp();
            let s1 = ((g[2 * i + 1] + 0.3f64.ln()) / 0.5).exp();
            let z1 = s1 / (s0 + s1);
            assert!((p[i].x[0] - z1).abs() < 1e-12);
        }
        // λ → 0 gives the hard argmax
        let mut p = particles(&lw);
        let anc = resample_gumbel(&mut p, &g, 1e-6).unwrap();
        assert_eq!(anc, vec![0, 0]);
        assert_eq!(p[1].x[0], 0.0);
        assert!(resample_gumbel(&mut particles(&lw), &g, 0.0).is_err());
    }

    #[test]
    fn gumbel_gradient_matches_fd() {
        // one particle set whose log-weights move linearly in θ
        let base = [0.2, -0.5, 0.1];
        let slope = [0.3, -1.0, 0.6];
        let g = [0.4, -0.2, 0.9, 0.0, 1.1, -0.7, 0.3, 0.3, -0.1];
        let build = |th: f64| -> Vec<P> {
            (0..3)
                .map(|i| Particle {
                    x: Vector::<1>::new(1.0 + i as f64 + 0.5 * th * i as f64),
                    dx: Matrix::<1, 1>::new(0.5 * i as f64),
                    logw: base[i] + slope[i] * th,
                    dlogw: Vector::<1>::new(slope[i]),
                    alpha: Vector::zeros(),
                })
                .collect()
        };
        let th = 0.3;
        let mut p = build(th);
        resample_gumbel(&mut p, &g, 0.7).unwrap();
        let h = 1e-6;
        let mut pp = build(th + h);
        let mut pm = build(th - h);
        resample_gumbel(&mut pp, &g, 0.7).unwrap();
        resample_gumbel(&mut pm, &g, 0.7).unwrap();
        for i in 0..3 {
            let fd = (pp[i].x[0] - pm[i].x[0]) / (2.0 * h);
            assert!((p[i].dx[(0, 0)] - fd).abs() < 1e-6, "{} vs {fd}", p[i].dx[(0, 0)]);
        }
    }

    fn check_conservation(before: &[Particle<2, 2>], after: &[Particle<2, 2>]) {
        let total = |ps: &[Particle<2, 2>]| ps.iter().map(|p| p.logw.exp()).sum::<f64>();
        let gsum = |ps: &[Particle<2, 2>]| {
            ps.iter()
                .fold(Vector::<2>::zeros(), |a, p| a + p.dlogw * p.logw.exp())
        };
        let (t0, t1) = (total(before), total(after));
        assert!((t0 - t1).abs() <= 1e-12 * t0, "{t0} vs {t1}");
        let (g0, g1) = (gsum(before), gsum(after));
        assert!((g0 - g1).amax() <= 1e-12 * g0.amax().max(t0), "{g0} vs {g1}");
    }

    fn arb_particles() -> impl Strategy<Value = (Vec<Particle<2, 2>>, Vec<f64>, Vec<f64>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(
                    (-5.0..2.0f64, -3.0..3.0f64, -3.0..3.0f64, -2.0..2.0f64),
                    n,
                ),
                prop::collection::vec(1e-9..=1.0f64, n),
                prop::collection::vec(-2.0..4.0f64, n * n),
            )
                .prop_map(|(raw, u, g)| {
                    let ps = raw
                        .into_iter()
                        .map(|(l, a, b, x)| Particle {
                            x: Vector::<2>::new(x, -x),
                            dx: Matrix::<2, 2>::new(a, b, b, a),
                            logw: l,
                            dlogw: Vector::<2>::new(a, b),
                            alpha: Vector::<2>::new(b, a),
                        })
                        .collect();
                    (ps, u, g)
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn all_schemes_conserve((ps, u, g) in arb_particles(), alpha in 0.0..=1.0f64, lambda in 0.05..2.0f64) {
            let n = ps.len();
            let mut a = ps.clone();
            resample_crn(&mut a, &u).unwrap();
            check_conservation(&ps, &a);
            let mut b = ps.clone();
            resample_soft(&mut b, &u, alpha).unwrap();
            check_conservation(&ps, &b);
            let mut c = ps.clone();
            resample_gumbel(&mut c, &g, lambda).unwrap();
            check_conservation(&ps, &c);
            for set in [&a, &c] {
                let s = summarize(set).unwrap();
                prop_assert!(s.normalized.iter().all(|&w| w == 1.0 / n as f64));
            }
        }

        #[test]
        fn soft_with_alpha_one_is_crn((ps, u, _g) in arb_particles()) {
            let mut a = ps.clone();
            let mut b = ps.clone();
            let ka = resample_crn(&mut a, &u).unwrap();
            let kb = resample_soft(&mut b, &u, 1.0).unwrap();
            prop_assert_eq!(ka, kb);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn ess_within_bounds(l in prop::collection::vec(-30.0..5.0f64, 1..100)) {
            let e = ess(&l).unwrap();
            prop_assert!(e >= 1.0 - 1e-12 && e <= l.len() as f64 + 1e-9);
        }
    }
}
