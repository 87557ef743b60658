//! Small dense Gaussian calculus.
//!
//! Everything here works on statically sized `nalgebra` matrices: state,
//! observation and parameter dimensions are at most three or four in every
//! model this crate ships, so the filter's inner loop never touches the heap.
//!
//! Derivative convention: a *partial* derivative `∂f/∂θ` moves only that
//! argument of `f`; a *total* derivative `df/dθ` also moves every argument that
//! itself depends on `θ`. For `f(x(θ), θ)` the two are linked by
//! [`total_derivative`]: `df/dθ = ∂f/∂x · dx/dθ + ∂f/∂θ`.

use nalgebra::{SMatrix, SVector};
use thiserror::Error;

pub type Vector<const N: usize> = SVector<f64, N>;
pub type Matrix<const R: usize, const C: usize> = SMatrix<f64, R, C>;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Relative asymmetry tolerated before a covariance is rejected.
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("{what} is not symmetric positive definite")]
    NotPositiveDefinite { what: &'static str },
    #[error("{what} is not symmetric")]
    NotSymmetric { what: &'static str },
    #[error("{what} is singular")]
    Singular { what: &'static str },
    #[error("{what} contains non-finite entries")]
    NonFinite { what: &'static str },
}

/// Checks that `m` is finite and symmetric to [`SYMMETRY_TOL`] relative.
pub fn check_symmetric<const D: usize>(
    m: &Matrix<D, D>,
    what: &'static str,
) -> Result<(), LinalgError> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(LinalgError::NonFinite { what });
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    for i in 0..D {
        for j in (i + 1)..D {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(LinalgError::NotSymmetric { what });
            }
        }
    }
    Ok(())
}

/// Cholesky-backed view of a covariance used to evaluate Gaussian densities.
#[derive(Debug, Clone)]
pub struct GaussianFactor<const D: usize> {
    inverse: Matrix<D, D>,
    log_det: f64,
}

impl<const D: usize> GaussianFactor<D> {
    pub fn new(cov: &Matrix<D, D>, what: &'static str) -> Result<Self, LinalgError> {
        check_symmetric(cov, what)?;
        let chol = cov
            .cholesky()
            .ok_or(LinalgError::NotPositiveDefinite { what })?;
        let l = chol.l_dirty();
        let mut log_det = 0.0;
        for i in 0..D {
            log_det += 2.0 * l[(i, i)].ln();
        }
        if !log_det.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { what });
        }
        Ok(Self {
            inverse: chol.inverse(),
            log_det,
        })
    }

    pub fn inverse(&self) -> &Matrix<D, D> {
        &self.inverse
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `log N(x; mu, C)`.
    pub fn log_pdf(&self, x: &Vector<D>, mu: &Vector<D>) -> f64 {
        let r = x - mu;
        let maha = r.dot(&(self.inverse * r));
        -0.5 * maha - 0.5 * (self.log_det + D as f64 * LN_2PI)
    }

    /// Partials of `log N(x; mu, C)` with respect to `x`, `mu` and `C`.
    pub fn dlog_pdf(&self, x: &Vector<D>, mu: &Vector<D>) -> NormalPartials<D> {
        let r = x - mu;
        let cr = self.inverse * r;
        let dc = -0.5 * (self.inverse - cr * cr.transpose());
        NormalPartials {
            dx: -cr,
            dmu: cr,
            dcov: dc,
        }
    }
}

/// Partial derivatives of a multivariate normal log-density.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalPartials<const D: usize> {
    pub dx: Vector<D>,
    pub dmu: Vector<D>,
    pub dcov: Matrix<D, D>,
}

/// `log N(x; mu, C) = -½(x-μ)ᵀC⁻¹(x-μ) - ½log|2πC|`.
pub fn log_normal<const D: usize>(
    x: &Vector<D>,
    mu: &Vector<D>,
    cov: &Matrix<D, D>,
) -> Result<f64, LinalgError> {
    Ok(GaussianFactor::new(cov, "covariance")?.log_pdf(x, mu))
}

/// Returns `(∂/∂x, ∂/∂μ, ∂/∂C)` of `log N(x; μ, C)`:
/// `-C⁻¹(x-μ)`, `C⁻¹(x-μ)` and `-½(C⁻¹ - C⁻¹(x-μ)(x-μ)ᵀC⁻¹)`.
///
/// `∂/∂C` treats every entry of `C` as free; contract it with a symmetric
/// perturbation `dC` through the Frobenius product ([`frobenius`]).
pub fn dlog_normal<const D: usize>(
    x: &Vector<D>,
    mu: &Vector<D>,
    cov: &Matrix<D, D>,
) -> Result<NormalPartials<D>, LinalgError> {
    Ok(GaussianFactor::new(cov, "covariance")?.dlog_pdf(x, mu))
}

/// `Σᵢⱼ aᵢⱼ bᵢⱼ`.
pub fn frobenius<const R: usize, const C: usize>(a: &Matrix<R, C>, b: &Matrix<R, C>) -> f64 {
    a.component_mul(b).sum()
}

/// Derivative of `U⁻¹` along one parameter slice: `-U⁻¹ dU U⁻¹`.
pub fn inv_derivative<const D: usize>(
    u: &Matrix<D, D>,
    du: &Matrix<D, D>,
) -> Result<Matrix<D, D>, LinalgError> {
    let inv = u
        .try_inverse()
        .ok_or(LinalgError::Singular { what: "matrix to invert" })?;
    Ok(-inv * du * inv)
}

/// Same as [`inv_derivative`] when `U⁻¹` is already available.
pub fn inv_derivative_with<const D: usize>(
    u_inv: &Matrix<D, D>,
    du: &Matrix<D, D>,
) -> Matrix<D, D> {
    -u_inv * du * u_inv
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(values, vectors)` with `m = V diag(values) Vᵀ`; eigenvectors are
/// the columns of `V`.
pub fn symmetric_eigen<const D: usize>(m: &Matrix<D, D>) -> (Vector<D>, Matrix<D, D>) {
    let mut a = *m;
    let mut v = Matrix::<D, D>::identity();
    let scale = a.iter().map(|x| x * x).sum::<f64>();
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..D {
            for q in (p + 1)..D {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off <= 1e-32 * scale || off == 0.0 {
            break;
        }
        for p in 0..D {
            for q in (p + 1)..D {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..D {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..D {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..D {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    (a.diagonal(), v)
}

/// Principal square root `A` of an SPD matrix together with the eigenbasis
/// needed to differentiate it.
#[derive(Debug, Clone)]
pub struct SqrtFactor<const D: usize> {
    vectors: Matrix<D, D>,
    roots: Vector<D>,
    sqrt: Matrix<D, D>,
}

impl<const D: usize> SqrtFactor<D> {
    pub fn new(c: &Matrix<D, D>, what: &'static str) -> Result<Self, LinalgError> {
        check_symmetric(c, what)?;
        let (values, vectors) = symmetric_eigen(c);
        if values.iter().any(|&l| !(l > 0.0)) {
            return Err(LinalgError::NotPositiveDefinite { what });
        }
        let roots = values.map(f64::sqrt);
        let sqrt = vectors * Matrix::from_diagonal(&roots) * vectors.transpose();
        Ok(Self {
            vectors,
            roots,
            sqrt: 0.5 * (sqrt + sqrt.transpose()),
        })
    }

    /// Builds the factor from an existing symmetric positive definite root.
    pub fn from_root(a: &Matrix<D, D>) -> Result<Self, LinalgError> {
        check_symmetric(a, "square root")?;
        let (roots, vectors) = symmetric_eigen(a);
        if roots.iter().any(|&s| !(s > 0.0)) {
            return Err(LinalgError::Singular { what: "square root" });
        }
        Ok(Self {
            vectors,
            roots,
            sqrt: *a,
        })
    }

    pub fn sqrt(&self) -> &Matrix<D, D> {
        &self.sqrt
    }

    /// `dA` solving `A dA + dA A = dC`.
    ///
    /// In the eigenbasis of `A` the solution is elementwise:
    /// `(VᵀdA V)ᵢⱼ = (VᵀdC V)ᵢⱼ / (sᵢ + sⱼ)`. When `dC` commutes with `A` this
    /// is exactly `½A⁻¹dC`.
    pub fn derivative(&self, dc: &Matrix<D, D>) -> Matrix<D, D> {
        if D == 1 {
            return dc / (2.0 * self.roots[0]);
        }
        let mut rotated = self.vectors.transpose() * dc * self.vectors;
        for i in 0..D {
            for j in 0..D {
                rotated[(i, j)] /= self.roots[i] + self.roots[j];
            }
        }
        self.vectors * rotated * self.vectors.transpose()
    }
}

/// Principal symmetric square root of an SPD matrix.
pub fn spd_sqrt<const D: usize>(c: &Matrix<D, D>) -> Result<Matrix<D, D>, LinalgError> {
    Ok(*SqrtFactor::new(c, "covariance")?.sqrt())
}

/// Derivative of the principal square root `A` of `C = AA` along `dC`.
///
/// Solves the Sylvester equation `A dA + dA A = dC`, which is the exact
/// derivative for any symmetric `dC`. The commuting special case
/// `½A⁻¹dC` is available as [`sqrtm_derivative_commuting`].
pub fn sqrtm_derivative<const D: usize>(
    a: &Matrix<D, D>,
    dc: &Matrix<D, D>,
) -> Result<Matrix<D, D>, LinalgError> {
    Ok(SqrtFactor::from_root(a)?.derivative(dc))
}

/// `½A⁻¹dC`; exact only when `dC` commutes with `A`.
pub fn sqrtm_derivative_commuting<const D: usize>(
    a: &Matrix<D, D>,
    dc: &Matrix<D, D>,
) -> Result<Matrix<D, D>, LinalgError> {
    let inv = a
        .try_inverse()
        .ok_or(LinalgError::Singular { what: "square root" })?;
    Ok(0.5 * inv * dc)
}

/// `df/dθ = ∂f/∂x · dx/dθ + ∂f/∂θ`.
pub fn total_derivative<const R: usize, const NX: usize, const NT: usize>(
    partial_x: &Matrix<R, NX>,
    dx_dtheta: &Matrix<NX, NT>,
    partial_theta: &Matrix<R, NT>,
) -> Matrix<R, NT> {
    partial_x * dx_dtheta + partial_theta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tolerances::{FD_STEP, GRAD_REL_TOL};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
    }

    fn random_spd<const D: usize>(rng: &mut impl Rng) -> Matrix<D, D> {
        let b = Matrix::<D, D>::from_fn(|_, _| rng.random_range(-1.0..1.0));
        b * b.transpose() + Matrix::<D, D>::identity() * 0.5
    }

    #[test]
    fn log_normal_scalar_values() {
        let z = Vector::<1>::new(0.0);
        let one = Matrix::<1, 1>::new(1.0);
        assert!((log_normal(&z, &z, &one).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);
        let x = Vector::<1>::new(1.0);
        assert!((log_normal(&x, &z, &one).unwrap() + 1.418_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn log_normal_diagonal_is_product_of_marginals() {
        let x = Vector::<2>::new(1.0, 2.0);
        let mu = Vector::<2>::zeros();
        let c = Matrix::<2, 2>::new(2.0, 0.0, 0.0, 3.0);
        let uni = |v: f64, var: f64| -0.5 * v * v / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln();
        let expected = uni(1.0, 2.0) + uni(2.0, 3.0);
        assert!((log_normal(&x, &mu, &c).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn non_spd_covariance_is_rejected() {
        let x = Vector::<2>::zeros();
        let c = Matrix::<2, 2>::new(1.0, 2.0, 2.0, 1.0);
        assert_eq!(
            log_normal(&x, &x, &c),
            Err(LinalgError::NotPositiveDefinite { what: "covariance" })
        );
        let asym = Matrix::<2, 2>::new(1.0, 0.5, 0.0, 1.0);
        assert!(matches!(
            log_normal(&x, &x, &asym),
            Err(LinalgError::NotSymmetric { .. })
        ));
    }

    #[test]
    fn dlog_normal_at_mean() {
        let mu = Vector::<2>::new(0.3, -1.0);
        let c = Matrix::<2, 2>::new(2.0, 0.4, 0.4, 1.0);
        let p = dlog_normal(&mu, &mu, &c).unwrap();
        assert_eq!(p.dx, Vector::<2>::zeros());
        assert_eq!(p.dmu, Vector::<2>::zeros());
        let expected = -0.5 * c.try_inverse().unwrap();
        assert!((p.dcov - expected).amax() < 1e-14);
    }

    #[test]
    fn dlog_normal_unit_scalar() {
        let p = dlog_normal(
            &Vector::<1>::new(1.0),
            &Vector::<1>::new(0.0),
            &Matrix::<1, 1>::new(1.0),
        )
        .unwrap();
        assert_eq!(p.dx[0], -1.0);
        assert_eq!(p.dmu[0], 1.0);
        assert_eq!(p.dcov[(0, 0)], 0.0);
    }

    fn check_dlog_normal_fd<const D: usize>(x: Vector<D>, mu: Vector<D>, c: Matrix<D, D>) {
        let p = dlog_normal(&x, &mu, &c).unwrap();
        let f = |x: &Vector<D>, mu: &Vector<D>, c: &Matrix<D, D>| log_normal(x, mu, c).unwrap();
        for k in 0..D {
            let mut e = Vector::<D>::zeros();
            e[k] = FD_STEP;
            let fd_x = (f(&(x + e), &mu, &c) - f(&(x - e), &mu, &c)) / (2.0 * FD_STEP);
            let fd_mu = (f(&x, &(mu + e), &c) - f(&x, &(mu - e), &c)) / (2.0 * FD_STEP);
            assert!(close(p.dx[k], fd_x, GRAD_REL_TOL), "dx[{k}] {} vs {}", p.dx[k], fd_x);
            assert!(close(p.dmu[k], fd_mu, GRAD_REL_TOL), "dmu[{k}]");
        }
        for i in 0..D {
            for j in i..D {
                // symmetric perturbation of the (i, j) and (j, i) entries
                let mut e = Matrix::<D, D>::zeros();
                e[(i, j)] = FD_STEP;
                e[(j, i)] = FD_STEP;
                let fd = (f(&x, &mu, &(c + e)) - f(&x, &mu, &(c - e))) / (2.0 * FD_STEP);
                let mut dir = Matrix::<D, D>::zeros();
                dir[(i, j)] = 1.0;
                dir[(j, i)] = 1.0;
                let analytic = frobenius(&p.dcov, &dir);
                assert!(close(analytic, fd, GRAD_REL_TOL), "dC[{i},{j}] {analytic} vs {fd}");
            }
        }
        assert!((p.dcov - p.dcov.transpose()).amax() < 1e-12);
    }

    #[test]
    fn dlog_normal_matches_finite_differences_3d() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = random_spd::<3>(&mut rng);
        let x = Vector::<3>::from_fn(|_, _| rng.random_range(-2.0..2.0));
        let mu = Vector::<3>::from_fn(|_, _| rng.random_range(-2.0..2.0));
        check_dlog_normal_fd(x, mu, c);
    }

    #[test]
    fn inv_derivative_examples() {
        let d = Matrix::<2, 2>::new(1.0, 2.0, 3.0, 4.0);
        assert_eq!(inv_derivative(&Matrix::<2, 2>::identity(), &d).unwrap(), -d);
        let u = Matrix::<2, 2>::identity() * 2.0;
        let r = inv_derivative(&u, &Matrix::<2, 2>::identity()).unwrap();
        assert!((r + Matrix::<2, 2>::identity() * 0.25).amax() < 1e-15);
        assert!(inv_derivative(&Matrix::<2, 2>::zeros(), &d).is_err());
    }

    #[test]
    fn sqrtm_derivative_examples() {
        let d = Matrix::<2, 2>::new(1.0, 0.3, 0.3, 2.0);
        let r = sqrtm_derivative(&Matrix::<2, 2>::identity(), &d).unwrap();
        assert!((r - d * 0.5).amax() < 1e-15);
        let r = sqrtm_derivative(&Matrix::<1, 1>::new(3.0), &Matrix::<1, 1>::new(6.0)).unwrap();
        assert!((r[(0, 0)] - 1.0).abs() < 1e-15);
        assert!(sqrtm_derivative(&Matrix::<1, 1>::new(0.0), &Matrix::<1, 1>::new(1.0)).is_err());
    }

    #[test]
    fn sqrtm_derivative_reduces_to_half_inverse_when_commuting() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_spd::<3>(&mut rng);
        let a = spd_sqrt(&c).unwrap();
        // any polynomial in C commutes with A
        let dc = c * 0.7 + c * c * 0.1;
        let exact = sqrtm_derivative(&a, &dc).unwrap();
        let commuting = sqrtm_derivative_commuting(&a, &dc).unwrap();
        assert!((exact - commuting).amax() < 1e-10);
    }

    #[test]
    fn spd_sqrt_examples() {
        let c = Matrix::<2, 2>::new(4.0, 0.0, 0.0, 9.0);
        let a = spd_sqrt(&c).unwrap();
        assert!((a - Matrix::<2, 2>::new(2.0, 0.0, 0.0, 3.0)).amax() < 1e-15);
        let i3 = Matrix::<3, 3>::identity();
        assert_eq!(spd_sqrt(&i3).unwrap(), i3);
        assert!(spd_sqrt(&Matrix::<2, 2>::new(1.0, 2.0, 2.0, 1.0)).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = random_spd::<3>(&mut rng);
        let a = spd_sqrt(&c).unwrap();
        assert!((a * a - c).amax() <= 1e-10 * c.amax());
    }

    #[test]
    fn total_derivative_matches_fd_of_composition() {
        // g(θ) = f(x(θ), θ) with x(θ) = (θ₀², sin θ₁), f(x, θ) = (x₀x₁ + θ₀, exp(x₀) θ₁)
        let x_of = |t: &Vector<2>| Vector::<2>::new(t[0] * t[0], t[1].sin());
        let f = |x: &Vector<2>, t: &Vector<2>| Vector::<2>::new(x[0] * x[1] + t[0], x[0].exp() * t[1]);
        let t = Vector::<2>::new(0.4, 1.3);
        let x = x_of(&t);
        let dx_dt = Matrix::<2, 2>::new(2.0 * t[0], 0.0, 0.0, t[1].cos());
        let fx = Matrix::<2, 2>::new(x[1], x[0], x[0].exp() * t[1], 0.0);
        let ft = Matrix::<2, 2>::new(1.0, 0.0, 0.0, x[0].exp());
        let total = total_derivative(&fx, &dx_dt, &ft);
        for r in 0..2 {
            let mut e = Vector::<2>::zeros();
            e[r] = FD_STEP;
            let fd = (f(&x_of(&(t + e)), &(t + e)) - f(&x_of(&(t - e)), &(t - e))) / (2.0 * FD_STEP);
            for i in 0..2 {
                assert!(close(total[(i, r)], fd[i], GRAD_REL_TOL));
            }
        }
    }

    fn inverse_fd_check<const D: usize>(u: Matrix<D, D>, du: Matrix<D, D>) -> Result<(), TestCaseError> {
        let h = FD_STEP;
        let plus = (u + du * h).try_inverse().unwrap();
        let minus = (u - du * h).try_inverse().unwrap();
        let fd = (plus - minus) / (2.0 * h);
        let analytic = inv_derivative(&u, &du).unwrap();
        let scale = analytic.amax().max(1.0);
        prop_assert!((analytic - fd).amax() <= 1e-6 * scale);
        Ok(())
    }

    fn sqrt_fd_check<const D: usize>(c: Matrix<D, D>, dc: Matrix<D, D>) -> Result<(), TestCaseError> {
        let h = FD_STEP;
        let a = spd_sqrt(&c).unwrap();
        let plus = spd_sqrt(&(c + dc * h)).unwrap();
        let minus = spd_sqrt(&(c - dc * h)).unwrap();
        let fd = (plus - minus) / (2.0 * h);
        let analytic = sqrtm_derivative(&a, &dc).unwrap();
        let scale = analytic.amax().max(1.0);
        prop_assert!((analytic - fd).amax() <= 1e-5 * scale, "{analytic} vs {fd}");
        Ok(())
    }

    fn instance<const D: usize>(seed: u64) -> (Matrix<D, D>, Matrix<D, D>, Vector<D>, Vector<D>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_spd::<D>(&mut rng);
        let raw = Matrix::<D, D>::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let dc = raw + raw.transpose();
        let x = Vector::<D>::from_fn(|_, _| rng.random_range(-2.0..2.0));
        let mu = Vector::<D>::from_fn(|_, _| rng.random_range(-2.0..2.0));
        (c, dc, x, mu)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn matrix_derivatives_match_fd(seed in any::<u64>(), dim in 1usize..=4) {
            match dim {
                1 => { let (c, dc, _, _) = instance::<1>(seed); inverse_fd_check(c, dc)?; sqrt_fd_check(c, dc)?; }
                2 => { let (c, dc, _, _) = instance::<2>(seed); inverse_fd_check(c, dc)?; sqrt_fd_check(c, dc)?; }
                3 => { let (c, dc, _, _) = instance::<3>(seed); inverse_fd_check(c, dc)?; sqrt_fd_check(c, dc)?; }
                _ => { let (c, dc, _, _) = instance::<4>(seed); inverse_fd_check(c, dc)?; sqrt_fd_check(c, dc)?; }
            }
        }

        #[test]
        fn dlog_normal_matches_fd(seed in any::<u64>()) {
            let (c, _, x, mu) = instance::<3>(seed);
            check_dlog_normal_fd(x, mu, c);
        }

        #[test]
        fn spd_sqrt_is_symmetric_and_reconstructs(seed in any::<u64>()) {
            let (c, _, _, _) = instance::<4>(seed);
            let a = spd_sqrt(&c).unwrap();
            prop_assert!((a - a.transpose()).amax() <= 1e-12 * a.amax());
            prop_assert!((a * a - c).amax() <= 1e-10 * c.amax());
        }
    }
}
