use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::generator::Generator;
use super::qmc::PointSet;
use super::special::{norm_cdf, norm_quantile};
use crate::error::{Error, Result};

/// Elliptical law with location `mu`, scale matrix `omega` and generator `g`.
#[derive(Debug, Clone)]
pub struct EllipticalMV {
    pub mu: DVector<f64>,
    pub omega: DMatrix<f64>,
    pub g: Generator,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl EllipticalMV {
    pub fn new(mu: DVector<f64>, omega: DMatrix<f64>, g: Generator) -> Result<Self> {
        if omega.nrows() != mu.len() || omega.ncols() != mu.len() {
            return Err(Error::Numerical("scale matrix dimension mismatch".into()));
        }
        let chol = Cholesky::new(omega.clone()).ok_or_else(|| Error::Numerical("scale matrix is not positive definite".into()))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(EllipticalMV { mu, omega, g, chol, log_det })
    }

    /// Standard form with zero location and correlation `r`.
    pub fn standard(r: DMatrix<f64>, g: Generator) -> Result<Self> {
        let d = r.nrows();
        Self::new(DVector::zeros(d), r, g)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn cholesky_l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// (x−μ)ᵀΩ⁻¹(x−μ).
    pub fn mahalanobis(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_iterator(x.len(), x.iter().zip(self.mu.iter()).map(|(a, b)| a - b));
        let z = self.chol.l().solve_lower_triangular(&diff).expect("triangular solve");
        z.norm_squared()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Numerical("point dimension mismatch".into()));
        }
        Ok(-0.5 * self.log_det + self.g.log_g(self.mahalanobis(x), self.dim()))
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<DVector<f64>> {
        let l = self.chol.l();
        let d = self.dim();
        (0..n)
            .map(|_| {
                let z = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(rng)));
                let w = self.g.sample_mixing(rng);
                &self.mu + (&l * z) * w.sqrt()
            })
            .collect()
    }
}

pub fn log_density(dist: &EllipticalMV, x: &[f64]) -> Result<f64> {
    dist.log_density(x)
}

/// `n` draws from ℰ_d(0, R, g) with a fixed seed.
pub fn sample(r: &DMatrix<f64>, g: Generator, n: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    let dist = EllipticalMV::standard(r.clone(), g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(dist.sample_with(n, &mut rng))
}

pub fn submatrix(r: &DMatrix<f64>, s: &[usize]) -> Result<DMatrix<f64>> {
    if s.is_empty() {
        return Err(Error::Numerical("empty index subset".into()));
    }
    if s.iter().any(|&i| i >= r.nrows()) {
        return Err(Error::Numerical("index subset out of range".into()));
    }
    Ok(DMatrix::from_fn(s.len(), s.len(), |i, j| r[(s[i], s[j])]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RectProb {
    pub estimate: f64,
    pub se: f64,
}

/// One sequential-conditioning (GHK) evaluation for lower-triangular `l`,
/// with bounds divided by `scale`. Uses `u[0..d-1]`.
pub fn ghk_point(l: &DMatrix<f64>, lower: &[f64], upper: &[f64], scale: f64, u: &[f64], z: &mut [f64]) -> f64 {
    let d = lower.len();
    let mut prod = 1.0;
    for i in 0..d {
        let mut mean = 0.0;
        for c in 0..i {
            mean += l[(i, c)] * z[c];
        }
        let lii = l[(i, i)];
        let a = if lower[i] == f64::NEG_INFINITY { f64::NEG_INFINITY } else { (lower[i] / scale - mean) / lii };
        let b = if upper[i] == f64::INFINITY { f64::INFINITY } else { (upper[i] / scale - mean) / lii };
        let fa = norm_cdf(a);
        let fb = norm_cdf(b);
        let p = fb - fa;
        if p <= 0.0 {
            return 0.0;
        }
        prod *= p;
        if i + 1 < d {
            let t = (fa + u[i] * p).clamp(1e-16, 1.0 - 1e-16);
            z[i] = norm_quantile(t).clamp(a, b);
        }
    }
    prod
}

/// P(lower ≤ ε ≤ upper) for ε ~ ℰ_d(0, R, g), randomized QMC with antithetic pairs.
pub fn rectangle_prob(
    r: &DMatrix<f64>,
    g: Generator,
    lower: &[f64],
    upper: &[f64],
    n_mc: usize,
    seed: u64,
) -> Result<RectProb> {
    let d = r.nrows();
    if lower.len() != d || upper.len() != d {
        return Err(Error::Numerical("rectangle dimension mismatch".into()));
    }
    if lower.iter().zip(upper).any(|(a, b)| a > b || a.is_nan() || b.is_nan()) {
        return Err(Error::Numerical("rectangle lower bound exceeds upper bound".into()));
    }
    if lower.iter().zip(upper).any(|(a, b)| a == b) {
        return Ok(RectProb { estimate: 0.0, se: 0.0 });
    }
    let chol = Cholesky::new(r.clone()).ok_or_else(|| Error::Numerical("degenerate correlation matrix".into()))?;
    let l = chol.l();
    let mixed = g != Generator::Normal;
    let dim = d.saturating_sub(1) + usize::from(mixed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_shift = (n_mc / 8).clamp(1, 32);
    let ps = PointSet::new(dim.max(1), n_mc.max(2), n_shift, &mut rng);
    let mut z = vec![0.0; d];
    let mut shift_means = Vec::with_capacity(ps.n_shift);
    for s in 0..ps.n_shift {
        let mut acc = 0.0;
        for i in 0..ps.per_shift {
            let u = ps.point(s * ps.per_shift + i);
            let scale = if mixed { g.mixing_from_uniform(u[dim - 1]).sqrt() } else { 1.0 };
            acc += ghk_point(&l, lower, upper, scale, u, &mut z);
        }
        shift_means.push(acc / ps.per_shift as f64);
    }
    let m = shift_means.len() as f64;
    let est = shift_means.iter().sum::<f64>() / m;
    let se = if shift_means.len() > 1 {
        (shift_means.iter().map(|v| (v - est).powi(2)).sum::<f64>() / (m - 1.0) / m).sqrt()
    } else {
        0.0
    };
    Ok(RectProb { estimate: est, se })
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::function::gamma::ln_gamma;
    use std::f64::consts::PI;

    #[test]
    fn standard_normal_at_origin() {
        let d = EllipticalMV::standard(DMatrix::identity(1, 1), Generator::Normal).unwrap();
        assert!((d.log_density(&[0.0]).unwrap() + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn orthant_probabilities() {
        for i in -4..=4 {
            let rho = i as f64 / 5.0;
            let r = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
            let p = rectangle_prob(&r, Generator::Normal, &[0.0, 0.0], &[f64::INFINITY; 2], 512, 11).unwrap();
            let want = 0.25 + rho.asin() / (2.0 * PI);
            assert!((p.estimate - want).abs() <= 3.0 * p.se + 1e-12, "rho={rho} {p:?}");
        }
    }

    #[test]
    fn trivial_rectangles() {
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
        let inf = f64::INFINITY;
        for g in [Generator::Normal, Generator::StudentT { nu: 3.0 }, Generator::Laplace] {
            let full = rectangle_prob(&r, g, &[-inf, -inf], &[inf, inf], 64, 1).unwrap();
            assert!((full.estimate - 1.0).abs() < 1e-14);
            let null = rectangle_prob(&r, g, &[0.5, -1.0], &[0.5, 1.0], 64, 1).unwrap();
            assert_eq!(null.estimate, 0.0);
        }
        assert!(rectangle_prob(&r, Generator::Normal, &[1.0, 0.0], &[0.0, 1.0], 64, 1).is_err());
    }

    #[test]
    fn t_rectangle_matches_one_dimensional_cdf() {
        let g = Generator::StudentT { nu: 4.0 };
        let r = DMatrix::identity(1, 1);
        let p = rectangle_prob(&r, g, &[-0.7], &[1.3], 512, 5).unwrap();
        let want = g.cdf_1d(1.3) - g.cdf_1d(-0.7);
        assert!((p.estimate - want).abs() < 3.0 * p.se + 1e-6, "{p:?} {want}");
    }

    #[test]
    fn multivariate_t_density_oracle() {
        let nu: f64 = 3.5;
        let r = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, -0.2, 0.3, 1.0, 0.1, -0.2, 0.1, 1.5]);
        let mu = DVector::from_vec(vec![0.5, -1.0, 0.0]);
        let d = EllipticalMV::new(mu.clone(), r.clone(), Generator::StudentT { nu }).unwrap();
        let x = [1.0, 0.2, -0.4];
        let diff = DVector::from_row_slice(&x) - &mu;
        let q = (diff.transpose() * r.clone().try_inverse().unwrap() * &diff)[(0, 0)];
        let p = 3.0;
        let want = ln_gamma((nu + p) / 2.0) - ln_gamma(nu / 2.0) - p / 2.0 * (nu * PI).ln() - 0.5 * r.determinant().ln()
            - (nu + p) / 2.0 * (1.0 + q / nu).ln();
        assert!((d.log_density(&x).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn submatrix_examples() {
        let r = DMatrix::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.4 });
        assert_eq!(submatrix(&r, &[0, 1, 2, 3]).unwrap(), r);
        let s = submatrix(&r, &[1, 3]).unwrap();
        assert_eq!(s, DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.0]));
        assert!(submatrix(&r, &[]).is_err());
    }
}
