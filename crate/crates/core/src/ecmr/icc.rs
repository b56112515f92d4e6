use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Within-individual (`q0`) and between-individual (`q1`) latent correlation blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IccMatrices {
    #[serde(with = "super::rows")]
    pub q0: DMatrix<f64>,
    #[serde(with = "super::rows")]
    pub q1: DMatrix<f64>,
}

/// Q1 = C Cᵀ and D = Q0 − Q1 = L_D L_Dᵀ, so that Z_j = C ξ + L_D δ_j with ξ, δ_j iid standard normal.
#[derive(Debug, Clone)]
pub struct IccFactor {
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub d_chol: DMatrix<f64>,
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

impl IccMatrices {
    pub fn new(q0: DMatrix<f64>, q1: DMatrix<f64>) -> Result<Self> {
        let k = q0.nrows();
        if q0.ncols() != k || q1.shape() != (k, k) {
            return Err(Error::Config("ICC matrices must both be K×K".into()));
        }
        for i in 0..k {
            if (q0[(i, i)] - 1.0).abs() > 1e-9 {
                return Err(Error::Config("Q0 must have unit diagonal".into()));
            }
            for j in 0..k {
                if (q0[(i, j)] - q0[(j, i)]).abs() > 1e-12 || (q1[(i, j)] - q1[(j, i)]).abs() > 1e-12 {
                    return Err(Error::Config("ICC matrices must be symmetric".into()));
                }
            }
        }
        let icc = IccMatrices { q0, q1 };
        if min_eig(&icc.q0) <= 0.0 {
            return Err(Error::Domain("Q0 is not positive definite".into()));
        }
        if min_eig(&(&icc.q0 - &icc.q1)) <= 0.0 {
            return Err(Error::Domain("Q0 − Q1 is not positive definite".into()));
        }
        Ok(icc)
    }

    pub fn independence(k: usize) -> Self {
        IccMatrices { q0: DMatrix::identity(k, k), q1: DMatrix::zeros(k, k) }
    }

    /// Exchangeable structure: Q0 off-diagonal `r0`, every entry of Q1 equal to `r1`.
    pub fn exchangeable(k: usize, r0: f64, r1: f64) -> Result<Self> {
        let q0 = DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { r0 });
        Self::new(q0, DMatrix::from_element(k, k, r1))
    }

    pub fn k(&self) -> usize {
        self.q0.nrows()
    }

    /// Smallest eigenvalue of Q0 + (N−1)Q1, the extra condition for R(𝒬) ≻ 0 at size N.
    pub fn sum_margin(&self, n: usize) -> f64 {
        min_eig(&(&self.q0 + &self.q1 * (n as f64 - 1.0)))
    }

    pub fn validate(&self, n_max: usize) -> Result<()> {
        Self::new(self.q0.clone(), self.q1.clone())?;
        if n_max > 1 && self.sum_margin(n_max) <= 0.0 {
            return Err(Error::Domain(format!("R(Q) is not positive definite at N = {n_max}")));
        }
        Ok(())
    }

    /// R = (Q0 − Q1) ⊗ I_N + Q1 ⊗ 1 1ᵀ, indexed mediator-major: row k·N + j.
    pub fn build_r(&self, n: usize) -> Result<DMatrix<f64>> {
        if n == 0 {
            return Err(Error::Domain("cluster size must be positive".into()));
        }
        let k = self.k();
        let r = DMatrix::from_fn(n * k, n * k, |a, b| {
            let (ka, ja, kb, jb) = (a / n, a % n, b / n, b % n);
            if ja == jb { self.q0[(ka, kb)] } else { self.q1[(ka, kb)] }
        });
        if Cholesky::new(r.clone()).is_none() {
            return Err(Error::Domain(format!("R(Q) is not positive definite at N = {n}")));
        }
        Ok(r)
    }

    /// Factor form when Q1 is positive semidefinite.
    pub fn factor(&self) -> Option<IccFactor> {
        let eig = SymmetricEigen::new(self.q1.clone());
        let scale = self.q1.amax().max(1.0);
        if eig.eigenvalues.iter().any(|&l| l < -1e-12 * scale) {
            return None;
        }
        let k = self.k();
        let c = DMatrix::from_fn(k, k, |i, j| eig.eigenvectors[(i, j)] * eig.eigenvalues[j].max(0.0).sqrt());
        let d = &self.q0 - &self.q1;
        let d_chol = Cholesky::new(d.clone())?.l();
        Some(IccFactor { c, d, d_chol })
    }

    pub fn n_params(k: usize) -> usize {
        k * k
    }

    /// Unconstrained parameterization: θ = (lower triangle of L1, strict lower triangle of Bu);
    /// Q1' = L1L1ᵀ, D' = BuBuᵀ with unit-diagonal Bu, S = diag(D' + Q1'),
    /// Q0 = S^{-½}(D' + Q1')S^{-½}, Q1 = S^{-½}Q1'S^{-½}.
    pub fn from_params(theta: &[f64], k: usize) -> Self {
        let mut l1 = DMatrix::<f64>::zeros(k, k);
        let mut bu = DMatrix::<f64>::identity(k, k);
        let mut idx = 0;
        for i in 0..k {
            for j in 0..=i {
                l1[(i, j)] = theta[idx];
                idx += 1;
            }
        }
        for i in 0..k {
            for j in 0..i {
                bu[(i, j)] = theta[idx];
                idx += 1;
            }
        }
        let q1p = &l1 * l1.transpose();
        let tot = &bu * bu.transpose() + &q1p;
        let s: Vec<f64> = (0..k).map(|i| 1.0 / tot[(i, i)].sqrt()).collect();
        let q0 = DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { tot[(i, j)] * s[i] * s[j] });
        let q1 = DMatrix::from_fn(k, k, |i, j| q1p[(i, j)] * s[i] * s[j]);
        IccMatrices { q0, q1 }
    }

    /// Inverse of [`IccMatrices::from_params`]; `None` when Q1 is indefinite.
    pub fn to_params(&self) -> Option<Vec<f64>> {
        let k = self.k();
        let ld = Cholesky::new(&self.q0 - &self.q1)?.l();
        let c: Vec<f64> = (0..k).map(|i| ld[(i, i)]).collect();
        let q1p = DMatrix::from_fn(k, k, |i, j| self.q1[(i, j)] / (c[i] * c[j]));
        let eig = SymmetricEigen::new(q1p.clone());
        if eig.eigenvalues.iter().any(|&l| l < -1e-10) {
            return None;
        }
        let jitter = DMatrix::<f64>::identity(k, k) * 1e-12;
        let l1 = Cholesky::new(&q1p + &jitter).map(|ch| ch.l()).unwrap_or_else(|| DMatrix::zeros(k, k));
        let mut theta = Vec::with_capacity(k * k);
        for i in 0..k {
            for j in 0..=i {
                theta.push(l1[(i, j)]);
            }
        }
        for i in 0..k {
            for j in 0..i {
                theta.push(ld[(i, j)] / c[i]);
            }
        }
        Some(theta)
    }

    pub fn max_abs_diff(&self, o: &IccMatrices) -> f64 {
        (&self.q0 - &o.q0).amax().max((&self.q1 - &o.q1).amax())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_individual_is_q0() {
        let icc = IccMatrices::exchangeable(2, 0.1, 0.05).unwrap();
        assert_eq!(icc.build_r(1).unwrap(), icc.q0);
    }

    #[test]
    fn one_mediator_is_exchangeable() {
        let icc = IccMatrices::exchangeable(1, 0.0, 0.3).unwrap();
        let r = icc.build_r(4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(r[(i, j)], if i == j { 1.0 } else { 0.3 });
            }
        }
    }

    #[test]
    fn two_by_two_block_expansion() {
        let icc = IccMatrices::exchangeable(2, 0.1, 0.05).unwrap();
        let r = icc.build_r(2).unwrap();
        // rows: (k1,j1), (k1,j2), (k2,j1), (k2,j2)
        let want = DMatrix::from_row_slice(
            4,
            4,
            &[1.0, 0.05, 0.1, 0.05, 0.05, 1.0, 0.05, 0.1, 0.1, 0.05, 1.0, 0.05, 0.05, 0.1, 0.05, 1.0],
        );
        assert_eq!(r, want);
    }

    #[test]
    fn params_round_trip() {
        let icc = IccMatrices::exchangeable(3, 0.2, 0.05).unwrap();
        let theta = icc.to_params().unwrap();
        assert_eq!(theta.len(), 9);
        let back = IccMatrices::from_params(&theta, 3);
        assert!(back.max_abs_diff(&icc) < 1e-9);
    }

    #[test]
    fn every_parameter_vector_is_valid() {
        let theta = [0.7, -1.2, 0.4, 2.0, -3.0, 0.5, 1.5, -0.8, 0.3];
        let icc = IccMatrices::from_params(&theta, 3);
        icc.validate(1000).unwrap();
        assert!(icc.factor().is_some());
    }

    #[test]
    fn indefinite_q1_has_no_factor() {
        let q0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let q1 = DMatrix::from_row_slice(2, 2, &[0.05, 0.2, 0.2, 0.05]);
        let icc = IccMatrices::new(q0, q1).unwrap();
        assert!(icc.factor().is_none());
        assert!(icc.to_params().is_none());
    }

    #[test]
    fn non_positive_definite_rejected() {
        let icc = IccMatrices { q0: DMatrix::identity(1, 1), q1: DMatrix::from_element(1, 1, -0.5) };
        assert!(icc.build_r(3).is_err());
        assert!(icc.validate(3).is_err());
    }
}
