//! Small dense numerical helpers: least squares, quadrature nodes, quasi-Newton minimization.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Cholesky of a symmetric PSD matrix that names the first column found to be
/// linearly dependent on earlier ones.
pub fn checked_cholesky(a: &DMatrix<f64>, names: &[String]) -> Result<DMatrix<f64>> {
    let p = a.nrows();
    let scale: Vec<f64> = (0..p).map(|i| a[(i, i)].max(0.0).sqrt()).collect();
    let mut l = DMatrix::<f64>::zeros(p, p);
    for j in 0..p {
        if scale[j] == 0.0 {
            return Err(singular(names, j, None));
        }
        let mut d = a[(j, j)] / (scale[j] * scale[j]);
        for c in 0..j {
            d -= l[(j, c)] * l[(j, c)];
        }
        if d <= 1e-10 {
            let partner = (0..j).rev().find(|&c| (a[(j, c)] / (scale[j] * scale[c])).abs() > 1.0 - 1e-8);
            return Err(singular(names, j, partner));
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..p {
            let mut s = a[(i, j)] / (scale[i] * scale[j]);
            for c in 0..j {
                s -= l[(i, c)] * l[(j, c)];
            }
            l[(i, j)] = s / djj;
        }
    }
    for i in 0..p {
        for j in 0..=i {
            l[(i, j)] *= scale[i];
        }
    }
    Ok(l)
}

fn singular(names: &[String], j: usize, partner: Option<usize>) -> Error {
    let name = |i: usize| names.get(i).cloned().unwrap_or_else(|| format!("column {i}"));
    match partner {
        Some(c) => Error::Estimation(format!("singular design: column `{}` duplicates `{}`", name(j), name(c))),
        None => Error::Estimation(format!("singular design: column `{}` is collinear with earlier columns", name(j))),
    }
}

/// Solve L Lᵀ x = b for lower-triangular L.
pub fn chol_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let z = l.solve_lower_triangular(b).expect("nonsingular triangular factor");
    l.transpose().solve_upper_triangular(&z).expect("nonsingular triangular factor")
}

pub fn chol_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let p = l.nrows();
    let li = l.solve_lower_triangular(&DMatrix::identity(p, p)).expect("nonsingular triangular factor");
    li.transpose() * li
}

/// Weighted least squares with a dependency check on the Gram matrix.
#[derive(Debug, Clone)]
pub struct LsFit {
    pub beta: DVector<f64>,
    pub xtx_inv: DMatrix<f64>,
    pub sigma2: f64,
    pub df: usize,
}

impl LsFit {
    pub fn se(&self) -> DVector<f64> {
        DVector::from_iterator(self.beta.len(), (0..self.beta.len()).map(|i| (self.sigma2 * self.xtx_inv[(i, i)]).sqrt()))
    }
}

pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>, w: Option<&DVector<f64>>, ridge: Option<&[f64]>, names: &[String]) -> Result<LsFit> {
    let (n, p) = x.shape();
    let xw = match w {
        Some(w) => DMatrix::from_fn(n, p, |i, j| x[(i, j)] * w[i]),
        None => x.clone(),
    };
    let mut xtx = xw.transpose() * x;
    if let Some(r) = ridge {
        for j in 0..p {
            xtx[(j, j)] += r[j];
        }
    }
    let xty = xw.transpose() * y;
    let l = checked_cholesky(&xtx, names)?;
    let beta = chol_solve(&l, &xty);
    let resid = y - x * &beta;
    let rss: f64 = match w {
        Some(w) => resid.iter().zip(w.iter()).map(|(r, w)| w * r * r).sum(),
        None => resid.norm_squared(),
    };
    let df = n.saturating_sub(p).max(1);
    Ok(LsFit { beta, xtx_inv: chol_inverse(&l), sigma2: rss / df as f64, df })
}

/// Probabilists' Gauss–Hermite rule: Σ wᵢ f(xᵢ) ≈ E f(Z), Z ~ N(0,1).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    if n == 1 {
        return (vec![0.0], vec![1.0]);
    }
    let jac = DMatrix::from_fn(n, n, |i, j| if i + 1 == j || j + 1 == i { (i.max(j) as f64).sqrt() } else { 0.0 });
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n).map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    (pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1 / total).collect())
}

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub f_tol: f64,
    pub step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions { max_iter: 200, grad_tol: 1e-5, f_tol: 1e-9, step: 1e-5 }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

fn num_grad<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64], h: f64, evals: &mut usize) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let hi = h * (1.0 + x[i].abs());
            xp[i] = x[i] + hi;
            let fp = f(&xp);
            xp[i] = x[i] - hi;
            let fm = f(&xp);
            xp[i] = x[i];
            *evals += 2;
            (fp - fm) / (2.0 * hi)
        })
        .collect()
}

/// Minimize `f` by BFGS with central-difference gradients and Armijo backtracking.
/// Non-finite objective values are treated as +∞.
pub fn bfgs<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], opts: BfgsOptions) -> BfgsResult {
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() { v } else { f64::INFINITY }
    };
    let mut x = x0.to_vec();
    let mut fx = eval(&x, &mut evals);
    let mut g = {
        let mut ff = |z: &[f64]| {
            let v = eval(z, &mut 0);
            v
        };
        num_grad(&mut ff, &x, opts.step, &mut evals)
    };
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut converged = false;
    let mut iter = 0;
    while iter < opts.max_iter {
        iter += 1;
        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gn < opts.grad_tol {
            converged = true;
            break;
        }
        let gv = DVector::from_column_slice(&g);
        let mut d = -(&h * &gv);
        let mut slope = d.dot(&gv);
        if slope >= 0.0 {
            h = DMatrix::identity(n, n);
            d = -gv.clone();
            slope = d.dot(&gv);
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xn: Vec<f64> = x.iter().zip(d.iter()).map(|(a, b)| a + t * b).collect();
            let fxn = eval(&xn, &mut evals);
            if fxn <= fx + 1e-4 * t * slope {
                accepted = Some((xn, fxn));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fxn)) = accepted else {
            converged = gn < opts.grad_tol * 1e3;
            break;
        };
        let gn_vec = {
            let mut ff = |z: &[f64]| eval(z, &mut 0);
            num_grad(&mut ff, &xn, opts.step, &mut evals)
        };
        let s = DVector::from_iterator(n, xn.iter().zip(&x).map(|(a, b)| a - b));
        let yv = DVector::from_iterator(n, gn_vec.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&yv);
        let df = fx - fxn;
        x = xn;
        g = gn_vec;
        let prev = fx;
        fx = fxn;
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let a = &i - &s * yv.transpose() * rho;
            let b = &i - &yv * s.transpose() * rho;
            h = &a * &h * &b + &s * s.transpose() * rho;
        }
        if df.abs() <= opts.f_tol * (1.0 + prev.abs()) {
            converged = true;
            break;
        }
    }
    BfgsResult { x, f: fx, iterations: iter, evaluations: evals, converged }
}
