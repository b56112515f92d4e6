use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::elliptical::special::expit;
use crate::error::{Error, Result};
use crate::linalg::{chol_inverse, chol_solve, checked_cholesky, least_squares};

/// Regression learner menu. Binary targets always get the probability-valued variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerSpec {
    Linear,
    Logistic,
    /// Degree-2 expansion of standardized features with a ridge penalty tuned by cluster-level CV.
    Polynomial {
        #[serde(default = "default_lambdas")]
        lambdas: Vec<f64>,
        #[serde(default = "default_folds")]
        folds: usize,
    },
    /// Gradient-boosted depth-one trees.
    Stumps {
        #[serde(default = "default_trees")]
        n_trees: usize,
        #[serde(default = "default_rate")]
        learning_rate: f64,
        #[serde(default = "default_bins")]
        n_bins: usize,
    },
}

fn default_lambdas() -> Vec<f64> {
    vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0]
}
fn default_folds() -> usize {
    5
}
fn default_trees() -> usize {
    200
}
fn default_rate() -> f64 {
    0.1
}
fn default_bins() -> usize {
    16
}

impl Default for LearnerSpec {
    fn default() -> Self {
        LearnerSpec::Linear
    }
}

impl LearnerSpec {
    pub fn polynomial() -> Self {
        LearnerSpec::Polynomial { lambdas: default_lambdas(), folds: default_folds() }
    }

    pub fn stumps() -> Self {
        LearnerSpec::Stumps { n_trees: default_trees(), learning_rate: default_rate(), n_bins: default_bins() }
    }

    pub fn tunes_itself(&self) -> bool {
        matches!(self, LearnerSpec::Polynomial { .. })
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" | "ols" => Ok(LearnerSpec::Linear),
            "logistic" => Ok(LearnerSpec::Logistic),
            "polynomial" | "poly" => Ok(Self::polynomial()),
            "stumps" | "boosting" => Ok(Self::stumps()),
            other => Err(Error::Config(format!("unknown learner `{other}`"))),
        }
    }
}

/// Design matrix rows with the cluster each row belongs to.
#[derive(Debug, Clone)]
pub struct Design {
    pub x: Vec<f64>,
    pub p: usize,
    pub y: Vec<f64>,
    pub group: Vec<usize>,
    pub names: Vec<String>,
}

impl Design {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    fn with_intercept(&self) -> (DMatrix<f64>, Vec<String>) {
        let mut names = vec!["(intercept)".to_string()];
        names.extend(self.names.iter().cloned());
        (DMatrix::from_fn(self.n(), self.p + 1, |i, j| if j == 0 { 1.0 } else { self.x[i * self.p + j - 1] }), names)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Logit,
}

impl Link {
    fn inv(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Logit => expit(eta),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stump {
    pub feature: usize,
    pub threshold: f64,
    pub left: f64,
    pub right: f64,
}

/// A fitted learner; predictions are means (probabilities for binary targets).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedLearner {
    Linear { beta: Vec<f64>, se: Vec<f64>, sigma: f64 },
    Logistic { beta: Vec<f64>, se: Vec<f64> },
    Polynomial { center: Vec<f64>, scale: Vec<f64>, beta: Vec<f64>, lambda: f64, link: Link },
    Stumps { base: f64, rate: f64, stumps: Vec<Stump>, link: Link },
}

impl FittedLearner {
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            FittedLearner::Linear { beta, .. } => linear_predictor(beta, x),
            FittedLearner::Logistic { beta, .. } => expit(linear_predictor(beta, x)),
            FittedLearner::Polynomial { center, scale, beta, link, .. } => {
                let z: Vec<f64> = x.iter().zip(center).zip(scale).map(|((x, c), s)| if *s > 0.0 { (x - c) / s } else { 0.0 }).collect();
                let mut eta = beta[0];
                let mut idx = 1;
                let active: Vec<usize> = (0..z.len()).filter(|&i| scale[i] > 0.0).collect();
                for &i in &active {
                    eta += beta[idx] * z[i];
                    idx += 1;
                }
                for (a, &i) in active.iter().enumerate() {
                    for &j in &active[a..] {
                        eta += beta[idx] * z[i] * z[j];
                        idx += 1;
                    }
                }
                link.inv(eta)
            }
            FittedLearner::Stumps { base, rate, stumps, link } => {
                let mut f = *base;
                for s in stumps {
                    f += rate * if x[s.feature] <= s.threshold { s.left } else { s.right };
                }
                link.inv(f)
            }
        }
    }

    /// Residual standard deviation of a linear fit.
    pub fn sigma(&self) -> Option<f64> {
        match self {
            FittedLearner::Linear { sigma, .. } => Some(*sigma),
            _ => None,
        }
    }

    /// (coefficients, standard errors) of a parametric fit, intercept first.
    pub fn coefficients(&self) -> Option<(&[f64], &[f64])> {
        match self {
            FittedLearner::Linear { beta, se, .. } | FittedLearner::Logistic { beta, se } => Some((beta, se)),
            _ => None,
        }
    }
}

#[inline]
fn linear_predictor(beta: &[f64], x: &[f64]) -> f64 {
    let mut s = beta[0];
    for (b, v) in beta[1..].iter().zip(x) {
        s += b * v;
    }
    s
}

pub fn fit_learner(spec: &LearnerSpec, d: &Design, binary: bool) -> Result<FittedLearner> {
    if d.n() == 0 {
        return Err(Error::Estimation("empty design".into()));
    }
    match spec {
        LearnerSpec::Linear | LearnerSpec::Logistic if binary => fit_logistic(d),
        LearnerSpec::Linear => fit_linear(d),
        LearnerSpec::Logistic => Err(Error::Config("logistic learner needs a binary target".into())),
        LearnerSpec::Polynomial { lambdas, folds } => fit_polynomial(d, lambdas, *folds, binary),
        LearnerSpec::Stumps { n_trees, learning_rate, n_bins } => Ok(fit_stumps(d, *n_trees, *learning_rate, *n_bins, binary)),
    }
}

fn fit_linear(d: &Design) -> Result<FittedLearner> {
    let (x, names) = d.with_intercept();
    let y = DVector::from_column_slice(&d.y);
    let fit = least_squares(&x, &y, None, None, &names)?;
    Ok(FittedLearner::Linear { beta: fit.beta.as_slice().to_vec(), se: fit.se().as_slice().to_vec(), sigma: fit.sigma2.sqrt() })
}

/// IRLS for the logistic model; `ridge` penalizes all but the first column.
fn irls(x: &DMatrix<f64>, y: &[f64], ridge: f64, names: &[String]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, p) = x.shape();
    let mut beta = DVector::<f64>::zeros(p);
    let ybar = y.iter().sum::<f64>() / n as f64;
    beta[0] = (ybar.clamp(1e-6, 1.0 - 1e-6) / (1.0 - ybar.clamp(1e-6, 1.0 - 1e-6))).ln();
    let mut last_l = None;
    for _ in 0..100 {
        let eta = x * &beta;
        let mut xtwx = DMatrix::<f64>::zeros(p, p);
        let mut grad = DVector::<f64>::zeros(p);
        for i in 0..n {
            let mu = expit(eta[i]);
            let w = (mu * (1.0 - mu)).max(1e-10);
            let r = y[i] - mu;
            for a in 0..p {
                let xa = x[(i, a)];
                grad[a] += xa * r;
                for b in 0..=a {
                    xtwx[(a, b)] += w * xa * x[(i, b)];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xtwx[(b, a)] = xtwx[(a, b)];
            }
        }
        for a in 1..p {
            xtwx[(a, a)] += ridge;
            grad[a] -= ridge * beta[a];
        }
        let l = checked_cholesky(&xtwx, names)?;
        let step = chol_solve(&l, &grad);
        beta += &step;
        last_l = Some(l);
        if step.amax() < 1e-10 {
            break;
        }
        if !beta.iter().all(|v| v.is_finite()) || beta.amax() > 1e6 {
            return Err(Error::Estimation("logistic fit diverged (separated data)".into()));
        }
    }
    Ok((beta, chol_inverse(&last_l.expect("at least one iteration"))))
}

fn fit_logistic(d: &Design) -> Result<FittedLearner> {
    let (x, names) = d.with_intercept();
    let (beta, cov) = irls(&x, &d.y, 0.0, &names)?;
    let se = (0..beta.len()).map(|i| cov[(i, i)].sqrt()).collect();
    Ok(FittedLearner::Logistic { beta: beta.as_slice().to_vec(), se })
}

fn poly_expand(d: &Design) -> (Vec<f64>, Vec<f64>, DMatrix<f64>) {
    let n = d.n();
    let mut center = vec![0.0; d.p];
    let mut scale = vec![0.0; d.p];
    for c in 0..d.p {
        let m = (0..n).map(|i| d.x[i * d.p + c]).sum::<f64>() / n as f64;
        let v = (0..n).map(|i| (d.x[i * d.p + c] - m).powi(2)).sum::<f64>() / n as f64;
        center[c] = m;
        scale[c] = if v > 1e-12 { v.sqrt() } else { 0.0 };
    }
    let active: Vec<usize> = (0..d.p).filter(|&c| scale[c] > 0.0).collect();
    let q = active.len();
    let width = 1 + q + q * (q + 1) / 2;
    let x = DMatrix::from_fn(n, width, |i, col| {
        let z = |c: usize| (d.x[i * d.p + c] - center[c]) / scale[c];
        if col == 0 {
            return 1.0;
        }
        if col <= q {
            return z(active[col - 1]);
        }
        let mut idx = q + 1;
        for a in 0..q {
            for b in a..q {
                if idx == col {
                    return z(active[a]) * z(active[b]);
                }
                idx += 1;
            }
        }
        unreachable!()
    });
    (center, scale, x)
}

fn ridge_gaussian(x: &DMatrix<f64>, y: &[f64], rows: &[usize], lambda: f64) -> Result<DVector<f64>> {
    let p = x.ncols();
    let mut g = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    for &i in rows {
        for a in 0..p {
            let xa = x[(i, a)];
            b[a] += xa * y[i];
            for c in 0..=a {
                g[(a, c)] += xa * x[(i, c)];
            }
        }
    }
    for a in 0..p {
        for c in 0..a {
            g[(c, a)] = g[(a, c)];
        }
    }
    let nr = rows.len() as f64;
    for a in 1..p {
        g[(a, a)] += lambda * nr;
    }
    let l = checked_cholesky(&g, &[])?;
    Ok(chol_solve(&l, &b))
}

fn fit_polynomial(d: &Design, lambdas: &[f64], folds: usize, binary: bool) -> Result<FittedLearner> {
    let (center, scale, x) = poly_expand(d);
    let n = d.n();
    let folds = folds.max(2);
    let n_groups = d.group.iter().copied().max().unwrap_or(0) + 1;
    let fold_of = |i: usize| (d.group[i] * 7919 + 13) % folds;
    let fit_rows = |rows: &[usize], lambda: f64| -> Result<DVector<f64>> {
        if binary {
            let sub = DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)]);
            let ys: Vec<f64> = rows.iter().map(|&i| d.y[i]).collect();
            irls(&sub, &ys, lambda * rows.len() as f64, &[]).map(|r| r.0)
        } else {
            ridge_gaussian(&x, &d.y, rows, lambda)
        }
    };
    let loss = |beta: &DVector<f64>, i: usize| {
        let eta = (x.row(i) * beta)[(0, 0)];
        if binary {
            let p = expit(eta).clamp(1e-12, 1.0 - 1e-12);
            -(d.y[i] * p.ln() + (1.0 - d.y[i]) * (1.0 - p).ln())
        } else {
            (d.y[i] - eta).powi(2)
        }
    };
    let mut best = (f64::INFINITY, lambdas.first().copied().unwrap_or(1e-2));
    if lambdas.len() > 1 && n_groups >= folds {
        for &lam in lambdas {
            let mut total = 0.0;
            let mut ok = true;
            for f in 0..folds {
                let train: Vec<usize> = (0..n).filter(|&i| fold_of(i) != f).collect();
                let test: Vec<usize> = (0..n).filter(|&i| fold_of(i) == f).collect();
                if test.is_empty() {
                    continue;
                }
                match fit_rows(&train, lam) {
                    Ok(beta) => total += test.iter().map(|&i| loss(&beta, i)).sum::<f64>(),
                    Err(_) => ok = false,
                }
            }
            if ok && total < best.0 {
                best = (total, lam);
            }
        }
    }
    let all: Vec<usize> = (0..n).collect();
    let beta = fit_rows(&all, best.1)?;
    Ok(FittedLearner::Polynomial {
        center,
        scale,
        beta: beta.as_slice().to_vec(),
        lambda: best.1,
        link: if binary { Link::Logit } else { Link::Identity },
    })
}

fn fit_stumps(d: &Design, n_trees: usize, rate: f64, n_bins: usize, binary: bool) -> FittedLearner {
    let n = d.n();
    let ybar = d.y.iter().sum::<f64>() / n as f64;
    let base = if binary {
        let p = ybar.clamp(1e-6, 1.0 - 1e-6);
        (p / (1.0 - p)).ln()
    } else {
        ybar
    };
    // Candidate thresholds: distinct quantile cut points per feature.
    let cuts: Vec<Vec<f64>> = (0..d.p)
        .map(|c| {
            let mut v: Vec<f64> = (0..n).map(|i| d.x[i * d.p + c]).collect();
            v.sort_by(f64::total_cmp);
            let mut out: Vec<f64> = (1..n_bins.max(2)).map(|b| v[(b * n / n_bins.max(2)).min(n - 1)]).collect();
            out.dedup();
            out.retain(|t| *t < v[n - 1]);
            out
        })
        .collect();
    let bin: Vec<Vec<u16>> = (0..d.p)
        .map(|c| (0..n).map(|i| cuts[c].partition_point(|t| *t < d.x[i * d.p + c]) as u16).collect())
        .collect();
    let mut f = vec![base; n];
    let mut stumps = Vec::with_capacity(n_trees);
    for _ in 0..n_trees {
        let (g, h): (Vec<f64>, Vec<f64>) = (0..n)
            .map(|i| {
                if binary {
                    let p = expit(f[i]);
                    (d.y[i] - p, (p * (1.0 - p)).max(1e-6))
                } else {
                    (d.y[i] - f[i], 1.0)
                }
            })
            .unzip();
        let gt: f64 = g.iter().sum();
        let ht: f64 = h.iter().sum();
        let mut best: Option<(f64, Stump)> = None;
        for c in 0..d.p {
            let nb = cuts[c].len() + 1;
            let mut gs = vec![0.0; nb];
            let mut hs = vec![0.0; nb];
            for i in 0..n {
                let b = bin[c][i] as usize;
                gs[b] += g[i];
                hs[b] += h[i];
            }
            let (mut gl, mut hl) = (0.0, 0.0);
            for b in 0..nb - 1 {
                gl += gs[b];
                hl += hs[b];
                let (gr, hr) = (gt - gl, ht - hl);
                if hl < 1e-9 || hr < 1e-9 {
                    continue;
                }
                let gain = gl * gl / hl + gr * gr / hr;
                if best.as_ref().is_none_or(|(bg, _)| gain > *bg) {
                    best = Some((gain, Stump { feature: c, threshold: cuts[c][b], left: gl / hl, right: gr / hr }));
                }
            }
        }
        let Some((_, s)) = best else { break };
        for i in 0..n {
            f[i] += rate * if d.x[i * d.p + s.feature] <= s.threshold { s.left } else { s.right };
        }
        stumps.push(s);
    }
    FittedLearner::Stumps { base, rate, stumps, link: if binary { Link::Logit } else { Link::Identity } }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn design(n: usize, binary: bool, seed: u64) -> Design {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let a: f64 = rng.random::<f64>() * 2.0 - 1.0;
            let b: f64 = rng.random::<f64>() * 2.0 - 1.0;
            x.extend([a, b]);
            let eta = 0.5 + 1.5 * a - b + 0.8 * a * b;
            y.push(if binary { f64::from(rng.random::<f64>() < expit(eta)) } else { eta + 0.1 * (rng.random::<f64>() - 0.5) });
        }
        Design { x, p: 2, y, group: (0..n).map(|i| i / 10).collect(), names: vec!["a".into(), "b".into()] }
    }

    #[test]
    fn polynomial_recovers_interaction() {
        let d = design(600, false, 1);
        let fit = fit_learner(&LearnerSpec::polynomial(), &d, false).unwrap();
        let want = 0.5 + 1.5 * 0.3 - (-0.2) + 0.8 * 0.3 * -0.2;
        assert!((fit.predict(&[0.3, -0.2]) - want).abs() < 0.02);
    }

    #[test]
    fn logistic_close_to_truth() {
        let d = design(4000, true, 2);
        let spec = LearnerSpec::Linear;
        let fit = fit_learner(&spec, &d, true).unwrap();
        let (b, se) = fit.coefficients().unwrap();
        assert!((b[1] - 1.5).abs() < 4.0 * se[1] + 0.1);
        assert!(fit.predict(&[0.0, 0.0]) > 0.0 && fit.predict(&[0.0, 0.0]) < 1.0);
    }

    #[test]
    fn stumps_reduce_error() {
        let d = design(500, false, 3);
        let fit = fit_learner(&LearnerSpec::stumps(), &d, false).unwrap();
        let mse: f64 = (0..d.n()).map(|i| (d.y[i] - fit.predict(d.row(i))).powi(2)).sum::<f64>() / d.n() as f64;
        let var: f64 = {
            let m = d.y.iter().sum::<f64>() / d.n() as f64;
            d.y.iter().map(|y| (y - m).powi(2)).sum::<f64>() / d.n() as f64
        };
        assert!(mse < 0.2 * var, "{mse} {var}");
    }

    #[test]
    fn stumps_probabilities() {
        let d = design(500, true, 4);
        let fit = fit_learner(&LearnerSpec::stumps(), &d, true).unwrap();
        for i in 0..20 {
            let p = fit.predict(d.row(i));
            assert!(p > 0.0 && p < 1.0);
        }
    }
}
