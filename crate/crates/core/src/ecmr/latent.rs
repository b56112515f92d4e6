//! Latent elliptical probabilities of mixed point/interval observations on a cluster.

use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::icc::{IccFactor, IccMatrices};
use crate::elliptical::mixing::mixing_nodes;
use crate::elliptical::mvn::ghk_point;
use crate::elliptical::qmc::PointSet;
use crate::elliptical::special::{bvn_rect, log_norm_interval, log_sum_exp, norm_quantile};
use crate::elliptical::Generator;
use crate::error::{Error, Result};
use crate::linalg::gauss_hermite;

/// One latent coordinate: not in the subset, observed exactly, or known to lie in an interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coord {
    Absent,
    Point(f64),
    Interval(f64, f64),
}

/// Quadrature sizes and the seed of the fixed quasi-random point sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatentConfig {
    pub n_gh: usize,
    pub n_gh2: usize,
    pub n_qmc: usize,
    pub n_mix: usize,
    pub n_inner: usize,
    pub seed: u64,
}

impl Default for LatentConfig {
    fn default() -> Self {
        LatentConfig { n_gh: 20, n_gh2: 10, n_qmc: 256, n_mix: 16, n_inner: 128, seed: 0x5eed }
    }
}

struct Pattern {
    nc: usize,
    nd: usize,
    cidx: Vec<usize>,
    didx: Vec<usize>,
    logdet_dcc: f64,
    a_c: DMatrix<f64>,
    bta: DMatrix<f64>,
    btab: DMatrix<f64>,
    g: DMatrix<f64>,
    h: DMatrix<f64>,
    cond_chol: DMatrix<f64>,
}

enum Backend {
    Factor { f: IccFactor, patterns: Vec<OnceLock<Pattern>> },
    Dense,
}

/// Evaluates log[f_ε(ε_c) · P(ε_d ∈ rect | ε_c)] for ε ~ ℰ_{NK}(0, R(𝒬), g).
pub struct LatentEvaluator {
    k: usize,
    g: Generator,
    icc: IccMatrices,
    cfg: LatentConfig,
    backend: Backend,
    gh1: (Vec<f64>, Vec<f64>),
    gh2: (Vec<f64>, Vec<f64>),
    gh_mix: (Vec<f64>, Vec<f64>),
    qmc: PointSet,
    inner: OnceLock<PointSet>,
}

impl std::fmt::Debug for LatentEvaluator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LatentEvaluator").field("k", &self.k).field("g", &self.g).field("factor", &self.is_factor()).finish()
    }
}

impl LatentEvaluator {
    pub fn new(icc: &IccMatrices, g: Generator, cfg: LatentConfig) -> Self {
        let k = icc.k();
        let backend = match icc.factor() {
            Some(f) => Backend::Factor { f, patterns: (0..3usize.pow(k as u32)).map(|_| OnceLock::new()).collect() },
            None => Backend::Dense,
        };
        Self::with_backend(icc, g, cfg, backend)
    }

    /// Dense evaluation from the full correlation matrix, regardless of the sign of Q1.
    pub fn dense(icc: &IccMatrices, g: Generator, cfg: LatentConfig) -> Self {
        Self::with_backend(icc, g, cfg, Backend::Dense)
    }

    fn with_backend(icc: &IccMatrices, g: Generator, cfg: LatentConfig, backend: Backend) -> Self {
        let k = icc.k();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let qmc = PointSet::new(k.max(1), cfg.n_qmc.max(2), 1, &mut rng);
        LatentEvaluator {
            k,
            g,
            icc: icc.clone(),
            cfg,
            backend,
            gh1: gauss_hermite(cfg.n_gh.max(1)),
            gh2: gauss_hermite(cfg.n_gh2.max(1)),
            gh_mix: gauss_hermite(cfg.n_mix.max(1)),
            qmc,
            inner: OnceLock::new(),
        }
    }

    pub fn is_factor(&self) -> bool {
        matches!(self.backend, Backend::Factor { .. })
    }

    pub fn generator(&self) -> Generator {
        self.g
    }

    pub fn icc(&self) -> &IccMatrices {
        &self.icc
    }

    fn inner_points(&self) -> &PointSet {
        self.inner.get_or_init(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
            PointSet::new(self.k.max(2), self.cfg.n_inner.max(2), 1, &mut rng)
        })
    }

    /// `coords[j * K + k]` describes mediator k of individual j; `n` individuals.
    pub fn log_prob(&self, coords: &[Coord], n: usize) -> Result<f64> {
        if coords.len() != n * self.k {
            return Err(Error::Numerical("coordinate vector has wrong length".into()));
        }
        for c in coords {
            if let Coord::Interval(a, b) = *c {
                if !(a <= b) {
                    return Err(Error::Numerical("interval lower bound exceeds upper bound".into()));
                }
                if a == b {
                    return Ok(f64::NEG_INFINITY);
                }
            }
        }
        match &self.backend {
            Backend::Factor { f, patterns } => Ok(self.factor_log_prob(f, patterns, coords, n)),
            Backend::Dense => self.dense_log_prob(coords, n),
        }
    }

    fn pattern<'a>(&self, f: &IccFactor, patterns: &'a [OnceLock<Pattern>], code: usize, cmask: u32, dmask: u32) -> &'a Pattern {
        patterns[code].get_or_init(|| build_pattern(f, self.k, cmask, dmask))
    }

    fn factor_log_prob(&self, f: &IccFactor, patterns: &[OnceLock<Pattern>], coords: &[Coord], n: usize) -> f64 {
        let k = self.k;
        let mut pats: Vec<&Pattern> = Vec::with_capacity(n);
        let mut codes: Vec<usize> = Vec::with_capacity(n);
        for j in 0..n {
            let (mut cm, mut dm, mut code, mut pow) = (0u32, 0u32, 0usize, 1usize);
            for kk in 0..k {
                match coords[j * k + kk] {
                    Coord::Absent => {}
                    Coord::Point(_) => {
                        cm |= 1 << kk;
                        code += pow;
                    }
                    Coord::Interval(..) => {
                        dm |= 1 << kk;
                        code += 2 * pow;
                    }
                }
                pow *= 3;
            }
            codes.push(code);
            pats.push(self.pattern(f, patterns, code, cm, dm));
        }
        let mut prec = DMatrix::<f64>::identity(k, k);
        let mut b = DVector::<f64>::zeros(k);
        let (mut quad0, mut logdet_d, mut dc, mut nd_total) = (0.0, 0.0, 0usize, 0usize);
        let mut zc: Vec<DVector<f64>> = Vec::with_capacity(n);
        for (j, p) in pats.iter().enumerate() {
            nd_total += p.nd;
            let z = DVector::from_iterator(p.nc, p.cidx.iter().map(|&kk| match coords[j * k + kk] {
                Coord::Point(v) => v,
                _ => unreachable!(),
            }));
            if p.nc > 0 {
                prec += &p.btab;
                b += &p.bta * &z;
                quad0 += z.dot(&(&p.a_c * &z));
                logdet_d += p.logdet_dcc;
                dc += p.nc;
            }
            zc.push(z);
        }
        let chol = Cholesky::new(prec).expect("posterior precision is positive definite");
        let lp = chol.l();
        let logdet_p = 2.0 * lp.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let m = chol.solve(&b);
        let q = (quad0 - b.dot(&m)).max(0.0);
        let cont = if dc > 0 { self.g.log_g(q, dc) - 0.5 * (logdet_d + logdet_p) } else { 0.0 };
        if nd_total == 0 {
            return cont;
        }
        // ξ = m + L⁻ᵀu: the discrete means depend on u through T_j = H_j L⁻ᵀ.
        let mut seen: Vec<usize> = Vec::new();
        let mut rows: Vec<DVector<f64>> = Vec::new();
        let mut t_of: Vec<Option<DMatrix<f64>>> = vec![None; n];
        let mut cache: Vec<(usize, DMatrix<f64>)> = Vec::new();
        for (j, p) in pats.iter().enumerate() {
            if p.nd == 0 {
                continue;
            }
            let t = if let Some((_, t)) = cache.iter().find(|(c, _)| *c == codes[j]) {
                t.clone()
            } else {
                // T = H L⁻ᵀ  ⇔  Tᵀ = L⁻¹ Hᵀ
                let tt = lp.solve_lower_triangular(&p.h.transpose()).expect("triangular solve");
                let t = tt.transpose();
                cache.push((codes[j], t.clone()));
                if !seen.contains(&codes[j]) {
                    seen.push(codes[j]);
                    for r in 0..t.nrows() {
                        rows.push(t.row(r).transpose());
                    }
                }
                t
            };
            t_of[j] = Some(t);
        }
        let basis = row_space_basis(&rows, k);
        let r = basis.ncols();
        let mean0: Vec<DVector<f64>> = pats
            .iter()
            .enumerate()
            .map(|(j, p)| if p.nd == 0 { DVector::zeros(0) } else { &p.g * &zc[j] + &p.h * &m })
            .collect();
        let proj: Vec<DMatrix<f64>> = t_of.iter().map(|t| t.as_ref().map(|t| t * &basis).unwrap_or_else(|| DMatrix::zeros(0, r))).collect();
        let bounds: Vec<(Vec<f64>, Vec<f64>)> = pats
            .iter()
            .enumerate()
            .map(|(j, p)| {
                p.didx
                    .iter()
                    .map(|&kk| match coords[j * k + kk] {
                        Coord::Interval(a, b) => (a, b),
                        _ => unreachable!(),
                    })
                    .unzip()
            })
            .collect();
        let v_nodes = self.v_nodes(r);
        let mix = mixing_nodes(self.g, q, dc, &self.gh_mix);
        let mut terms = Vec::with_capacity(mix.len() * v_nodes.len());
        let mut mean = Vec::with_capacity(k);
        for &(t, lw_mix) in &mix {
            for (v, lw_v) in &v_nodes {
                let mut acc = lw_mix + lw_v;
                for (j, p) in pats.iter().enumerate() {
                    if p.nd == 0 {
                        continue;
                    }
                    mean.clear();
                    for row in 0..p.nd {
                        let mut s = mean0[j][row];
                        for c in 0..r {
                            s += t * proj[j][(row, c)] * v[c];
                        }
                        mean.push(s);
                    }
                    acc += self.log_cond_rect(&p.cond_chol, &mean, &bounds[j].0, &bounds[j].1, t);
                    if acc == f64::NEG_INFINITY {
                        break;
                    }
                }
                terms.push(acc);
            }
        }
        cont + log_sum_exp(&terms)
    }

    /// Nodes for v ~ N(0, I_r) with log weights.
    fn v_nodes(&self, r: usize) -> Vec<(Vec<f64>, f64)> {
        match r {
            0 => vec![(vec![], 0.0)],
            1 => self.gh1.0.iter().zip(&self.gh1.1).map(|(x, w)| (vec![*x], w.ln())).collect(),
            2 => {
                let (x, w) = &self.gh2;
                let mut out = Vec::with_capacity(x.len() * x.len());
                for a in 0..x.len() {
                    for b in 0..x.len() {
                        out.push((vec![x[a], x[b]], (w[a] * w[b]).ln()));
                    }
                }
                out
            }
            _ => {
                let lw = -(self.qmc.len() as f64).ln();
                (0..self.qmc.len()).map(|i| (self.qmc.point(i)[..r].iter().map(|&u| norm_quantile(u)).collect(), lw)).collect()
            }
        }
    }

    /// log P(N(mean, t²Σ) ∈ [lo, hi]) with Σ = L Lᵀ.
    fn log_cond_rect(&self, l: &DMatrix<f64>, mean: &[f64], lo: &[f64], hi: &[f64], t: f64) -> f64 {
        let d = mean.len();
        match d {
            1 => {
                let s = t * l[(0, 0)];
                log_norm_interval((lo[0] - mean[0]) / s, (hi[0] - mean[0]) / s)
            }
            2 => {
                let s1 = t * l[(0, 0)];
                let s2 = t * (l[(1, 0)].powi(2) + l[(1, 1)].powi(2)).sqrt();
                let rho = l[(1, 0)] * l[(0, 0)] / (l[(0, 0)] * (l[(1, 0)].powi(2) + l[(1, 1)].powi(2)).sqrt());
                let p = bvn_rect(
                    (lo[0] - mean[0]) / s1,
                    (hi[0] - mean[0]) / s1,
                    (lo[1] - mean[1]) / s2,
                    (hi[1] - mean[1]) / s2,
                    rho,
                );
                if p > 0.0 { p.ln() } else { f64::NEG_INFINITY }
            }
            _ => {
                let pts = self.inner_points();
                let lo_c: Vec<f64> = lo.iter().zip(mean).map(|(a, m)| a - m).collect();
                let hi_c: Vec<f64> = hi.iter().zip(mean).map(|(b, m)| b - m).collect();
                let mut z = vec![0.0; d];
                let mut acc = 0.0;
                let mut u = vec![0.5; d];
                for i in 0..pts.len() {
                    let p = pts.point(i);
                    for c in 0..d - 1 {
                        u[c] = p[c % p.len()];
                    }
                    acc += ghk_point(l, &lo_c, &hi_c, t, &u, &mut z);
                }
                let p = acc / pts.len() as f64;
                if p > 0.0 { p.ln() } else { f64::NEG_INFINITY }
            }
        }
    }

    fn dense_log_prob(&self, coords: &[Coord], n: usize) -> Result<f64> {
        let k = self.k;
        let r = self.icc.build_r(n)?;
        // R is mediator-major (row k·N + j); coords are individual-major.
        let (mut ci, mut di) = (Vec::new(), Vec::new());
        let (mut zc, mut lo, mut hi) = (Vec::new(), Vec::new(), Vec::new());
        for j in 0..n {
            for kk in 0..k {
                match coords[j * k + kk] {
                    Coord::Absent => {}
                    Coord::Point(v) => {
                        ci.push(kk * n + j);
                        zc.push(v);
                    }
                    Coord::Interval(a, b) => {
                        di.push(kk * n + j);
                        lo.push(a);
                        hi.push(b);
                    }
                }
            }
        }
        let sub = |a: &[usize], b: &[usize]| DMatrix::from_fn(a.len(), b.len(), |x, y| r[(a[x], b[y])]);
        let (nc, nd) = (ci.len(), di.len());
        let (cont, q, cond_mean, cond_cov) = if nc > 0 {
            let rcc = Cholesky::new(sub(&ci, &ci)).ok_or_else(|| Error::Numerical("R_cc not positive definite".into()))?;
            let z = DVector::from_vec(zc);
            let w = rcc.solve(&z);
            let q = z.dot(&w);
            let logdet = 2.0 * rcc.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let cont = self.g.log_g(q, nc) - 0.5 * logdet;
            if nd == 0 {
                return Ok(cont);
            }
            let rdc = sub(&di, &ci);
            let mean = &rdc * &w;
            let cov = sub(&di, &di) - &rdc * rcc.solve(&rdc.transpose());
            (cont, q, mean, cov)
        } else {
            (0.0, 0.0, DVector::zeros(nd), sub(&di, &di))
        };
        if nd == 0 {
            return Ok(0.0);
        }
        let l = Cholesky::new(cond_cov).ok_or_else(|| Error::Numerical("conditional covariance not positive definite".into()))?.l();
        let mean: Vec<f64> = cond_mean.iter().copied().collect();
        let mix = mixing_nodes(self.g, q, nc, &self.gh_mix);
        let mut terms = Vec::with_capacity(mix.len());
        if nd <= 2 {
            for &(t, lw) in &mix {
                terms.push(lw + self.log_cond_rect(&l, &mean, &lo, &hi, t));
            }
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0xd1b5_4a32_d192_ed03);
            let pts = PointSet::new(nd - 1, self.cfg.n_qmc.max(2) * 4, 1, &mut rng);
            let lo_c: Vec<f64> = lo.iter().zip(&mean).map(|(a, m)| a - m).collect();
            let hi_c: Vec<f64> = hi.iter().zip(&mean).map(|(b, m)| b - m).collect();
            let mut z = vec![0.0; nd];
            for &(t, lw) in &mix {
                let mut acc = 0.0;
                for i in 0..pts.len() {
                    acc += ghk_point(&l, &lo_c, &hi_c, t, pts.point(i), &mut z);
                }
                let p = acc / pts.len() as f64;
                terms.push(lw + if p > 0.0 { p.ln() } else { f64::NEG_INFINITY });
            }
        }
        Ok(cont + log_sum_exp(&terms))
    }
}

fn build_pattern(f: &IccFactor, k: usize, cmask: u32, dmask: u32) -> Pattern {
    let cidx: Vec<usize> = (0..k).filter(|&i| cmask & (1 << i) != 0).collect();
    let didx: Vec<usize> = (0..k).filter(|&i| dmask & (1 << i) != 0).collect();
    let (nc, nd) = (cidx.len(), didx.len());
    let sub = |m: &DMatrix<f64>, a: &[usize], b: &[usize]| DMatrix::from_fn(a.len(), b.len(), |x, y| m[(a[x], b[y])]);
    let rows = |m: &DMatrix<f64>, a: &[usize]| DMatrix::from_fn(a.len(), m.ncols(), |x, y| m[(a[x], y)]);
    let dcc = sub(&f.d, &cidx, &cidx);
    let (a_c, logdet_dcc) = if nc > 0 {
        let ch = Cholesky::new(dcc).expect("D is positive definite");
        let ld = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        (ch.inverse(), ld)
    } else {
        (DMatrix::zeros(0, 0), 0.0)
    };
    let bc = rows(&f.c, &cidx);
    let bta = bc.transpose() * &a_c;
    let btab = &bta * &bc;
    let ddc = sub(&f.d, &didx, &cidx);
    let g = &ddc * &a_c;
    let h = rows(&f.c, &didx) - &g * &bc;
    let cond = sub(&f.d, &didx, &didx) - &g * ddc.transpose();
    let cond_chol = if nd > 0 { Cholesky::new(cond).expect("conditional covariance is positive definite").l() } else { DMatrix::zeros(0, 0) };
    Pattern { nc, nd, cidx, didx, logdet_dcc, a_c, bta, btab, g, h, cond_chol }
}

/// Orthonormal basis (K × r) of the span of `rows`.
fn row_space_basis(rows: &[DVector<f64>], k: usize) -> DMatrix<f64> {
    if rows.is_empty() {
        return DMatrix::zeros(k, 0);
    }
    let mut gram = DMatrix::<f64>::zeros(k, k);
    for r in rows {
        gram += r * r.transpose();
    }
    let eig = SymmetricEigen::new(gram);
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let mut keep: Vec<usize> = (0..k).filter(|&i| eig.eigenvalues[i] > 1e-14 * top.max(1e-300) && eig.eigenvalues[i] > 1e-300).collect();
    keep.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    DMatrix::from_fn(k, keep.len(), |i, c| eig.eigenvectors[(i, keep[c])])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elliptical::special::norm_cdf;
    use crate::elliptical::EllipticalMV;

    fn coords_from(v: &[(usize, Coord)], len: usize) -> Vec<Coord> {
        let mut out = vec![Coord::Absent; len];
        for (i, c) in v {
            out[*i] = *c;
        }
        out
    }

    #[test]
    fn continuous_only_matches_dense_density() {
        let icc = IccMatrices::exchangeable(2, 0.3, 0.1).unwrap();
        for g in [Generator::Normal, Generator::StudentT { nu: 4.0 }, Generator::Laplace] {
            let ev = LatentEvaluator::new(&icc, g, LatentConfig::default());
            assert!(ev.is_factor());
            let n = 3;
            let pts = [0.3, -1.1, 0.7, 0.2, -0.4, 1.5];
            let coords: Vec<Coord> = pts.iter().map(|&v| Coord::Point(v)).collect();
            let got = ev.log_prob(&coords, n).unwrap();
            // individual-major coords → mediator-major vector
            let x: Vec<f64> = (0..2).flat_map(|kk| (0..n).map(move |j| pts[j * 2 + kk])).collect();
            let want = EllipticalMV::standard(icc.build_r(n).unwrap(), g).unwrap().log_density(&x).unwrap();
            assert!((got - want).abs() < 1e-10 * want.abs().max(1.0), "{g:?}: {got} {want}");
        }
    }

    #[test]
    fn single_interval_is_marginal_probability() {
        let icc = IccMatrices::exchangeable(2, 0.4, 0.2).unwrap();
        let ev = LatentEvaluator::new(&icc, Generator::Normal, LatentConfig::default());
        let coords = coords_from(&[(3, Coord::Interval(f64::NEG_INFINITY, 0.4))], 6);
        let got = ev.log_prob(&coords, 3).unwrap();
        assert!((got - norm_cdf(0.4).ln()).abs() < 1e-12);
    }

    #[test]
    fn factor_and_dense_agree_on_mixed_observations() {
        let icc = IccMatrices::exchangeable(2, 0.1, 0.05).unwrap();
        let inf = f64::INFINITY;
        let coords = vec![
            Coord::Point(0.4),
            Coord::Interval(0.3, inf),
            Coord::Point(-1.2),
            Coord::Interval(-inf, 0.3),
            Coord::Point(0.8),
            Coord::Interval(0.3, inf),
        ];
        for g in [Generator::Normal, Generator::StudentT { nu: 2.0 }] {
            let f = LatentEvaluator::new(&icc, g, LatentConfig::default()).log_prob(&coords, 3).unwrap();
            let d = LatentEvaluator::dense(&icc, g, LatentConfig { n_qmc: 4096, ..LatentConfig::default() }).log_prob(&coords, 3).unwrap();
            assert!((f - d).abs() < 2e-3, "{g:?}: {f} {d}");
        }
    }

    #[test]
    fn two_individual_orthant_matches_quadrivariate_oracle() {
        // All four coordinates binary at N = 2; compare with dense GHK at high precision.
        let icc = IccMatrices::exchangeable(2, 0.5, 0.3).unwrap();
        let inf = f64::INFINITY;
        let coords = vec![Coord::Interval(0.0, inf), Coord::Interval(-inf, 0.5), Coord::Interval(0.0, inf), Coord::Interval(-0.2, inf)];
        let f = LatentEvaluator::new(&icc, Generator::Normal, LatentConfig::default()).log_prob(&coords, 2).unwrap();
        let r = icc.build_r(2).unwrap();
        // mediator-major order: (k1,j1),(k1,j2),(k2,j1),(k2,j2)
        let p = crate::elliptical::rectangle_prob(&r, Generator::Normal, &[0.0, 0.0, -inf, -0.2], &[inf, inf, 0.5, inf], 1 << 16, 3).unwrap();
        assert!((f.exp() - p.estimate).abs() < 3.0 * p.se + 1e-5, "{} {:?}", f.exp(), p);
    }
}
