use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::icc::{IccFactor, IccMatrices};
use super::latent::{Coord, LatentConfig, LatentEvaluator};
use super::marginal::MarginalModel;
use crate::data::{ClusterRecord, MediatorKind};
use crate::elliptical::Generator;
use crate::error::{Error, Result};
use crate::nuisance::features::CovContext;

/// Floor on subset densities; joint densities of many continuous cells are legitimately tiny.
pub const DEFAULT_F_MIN: f64 = 1e-100;

/// Fitted marginals joined by an elliptical copula with exchangeable cluster structure.
#[derive(Serialize, Deserialize)]
pub struct EcmrModel {
    pub marginals: Vec<MarginalModel>,
    pub icc: IccMatrices,
    pub generator: Generator,
    #[serde(default)]
    pub latent: LatentConfig,
    pub f_min: f64,
    /// Number of observed continuous values whose F̂ fell outside [δ, 1−δ] at fit time.
    #[serde(default)]
    pub clipped: usize,
    #[serde(skip)]
    evaluator: OnceLock<LatentEvaluator>,
    #[serde(skip)]
    factor: OnceLock<Option<IccFactor>>,
}

impl Clone for EcmrModel {
    fn clone(&self) -> Self {
        EcmrModel::new(self.marginals.clone(), self.icc.clone(), self.generator, self.latent, self.f_min).with_clipped(self.clipped)
    }
}

impl std::fmt::Debug for EcmrModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EcmrModel").field("k", &self.k()).field("icc", &self.icc).field("generator", &self.generator).finish()
    }
}

/// Per-cluster marginal locations under each arm, `loc[a][k * n + j]`.
#[derive(Debug, Clone)]
pub struct ClusterLocations {
    pub n: usize,
    pub loc: [Vec<f64>; 2],
}

impl EcmrModel {
    pub fn new(marginals: Vec<MarginalModel>, icc: IccMatrices, generator: Generator, latent: LatentConfig, f_min: f64) -> Self {
        EcmrModel { marginals, icc, generator, latent, f_min, clipped: 0, evaluator: OnceLock::new(), factor: OnceLock::new() }
    }

    pub fn with_clipped(mut self, clipped: usize) -> Self {
        self.clipped = clipped;
        self
    }

    pub fn k(&self) -> usize {
        self.marginals.len()
    }

    pub fn evaluator(&self) -> &LatentEvaluator {
        self.evaluator.get_or_init(|| LatentEvaluator::new(&self.icc, self.generator, self.latent))
    }

    pub fn locations(&self, record: &ClusterRecord) -> ClusterLocations {
        let n = record.n;
        let k = self.k();
        let mut buf = Vec::new();
        let mut ctxs: Vec<(crate::nuisance::CovariateTransform, CovContext)> = Vec::new();
        let loc = [0u8, 1].map(|a| {
            let mut out = vec![0.0; k * n];
            for (kk, mm) in self.marginals.iter().enumerate() {
                let t = mm.design.transform;
                if !ctxs.iter().any(|(tt, _)| *tt == t) {
                    ctxs.push((t, CovContext::new(record, t)));
                }
                let ctx = &ctxs.iter().find(|(tt, _)| *tt == t).unwrap().1;
                for j in 0..n {
                    out[kk * n + j] = mm.location(ctx, a as f64, j, &mut buf);
                }
            }
            out
        });
        ClusterLocations { n, loc }
    }

    /// Latent coordinates and the continuous-margin log Jacobian for the (k, j) cells with `mask[k * n + j]`.
    fn latent_coords(&self, loc: &[f64], n: usize, m: &[f64], mask: &[bool]) -> Result<(Vec<Coord>, f64)> {
        let k = self.k();
        let g = self.generator;
        let mut coords = vec![Coord::Absent; n * k];
        let mut jac = 0.0;
        for (kk, mm) in self.marginals.iter().enumerate() {
            for j in 0..n {
                let c = kk * n + j;
                if !mask[c] {
                    continue;
                }
                let b = mm.pit_bounds_at(g, m[c], loc[c])?;
                coords[j * k + kk] = match mm.kind {
                    MediatorKind::Continuous => {
                        jac += mm.log_mass(m[c], loc[c]) - g.log_pdf_1d(b.lower);
                        Coord::Point(b.lower)
                    }
                    MediatorKind::Binary => Coord::Interval(b.lower, b.upper),
                };
            }
        }
        Ok((coords, jac))
    }

    /// Log density of the mediator cells selected by `mask` (layout `k * n + j`) under arm `a`, floored at `f_min`.
    pub fn log_density_masked(&self, locs: &ClusterLocations, a: u8, m: &[f64], mask: &[bool]) -> Result<f64> {
        let n = locs.n;
        if !mask.iter().any(|&b| b) {
            return Ok(0.0);
        }
        let (coords, jac) = self.latent_coords(&locs.loc[a as usize], n, m, mask)?;
        let lp = self.evaluator().log_prob(&coords, n)? + jac;
        Ok(lp.max(self.f_min.ln()))
    }

    /// Log density of the cells `s = [(k, j), ...]` taking values `m_s`.
    pub fn subset_log_density(&self, s: &[(usize, usize)], m_s: &[f64], a: u8, record: &ClusterRecord) -> Result<f64> {
        if s.is_empty() {
            return Err(Error::Domain("empty mediator subset".into()));
        }
        if s.len() != m_s.len() {
            return Err(Error::Domain("subset and values differ in length".into()));
        }
        let n = record.n;
        let k = self.k();
        let mut m = vec![0.0; k * n];
        let mut mask = vec![false; k * n];
        for (&(kk, j), &v) in s.iter().zip(m_s) {
            if kk >= k || j >= n {
                return Err(Error::Domain(format!("cell ({kk}, {j}) is outside the cluster")));
            }
            m[kk * n + j] = v;
            mask[kk * n + j] = true;
        }
        self.log_density_masked(&self.locations(record), a, &m, &mask)
    }

    /// Latent pseudo-observations of one observed cluster, j-major.
    pub fn observed_coords(&self, record: &ClusterRecord) -> Result<(Vec<Coord>, usize)> {
        let locs = self.locations(record);
        let n = record.n;
        let loc = &locs.loc[record.a as usize];
        let mut clipped = 0;
        for (kk, mm) in self.marginals.iter().enumerate() {
            if mm.kind == MediatorKind::Continuous {
                for j in 0..n {
                    clipped += mm.pit_bounds_at(self.generator, record.m[kk * n + j], loc[kk * n + j])?.clipped as usize;
                }
            }
        }
        let (coords, _) = self.latent_coords(loc, n, &record.m, &vec![true; self.k() * n])?;
        Ok((coords, clipped))
    }

    /// Lower Cholesky factor of R(𝒬) at size n, used when Q1 has no factor form.
    pub fn dense_chol(&self, n: usize) -> Result<DMatrix<f64>> {
        let r = self.icc.build_r(n)?;
        Ok(Cholesky::new(r).ok_or_else(|| Error::Domain(format!("R(Q) is not positive definite at N = {n}")))?.l())
    }

    pub fn factor(&self) -> Option<&IccFactor> {
        self.factor.get_or_init(|| self.icc.factor()).as_ref()
    }

    /// One latent draw ε (layout `k * n + j`); `dense` is the factor from [`EcmrModel::dense_chol`] when Q1 is indefinite.
    pub fn sample_latent<R: Rng + ?Sized>(&self, n: usize, dense: Option<&DMatrix<f64>>, rng: &mut R, out: &mut [f64]) {
        let k = self.k();
        let w = self.generator.sample_mixing(rng).sqrt();
        if let Some(f) = self.factor() {
            let xi: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
            let shared: Vec<f64> = (0..k).map(|r| (0..k).map(|c| f.c[(r, c)] * xi[c]).sum()).collect();
            let mut d = vec![0.0; k];
            for j in 0..n {
                for v in d.iter_mut() {
                    *v = StandardNormal.sample(rng);
                }
                for r in 0..k {
                    let own: f64 = (0..=r).map(|c| f.d_chol[(r, c)] * d[c]).sum();
                    out[r * n + j] = w * (shared[r] + own);
                }
            }
            return;
        }
        let l = dense.expect("dense Cholesky factor required when Q1 is indefinite");
        let z: Vec<f64> = (0..n * k).map(|_| StandardNormal.sample(rng)).collect();
        for r in 0..n * k {
            out[r] = w * (0..=r).map(|c| l[(r, c)] * z[c]).sum::<f64>();
        }
    }

    /// Maps a latent draw to mediator values under the marginal locations `loc` (layout `k * n + j`).
    pub fn latent_to_mediators(&self, loc: &[f64], n: usize, eps: &[f64], out: &mut [f64]) {
        let g = self.generator;
        for (kk, mm) in self.marginals.iter().enumerate() {
            for j in 0..n {
                let c = kk * n + j;
                out[c] = match mm.kind {
                    MediatorKind::Binary => f64::from(g.sf_1d(eps[c]) < loc[c]),
                    MediatorKind::Continuous => {
                        let u = g.cdf_1d(eps[c]).clamp(mm.clip, 1.0 - mm.clip);
                        mm.quantile(u, loc[c])
                    }
                };
            }
        }
    }

    /// `n_draws` mediator matrices (layout `k * n + j`) under arm `a` for the cluster's covariates.
    pub fn sample_mediators<R: Rng + ?Sized>(&self, a: u8, record: &ClusterRecord, n_draws: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        let n = record.n;
        let k = self.k();
        let locs = self.locations(record);
        let dense = if self.factor().is_none() { Some(self.dense_chol(n)?) } else { None };
        let mut eps = vec![0.0; k * n];
        Ok((0..n_draws)
            .map(|_| {
                self.sample_latent(n, dense.as_ref(), rng, &mut eps);
                let mut m = vec![0.0; k * n];
                self.latent_to_mediators(&locs.loc[a as usize], n, &eps, &mut m);
                m
            })
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: EcmrModel = serde_json::from_str(s)?;
        m.icc.validate(1)?;
        Ok(m)
    }
}
