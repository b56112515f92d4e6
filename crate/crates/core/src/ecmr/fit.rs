use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::icc::IccMatrices;
use super::latent::{Coord, LatentConfig, LatentEvaluator};
use super::marginal::{fit_marginals, MarginalModel, MarginalSpec};
use super::model::{EcmrModel, DEFAULT_F_MIN};
use crate::data::Dataset;
use crate::elliptical::Generator;
use crate::error::{Error, Result};
use crate::linalg::{bfgs, BfgsOptions};

/// Everything needed to fit an [`EcmrModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EcmrSpec {
    pub marginal: MarginalSpec,
    pub generator: Generator,
    pub latent: LatentConfig,
    pub f_min: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for EcmrSpec {
    fn default() -> Self {
        EcmrSpec {
            marginal: MarginalSpec::default(),
            generator: Generator::Normal,
            latent: LatentConfig::default(),
            f_min: DEFAULT_F_MIN,
            max_iter: 200,
            grad_tol: 1e-5,
        }
    }
}

/// Outcome of the pseudo-likelihood maximization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IccFit {
    pub icc: IccMatrices,
    /// Mean per-cluster log pseudo-likelihood at the optimum.
    pub loglik: f64,
    pub converged: bool,
    pub boundary: bool,
    pub iterations: usize,
    pub evaluations: usize,
    /// Mean log pseudo-likelihood reached from each start.
    pub start_logliks: Vec<f64>,
    pub clipped: usize,
}

/// Fitted model plus the fitting diagnostics.
#[derive(Debug, Clone)]
pub struct EcmrFit {
    pub model: EcmrModel,
    pub icc_fit: IccFit,
}

/// The three default starting points: independence, small positive and small negative association.
pub fn default_starts(k: usize) -> Vec<IccMatrices> {
    let kf = k as f64;
    let pos_q0 = DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { 0.2 });
    let pos_q1 = DMatrix::from_fn(k, k, |i, j| 0.05 * if i == j { 1.0 } else { 0.5 });
    let neg = if k > 1 { -0.2 / (kf - 1.0) } else { 0.0 };
    let neg_q0 = DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { neg });
    let neg_q1 = DMatrix::from_fn(k, k, |i, j| if i == j { 0.05 } else if k > 1 { -0.025 / (kf - 1.0) } else { 0.0 });
    vec![
        IccMatrices { q0: DMatrix::identity(k, k), q1: DMatrix::identity(k, k) * 0.02 },
        IccMatrices { q0: pos_q0, q1: pos_q1 },
        IccMatrices { q0: neg_q0, q1: neg_q1 },
    ]
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Maximizes the mean log pseudo-likelihood Σ_i log ∫_{𝒟̂_i} f / I over the ICC matrices.
/// `starts` defaults to [`default_starts`].
pub fn fit_icc(
    data: &Dataset,
    marginals: &[MarginalModel],
    g: Generator,
    latent: LatentConfig,
    starts: Option<&[IccMatrices]>,
    opts: BfgsOptions,
) -> Result<IccFit> {
    let k = marginals.len();
    if k == 0 {
        return Err(Error::Config("no mediators".into()));
    }
    let probe = EcmrModel::new(marginals.to_vec(), IccMatrices::independence(k), g, latent, 1e-300);
    let mut clipped = 0;
    let mut obs: Vec<(Vec<Coord>, usize)> = Vec::with_capacity(data.clusters.len());
    for c in &data.clusters {
        let (coords, cl) = probe.observed_coords(c)?;
        clipped += cl;
        obs.push((coords, c.n));
    }
    let i = obs.len() as f64;
    let objective = |theta: &[f64]| -> f64 {
        let icc = IccMatrices::from_params(theta, k);
        let ev = LatentEvaluator::new(&icc, g, latent);
        let terms: Vec<f64> = obs.par_iter().map(|(c, n)| ev.log_prob(c, *n).unwrap_or(f64::NEG_INFINITY)).collect();
        -terms.iter().sum::<f64>() / i
    };
    let default;
    let starts = match starts {
        Some(s) => s,
        None => {
            default = default_starts(k);
            &default
        }
    };
    let mut best: Option<(crate::linalg::BfgsResult, Vec<f64>)> = None;
    let mut start_logliks = Vec::new();
    let mut evaluations = 0;
    for s in starts {
        let x0 = match s.to_params() {
            Some(t) => t,
            None => continue,
        };
        let res = bfgs(objective, &x0, opts);
        evaluations += res.evaluations;
        start_logliks.push(-res.f);
        if best.as_ref().is_none_or(|(b, _)| res.f < b.f) {
            best = Some((res, x0));
        }
    }
    let (res, _) = best.ok_or_else(|| Error::Estimation("no valid starting point for the ICC fit".into()))?;
    if !res.f.is_finite() {
        return Err(Error::Numerical("pseudo-likelihood is not finite at any start".into()));
    }
    let icc = IccMatrices::from_params(&res.x, k);
    let boundary = min_eig(&(&icc.q0 - &icc.q1)) < 1e-6 || min_eig(&icc.q0) < 1e-6;
    Ok(IccFit { icc, loglik: -res.f, converged: res.converged, boundary, iterations: res.iterations, evaluations, start_logliks, clipped })
}

/// Fits marginals, then the ICC matrices, and assembles the model.
pub fn fit_ecmr(data: &Dataset, spec: &EcmrSpec) -> Result<EcmrFit> {
    fit_ecmr_from(data, spec, None)
}

/// As [`fit_ecmr`], optimizing from the given starts only.
pub fn fit_ecmr_from(data: &Dataset, spec: &EcmrSpec, starts: Option<&[IccMatrices]>) -> Result<EcmrFit> {
    let marginals = fit_marginals(data, &spec.marginal)?;
    let opts = BfgsOptions { max_iter: spec.max_iter, grad_tol: spec.grad_tol, ..BfgsOptions::default() };
    let icc_fit = fit_icc(data, &marginals, spec.generator, spec.latent, starts, opts)?;
    let model = EcmrModel::new(marginals, icc_fit.icc.clone(), spec.generator, spec.latent, spec.f_min).with_clipped(icc_fit.clipped);
    Ok(EcmrFit { model, icc_fit })
}
