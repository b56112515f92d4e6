//! Standard errors and confidence intervals.

use rand::RngExt;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::effects::Scale;
use crate::error::{Error, Result};
use crate::rng::{child_seed, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CiMethod {
    EifVariance,
    ClusterBootstrap,
    BootstrapPercentile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiReport {
    pub estimand: String,
    pub point: f64,
    /// On the estimation scale (log scale for ratios).
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
    pub alpha: f64,
    pub method: CiMethod,
    pub replicates: usize,
}

/// Two-sided standard normal critical value z_{1−α/2}.
pub fn z_crit(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(Normal::standard().inverse_cdf(1.0 - alpha / 2.0))
}

/// Wald interval; on ratio scales `se` is the SE of the log ratio and the interval is exponentiated.
pub fn wald_ci(point: f64, se: f64, scale: Scale, alpha: f64) -> Result<CiReport> {
    if !(se >= 0.0) {
        return Err(Error::Domain(format!("standard error must be nonnegative, got {se}")));
    }
    let z = z_crit(alpha)?;
    let (lower, upper) = if scale.is_ratio() {
        if !(point > 0.0) {
            return Err(Error::Domain(format!("ratio-scale interval needs a positive point, got {point}")));
        }
        let l = point.ln();
        ((l - z * se).exp(), (l + z * se).exp())
    } else {
        (point - z * se, point + z * se)
    };
    Ok(CiReport { estimand: String::new(), point, se, lower, upper, alpha, method: CiMethod::EifVariance, replicates: 0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    /// Second moment of the influence function.
    pub v: f64,
    /// sqrt(v / I).
    pub se: f64,
}

/// Empirical second moment of centred per-cluster influence values.
pub fn eif_variance(psi: &[f64]) -> Result<VarianceEstimate> {
    let i = psi.len();
    if i < 2 {
        return Err(Error::Estimation("variance needs at least 2 clusters".into()));
    }
    let v = psi.iter().map(|p| p * p).sum::<f64>() / i as f64;
    Ok(VarianceEstimate { v, se: (v / i as f64).sqrt() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub reps: usize,
    /// Redraws allowed per replicate when a resample misses an arm.
    pub max_redraw: usize,
    pub percentile: bool,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { reps: 100, max_redraw: 100, percentile: false, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// One row per successful replicate, in replicate order.
    pub replicates: Vec<Vec<f64>>,
    pub redraws: usize,
    /// Replicates whose estimator returned an error.
    pub failures: usize,
    /// Message of the first failed replicate.
    pub first_error: Option<String>,
}

impl BootstrapResult {
    pub fn column(&self, c: usize) -> Vec<f64> {
        self.replicates.iter().map(|r| r[c]).collect()
    }

    /// Standard deviation of column `c` across replicates.
    pub fn se(&self, c: usize) -> f64 {
        let x = self.column(c);
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    }

    /// Percentile interval of column `c` on the estimation scale.
    pub fn percentile(&self, c: usize, alpha: f64) -> (f64, f64) {
        let mut x = self.column(c);
        x.sort_by(f64::total_cmp);
        (quantile(&x, alpha / 2.0), quantile(&x, 1.0 - alpha / 2.0))
    }
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Cluster indices for replicate `b`, redrawn until both arms appear.
pub fn resample_indices(data: &Dataset, cfg: &BootstrapConfig, b: usize) -> Result<(Vec<usize>, usize)> {
    let i = data.clusters.len();
    let mut rng = stream_rng(child_seed(cfg.seed, 0xb007), b as u64);
    for attempt in 0..=cfg.max_redraw {
        let idx: Vec<usize> = (0..i).map(|_| rng.random_range(0..i)).collect();
        let treated = idx.iter().filter(|&&c| data.clusters[c].a == 1).count();
        if treated > 0 && treated < i {
            return Ok((idx, attempt));
        }
    }
    Err(Error::Estimation(format!("bootstrap resample {b} missed an arm after {} redraws", cfg.max_redraw)))
}

/// Re-runs `estimator` on `cfg.reps` cluster resamples; the second argument is the replicate index.
pub fn cluster_bootstrap<F>(data: &Dataset, cfg: &BootstrapConfig, estimator: F) -> Result<BootstrapResult>
where
    F: Fn(&Dataset, usize) -> Result<Vec<f64>> + Sync,
{
    if cfg.reps < 2 {
        return Err(Error::Config("bootstrap needs at least 2 replicates".into()));
    }
    let draws: Vec<(Vec<usize>, usize)> = (0..cfg.reps).map(|b| resample_indices(data, cfg, b)).collect::<Result<_>>()?;
    let redraws = draws.iter().map(|(_, r)| r).sum();
    let outs: Vec<Result<Vec<f64>>> = draws.par_iter().enumerate().map(|(b, (idx, _))| estimator(&data.subset(idx), b)).collect();
    let mut replicates = Vec::with_capacity(cfg.reps);
    let mut failures = 0;
    let mut first_error = None;
    for o in outs {
        match o {
            Ok(v) if v.iter().all(|x| x.is_finite()) => replicates.push(v),
            Ok(_) => {
                failures += 1;
                first_error.get_or_insert_with(|| "non-finite estimate".to_string());
            }
            Err(e) => {
                failures += 1;
                first_error.get_or_insert_with(|| e.to_string());
            }
        }
    }
    if replicates.len() < 2 {
        let why = first_error.map_or(String::new(), |e| format!(" (first failure: {e})"));
        return Err(Error::Estimation(format!("only {} of {} bootstrap replicates succeeded{why}", replicates.len(), cfg.reps)));
    }
    Ok(BootstrapResult { replicates, redraws, failures, first_error })
}
