use serde::{Deserialize, Serialize};

use crate::data::ClusterRecord;
use crate::elliptical::special::{expit, norm_cdf};

/// Optional nonlinear covariate substitution applied before building features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovariateTransform {
    #[default]
    Identity,
    /// Ṽ = Φ(V), X̃ = Φ(V₁)·expit(−X/2).
    Distorted,
}

/// Fixed-length individual feature vector built from a cluster.
///
/// Layout: `[A] [N, A·N] [V] [X_j] [X̄_{-j}] [M_j] [M_j products] [M̄_{-j}] [products̄_{-j}] [singleton]`,
/// each block present only when its toggle is on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureMap {
    pub arm: bool,
    pub size: bool,
    pub cluster_covariates: bool,
    pub own_covariates: bool,
    pub loo_covariates: bool,
    pub own_mediators: bool,
    pub own_products: bool,
    pub loo_mediators: bool,
    pub loo_products: bool,
    pub singleton_flag: bool,
    pub transform: CovariateTransform,
}

impl Default for FeatureMap {
    fn default() -> Self {
        FeatureMap {
            arm: true,
            size: true,
            cluster_covariates: true,
            own_covariates: true,
            loo_covariates: false,
            own_mediators: true,
            own_products: true,
            loo_mediators: true,
            loo_products: true,
            singleton_flag: false,
            transform: CovariateTransform::Identity,
        }
    }
}

pub fn n_pairs(k: usize) -> usize {
    k * k.saturating_sub(1) / 2
}

/// Covariate part of a cluster after the configured transform.
#[derive(Debug, Clone)]
pub struct CovContext {
    pub n: usize,
    pub v: Vec<f64>,
    pub x: Vec<f64>,
    pub d_x: usize,
    pub x_sum: Vec<f64>,
}

impl CovContext {
    pub fn new(record: &ClusterRecord, transform: CovariateTransform) -> Self {
        let (v, x) = match transform {
            CovariateTransform::Identity => (record.v.clone(), record.x.clone()),
            CovariateTransform::Distorted => {
                let v: Vec<f64> = record.v.iter().map(|&v| norm_cdf(v)).collect();
                let lead = v.first().copied().unwrap_or(1.0);
                (v, record.x.iter().map(|&x| lead * expit(-x / 2.0)).collect())
            }
        };
        let mut x_sum = vec![0.0; record.d_x];
        for j in 0..record.n {
            for c in 0..record.d_x {
                x_sum[c] += x[j * record.d_x + c];
            }
        }
        CovContext { n: record.n, v, x, d_x: record.d_x, x_sum }
    }
}

impl FeatureMap {
    /// Switches off every mediator block: the design used for mediator marginals.
    pub fn covariates_only(self) -> Self {
        FeatureMap { own_mediators: false, own_products: false, loo_mediators: false, loo_products: false, ..self }
    }

    pub fn uses_mediators(&self) -> bool {
        self.own_mediators || self.own_products || self.loo_mediators || self.loo_products
    }

    pub fn dim(&self, k: usize, d_v: usize, d_x: usize) -> usize {
        let mut d = 0;
        d += usize::from(self.arm);
        d += 2 * usize::from(self.size);
        d += if self.cluster_covariates { d_v } else { 0 };
        d += if self.own_covariates { d_x } else { 0 };
        d += if self.loo_covariates { d_x } else { 0 };
        d += if self.own_mediators { k } else { 0 };
        d += if self.own_products { n_pairs(k) } else { 0 };
        d += if self.loo_mediators { k } else { 0 };
        d += if self.loo_products { n_pairs(k) } else { 0 };
        d + usize::from(self.singleton_flag)
    }

    pub fn names(&self, mediators: &[String], v_names: &[String], x_names: &[String]) -> Vec<String> {
        let k = mediators.len();
        let mut out = Vec::new();
        if self.arm {
            out.push("A".to_string());
        }
        if self.size {
            out.push("N".to_string());
            out.push("A:N".to_string());
        }
        if self.cluster_covariates {
            out.extend(v_names.iter().cloned());
        }
        if self.own_covariates {
            out.extend(x_names.iter().cloned());
        }
        if self.loo_covariates {
            out.extend(x_names.iter().map(|s| format!("loo({s})")));
        }
        let pairs: Vec<String> =
            (0..k).flat_map(|a| ((a + 1)..k).map(move |b| (a, b))).map(|(a, b)| format!("{}:{}", mediators[a], mediators[b])).collect();
        if self.own_mediators {
            out.extend(mediators.iter().cloned());
        }
        if self.own_products {
            out.extend(pairs.iter().cloned());
        }
        if self.loo_mediators {
            out.extend(mediators.iter().map(|s| format!("loo({s})")));
        }
        if self.loo_products {
            out.extend(pairs.iter().map(|s| format!("loo({s})")));
        }
        if self.singleton_flag {
            out.push("singleton".to_string());
        }
        out
    }

    /// Writes the features of individual `j` into `out`, which must have length [`FeatureMap::dim`].
    /// `own` holds the K own mediator values; `loo_m` and `loo_p` the leave-one-out means of the
    /// mediators and of their pairwise products.
    #[allow(clippy::too_many_arguments)]
    pub fn write(&self, ctx: &CovContext, a: f64, j: usize, own: &[f64], loo_m: &[f64], loo_p: &[f64], out: &mut [f64]) {
        let n = ctx.n as f64;
        let mut i = 0;
        let mut push = |v: f64| {
            out[i] = v;
            i += 1;
        };
        if self.arm {
            push(a);
        }
        if self.size {
            push(n);
            push(a * n);
        }
        if self.cluster_covariates {
            for &v in &ctx.v {
                push(v);
            }
        }
        if self.own_covariates {
            for c in 0..ctx.d_x {
                push(ctx.x[j * ctx.d_x + c]);
            }
        }
        if self.loo_covariates {
            for c in 0..ctx.d_x {
                push(if ctx.n > 1 { (ctx.x_sum[c] - ctx.x[j * ctx.d_x + c]) / (n - 1.0) } else { 0.0 });
            }
        }
        let k = own.len();
        if self.own_mediators {
            for &m in own {
                push(m);
            }
        }
        if self.own_products {
            for p in 0..k {
                for q in (p + 1)..k {
                    push(own[p] * own[q]);
                }
            }
        }
        if self.loo_mediators {
            for &m in loo_m {
                push(m);
            }
        }
        if self.loo_products {
            for &m in loo_p {
                push(m);
            }
        }
        if self.singleton_flag {
            push(if ctx.n == 1 { 1.0 } else { 0.0 });
        }
    }
}

/// Cluster sums of a K×N mediator matrix (mediator-major) and of its pairwise products.
#[derive(Debug, Clone, Default)]
pub struct MediatorSums {
    pub m: Vec<f64>,
    pub p: Vec<f64>,
}

impl MediatorSums {
    pub fn new(m: &[f64], k: usize, n: usize) -> Self {
        let mut s = MediatorSums { m: vec![0.0; k], p: vec![0.0; n_pairs(k)] };
        for kk in 0..k {
            s.m[kk] = m[kk * n..(kk + 1) * n].iter().sum();
        }
        let mut idx = 0;
        for a in 0..k {
            for b in (a + 1)..k {
                s.p[idx] = (0..n).map(|j| m[a * n + j] * m[b * n + j]).sum();
                idx += 1;
            }
        }
        s
    }

    /// Leave-one-out means for individual `j` whose own values in the summed matrix are `at_j`.
    pub fn loo(&self, at_j: &[f64], n: usize, loo_m: &mut [f64], loo_p: &mut [f64]) {
        let k = at_j.len();
        if n <= 1 {
            loo_m.iter_mut().for_each(|v| *v = 0.0);
            loo_p.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let d = (n - 1) as f64;
        for kk in 0..k {
            loo_m[kk] = (self.m[kk] - at_j[kk]) / d;
        }
        let mut idx = 0;
        for a in 0..k {
            for b in (a + 1)..k {
                loo_p[idx] = (self.p[idx] - at_j[a] * at_j[b]) / d;
                idx += 1;
            }
        }
    }
}

/// Feature vector of individual `j` at the cluster's observed treatment and mediators.
pub fn build_features(record: &ClusterRecord, j: usize, map: &FeatureMap) -> Vec<f64> {
    build_features_at(record, record.a as f64, &record.m, j, map)
}

/// Feature vector of individual `j` at treatment `a` and mediator matrix `m` (K×N, mediator-major).
pub fn build_features_at(record: &ClusterRecord, a: f64, m: &[f64], j: usize, map: &FeatureMap) -> Vec<f64> {
    let (k, n) = (record.k, record.n);
    let ctx = CovContext::new(record, map.transform);
    let sums = MediatorSums::new(m, k, n);
    let own: Vec<f64> = (0..k).map(|kk| m[kk * n + j]).collect();
    let mut loo_m = vec![0.0; k];
    let mut loo_p = vec![0.0; n_pairs(k)];
    sums.loo(&own, n, &mut loo_m, &mut loo_p);
    let mut out = vec![0.0; map.dim(k, record.v.len(), record.d_x)];
    map.write(&ctx, a, j, &own, &loo_m, &loo_p, &mut out);
    out
}
