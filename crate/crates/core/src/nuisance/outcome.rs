use serde::{Deserialize, Serialize};

use super::features::{build_features_at, n_pairs, CovContext, FeatureMap};
use super::learners::{fit_learner, Design, FittedLearner, LearnerSpec};
use crate::data::{ClusterRecord, Dataset};
use crate::error::{Error, Result};

/// Fitted individual outcome mean η(a, ξ(M), ξ*(X), V, N).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub map: FeatureMap,
    pub learner: FittedLearner,
    pub names: Vec<String>,
    pub k: usize,
}

fn feature_names(data: &Dataset, map: &FeatureMap) -> Vec<String> {
    let s = &data.schema;
    let meds: Vec<String> = s.mediators.iter().map(|m| m.name.clone()).collect();
    map.names(&meds, &s.cluster_covariates, &s.individual_covariates)
}

/// Individual-level design over all clusters.
pub fn outcome_design(data: &Dataset, map: &FeatureMap) -> Design {
    let names = feature_names(data, map);
    let p = names.len();
    let mut x = Vec::with_capacity(data.n_individuals() * p);
    let mut y = Vec::with_capacity(data.n_individuals());
    let mut group = Vec::with_capacity(data.n_individuals());
    for (ci, c) in data.clusters.iter().enumerate() {
        for j in 0..c.n {
            x.extend(build_features_at(c, c.a as f64, &c.m, j, map));
            y.push(c.y[j]);
            group.push(ci);
        }
    }
    Design { x, p, y, group, names }
}

/// Pooled fit of Y on (A, features); the singleton indicator is added when any cluster has N = 1.
pub fn fit_outcome(data: &Dataset, map: &FeatureMap, learner: &LearnerSpec) -> Result<OutcomeModel> {
    if learner.tunes_itself() {
        for arm in 0..2u8 {
            if data.clusters.iter().filter(|c| c.a == arm).count() < 2 {
                return Err(Error::Data(format!("tuned learner needs at least 2 clusters in arm {arm}")));
            }
        }
    }
    let mut map = *map;
    map.singleton_flag = data.clusters.iter().any(|c| c.n == 1);
    let design = outcome_design(data, &map);
    let binary = data.clusters.iter().all(|c| c.y.iter().all(|&v| v == 0.0 || v == 1.0));
    let binary = binary && !matches!(learner, LearnerSpec::Linear);
    let fitted = fit_learner(learner, &design, binary)?;
    Ok(OutcomeModel { map, learner: fitted, names: design.names, k: data.k() })
}

impl OutcomeModel {
    pub fn dim(&self, d_v: usize, d_x: usize) -> usize {
        self.map.dim(self.k, d_v, d_x)
    }

    /// η for individual `j` of `record` at treatment `a` and mediator matrix `m` (K×N, mediator-major).
    pub fn predict_eta(&self, a: u8, m: &[f64], record: &ClusterRecord, j: usize) -> f64 {
        self.learner.predict(&build_features_at(record, a as f64, m, j, &self.map))
    }

    /// Fast evaluation from precomputed covariate context and leave-one-out summaries.
    #[allow(clippy::too_many_arguments)]
    #[inline]
    pub fn eta(&self, ctx: &CovContext, a: f64, j: usize, own: &[f64], loo_m: &[f64], loo_p: &[f64], buf: &mut [f64]) -> f64 {
        self.map.write(ctx, a, j, own, loo_m, loo_p, buf);
        self.learner.predict(buf)
    }

    pub fn context(&self, record: &ClusterRecord) -> CovContext {
        CovContext::new(record, self.map.transform)
    }

    pub fn n_pairs(&self) -> usize {
        n_pairs(self.k)
    }
}

/// Predicts the observed-data fitted values, one vector per cluster.
pub fn fitted_values(model: &OutcomeModel, data: &Dataset) -> Vec<Vec<f64>> {
    data.clusters.iter().map(|c| (0..c.n).map(|j| model.predict_eta(c.a, &c.m, c, j)).collect()).collect()
}
