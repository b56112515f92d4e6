#![allow(dead_code)]

use crtmed::data::{ClusterRecord, Dataset, MediatorKind, MediatorMeta, Schema, WeightKind};
use crtmed::ecmr::{EcmrModel, IccMatrices, LatentConfig, MarginalModel, DEFAULT_F_MIN};
use crtmed::effects::{default_estimands, EffectSpec, FunctionalRef, MediatorSet, Scale};
use crtmed::elliptical::Generator;
use crtmed::engine::{EngineConfig, MediatorLaw, NuisanceSet, Plan};
use crtmed::nuisance::{FeatureMap, FittedLearner, OutcomeModel};

pub fn schema() -> Schema {
    Schema {
        cluster: "cluster".into(),
        treatment: "A".into(),
        outcome: "Y".into(),
        mediators: vec![
            MediatorMeta { name: "M1".into(), kind: MediatorKind::Binary },
            MediatorMeta { name: "M2".into(), kind: MediatorKind::Binary },
        ],
        cluster_covariates: vec!["V".into()],
        individual_covariates: vec!["X".into()],
    }
}

pub fn record(id: &str, a: u8, v: f64, x: &[f64], m: &[f64], y: &[f64]) -> ClusterRecord {
    ClusterRecord { id: id.into(), a, n: x.len(), v: vec![v], x: x.to_vec(), d_x: 1, m: m.to_vec(), k: 2, y: y.to_vec() }
}

pub fn tiny() -> Dataset {
    let clusters = vec![
        record("c1", 1, 0.4, &[0.3, -1.1], &[1.0, 0.0, 1.0, 1.0], &[1.3, -0.2]),
        record("c2", 0, -0.7, &[0.8, 0.1], &[0.0, 1.0, 0.0, 0.0], &[0.1, 0.9]),
        record("c3", 1, 1.2, &[-0.5], &[0.0, 1.0], &[2.1]),
    ];
    Dataset::new(clusters, schema(), 0.4).unwrap()
}

pub fn binary_marginal(k: usize, beta: [f64; 6]) -> MarginalModel {
    MarginalModel {
        k,
        name: format!("M{}", k + 1),
        kind: MediatorKind::Binary,
        design: FeatureMap::default().covariates_only(),
        learner: FittedLearner::Logistic { beta: beta.to_vec(), se: vec![0.0; 6] },
        residual: None,
        clip: 1e-6,
    }
}

pub fn nuisances(shift: f64) -> NuisanceSet {
    let ecmr = EcmrModel::new(
        vec![binary_marginal(0, [-0.2 + shift, 0.9, 0.1, -0.2, 0.4, 0.3]), binary_marginal(1, [0.3, -0.8 - shift, 0.2, 0.1, -0.3, 0.5])],
        IccMatrices::exchangeable(2, 0.35, 0.2).unwrap(),
        Generator::Normal,
        LatentConfig::default(),
        DEFAULT_F_MIN,
    );
    let beta = vec![0.2, 0.7 + shift, 0.05, -0.1, 0.3, 0.4, 0.8, -0.6, 0.5, -0.9, 0.6, 1.1 - shift];
    let map = FeatureMap::default();
    let names = map.names(&["M1".into(), "M2".into()], &["V".into()], &["X".into()]);
    let outcome = OutcomeModel { map, learner: FittedLearner::Linear { se: vec![0.0; beta.len()], beta, sigma: 1.0 }, names, k: 2 };
    NuisanceSet::new(outcome, ecmr)
}

pub fn all_refs(k: usize) -> Vec<FunctionalRef> {
    let mut refs: Vec<FunctionalRef> = default_estimands(k)
        .into_iter()
        .flat_map(|n| EffectSpec::new(n, k, Scale::Difference, WeightKind::ClusterAverage).unwrap().refs())
        .collect();
    refs.sort();
    refs.dedup();
    refs
}

/// Exhaustive-summation evaluation of every auxiliary integral for one cluster.
pub struct Oracle<'a> {
    pub rec: &'a ClusterRecord,
    pub nuis: &'a NuisanceSet,
    pub cells: usize,
    pub pmf: [Vec<f64>; 2],
    pub shift: f64,
}

impl<'a> Oracle<'a> {
    pub fn new(rec: &'a ClusterRecord, nuis: &'a NuisanceSet) -> Self {
        let cells = 2 * rec.n;
        let locs = nuis.ecmr.locations(rec);
        let pmf = [0u8, 1].map(|a| {
            let raw: Vec<f64> = (0..1usize << cells)
                .map(|c| nuis.ecmr.log_density_masked(&locs, a, &Self::config(cells, c), &vec![true; cells]).unwrap().exp())
                .collect();
            let tot: f64 = raw.iter().sum();
            raw.into_iter().map(|p| p / tot).collect()
        });
        Oracle { rec, nuis, cells, pmf, shift: 0.0 }
    }

    pub fn config(cells: usize, c: usize) -> Vec<f64> {
        (0..cells).map(|i| ((c >> i) & 1) as f64).collect()
    }

    pub fn eta(&self, a: u8, m: &[f64], j: usize) -> f64 {
        self.nuis.outcome.predict_eta(a, m, self.rec, j) + self.shift
    }

    /// Marginal probability under arm `a` that the cells in `mask` equal `m` there.
    pub fn marg(&self, a: usize, mask: &[bool], m: &[f64]) -> f64 {
        if !mask.iter().any(|&b| b) {
            return 1.0;
        }
        (0..1usize << self.cells)
            .filter(|&c| {
                let cfg = Self::config(self.cells, c);
                (0..self.cells).all(|i| !mask[i] || cfg[i] == m[i])
            })
            .map(|c| self.pmf[a][c])
            .sum()
    }

    /// ∫ η_j(a, m) with cells in `fixed` at their observed values, `u0` drawn under arm 0 and `u1` under arm 1.
    pub fn integral(&self, a: u8, j: usize, fixed: &[bool], u0: &[bool], u1: &[bool]) -> f64 {
        let mut s = 0.0;
        for c in 0..1usize << self.cells {
            let cfg = Self::config(self.cells, c);
            if (0..self.cells).any(|i| fixed[i] && cfg[i] != self.rec.m[i]) {
                continue;
            }
            s += self.marg(0, u0, &cfg) * self.marg(1, u1, &cfg) * self.eta(a, &cfg, j);
        }
        s
    }

    pub fn rows(&self, set: MediatorSet) -> Vec<bool> {
        (0..self.cells).map(|c| set.contains(c / self.rec.n)).collect()
    }

    pub fn not(mask: &[bool]) -> Vec<bool> {
        mask.iter().map(|b| !b).collect()
    }

    /// (plug, num, rnum, rden) for one functional.
    pub fn contribution(&self, plan: Plan, pi: f64, cap: f64) -> [f64; 4] {
        let n = self.rec.n;
        let none = vec![false; self.cells];
        let all = vec![true; self.cells];
        let p = [1.0 - pi, pi];
        let a = self.rec.a;
        let obs = &self.rec.m;
        let full1 = self.marg(1, &all, obs);
        let mut out = [0.0; 4];
        for j in 0..n {
            let resid = self.rec.y[j] - self.eta(if let Plan::SetI { a_star, .. } = plan { a_star } else { 1 }, obs, j);
            let (main, num, rn, rd) = match plan {
                Plan::SetI { a_star, a_med } => {
                    let (u0, u1) = if a_med == 0 { (&all, &none) } else { (&none, &all) };
                    let star = self.integral(a_star, j, &none, u0, u1);
                    let ratio = (self.marg(a_med as usize, &all, obs) / self.marg(a_star as usize, &all, obs)).min(cap);
                    let ia = f64::from(a == a_star);
                    let ib = f64::from(a == a_med);
                    let eta_obs = self.eta(a_star, obs, j);
                    let num = ia / p[a_star as usize] * ratio * resid + ib / p[a_med as usize] * (eta_obs - star) + star;
                    (star, num, ia * ratio * resid, ia * ratio)
                }
                Plan::SetII { jstar } => {
                    let u = self.rows(jstar);
                    let uc = Self::not(&u);
                    let ratio = (self.marg(0, &u, obs) * self.marg(1, &uc, obs) / full1).min(cap);
                    self.two_arm(j, &u, &uc, ratio, resid, p)
                }
                Plan::Theta2 { k, jstar } => {
                    let u: Vec<bool> = (0..self.cells).map(|c| jstar.contains(c / n) || (c / n == k && c % n != j)).collect();
                    let uc = Self::not(&u);
                    let ratio = (self.marg(0, &u, obs) * self.marg(1, &uc, obs) / full1).min(cap);
                    self.two_arm(j, &u, &uc, ratio, resid, p)
                }
            };
            for (o, v) in out.iter_mut().zip([main, num, rn, rd]) {
                *o += v / n as f64;
            }
        }
        out
    }

    pub fn two_arm(&self, j: usize, u: &[bool], uc: &[bool], ratio: f64, resid: f64, p: [f64; 2]) -> (f64, f64, f64, f64) {
        let none = vec![false; self.cells];
        let main = self.integral(1, j, &none, u, uc);
        let i0 = f64::from(self.rec.a == 0);
        let i1 = f64::from(self.rec.a == 1);
        let tilde = if i0 > 0.0 { self.integral(1, j, u, &none, uc) } else { 0.0 };
        let check = if i1 > 0.0 { self.integral(1, j, uc, u, &none) } else { 0.0 };
        let num = i0 / p[0] * tilde + (1.0 - i0 / p[0] - i1 / p[1]) * main + i1 / p[1] * (ratio * resid + check);
        (main, num, i1 * ratio * resid, i1 * ratio)
    }
}

pub fn exact_cfg() -> EngineConfig {
    EngineConfig { law: MediatorLaw::Exact, ..EngineConfig::default() }
}

pub fn hajek(values: &[f64], w: &[f64]) -> f64 {
    values.iter().zip(w).map(|(v, w)| v * w).sum::<f64>() / w.iter().sum::<f64>()
}
