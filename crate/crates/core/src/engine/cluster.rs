use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{EngineConfig, MediatorLaw, Plan, Src};
use crate::data::{ClusterRecord, MediatorKind};
use crate::ecmr::ClusterLocations;
use crate::effects::MediatorSet;
use crate::error::{Error, Result};
use crate::nuisance::features::n_pairs;
use crate::nuisance::MediatorSums;
use crate::rng::{child_seed, stream_rng};

use super::nuisances::NuisanceSet;

/// Largest number of binary cells enumerated by [`MediatorLaw::Exact`].
pub const MAX_EXACT_CELLS: usize = 12;

/// One cluster's share of a functional, before cluster weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClusterContribution {
    /// Within-cluster mean of the g-computation integrand.
    pub plug: f64,
    /// Within-cluster mean of the uncentred influence-function integrand.
    pub num: f64,
    /// Within-cluster mean of I(A = a*)·r·(Y − η).
    pub rnum: f64,
    /// Within-cluster mean of I(A = a*)·r.
    pub rden: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub contribs: Vec<ClusterContribution>,
    /// Density ratios truncated at the cap.
    pub truncated: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct EvalKey {
    a: u8,
    own: Vec<Src>,
    loo: Vec<Src>,
}

impl EvalKey {
    fn uses(&self, s: Src) -> bool {
        self.own.contains(&s) || self.loo.contains(&s)
    }
}

fn rows(k: usize, f: impl Fn(usize) -> Src) -> Vec<Src> {
    (0..k).map(f).collect()
}

fn split(k: usize, set: MediatorSet, inside: Src, outside: Src) -> Vec<Src> {
    rows(k, |kk| if set.contains(kk) { inside } else { outside })
}

struct Keys(Vec<EvalKey>);

impl Keys {
    fn add(&mut self, key: EvalKey) -> usize {
        if let Some(i) = self.0.iter().position(|k| *k == key) {
            return i;
        }
        self.0.push(key);
        self.0.len() - 1
    }

    fn same(&mut self, a: u8, r: Vec<Src>) -> usize {
        self.add(EvalKey { a, own: r.clone(), loo: r })
    }
}

struct PlanKeys {
    main: usize,
    obs: usize,
    tilde: Option<usize>,
    check: Option<usize>,
}

/// Mediator matrices for each arm with their integration weights.
struct Points {
    mats: [Vec<f64>; 2],
    probs: [Vec<f64>; 2],
    paired: bool,
    /// Full joint pmf over binary configurations, per arm (exact law only).
    table: Option<[Vec<f64>; 2]>,
}

impl Points {
    fn count(&self, a: usize) -> usize {
        self.probs[a].len()
    }

    fn schedule(&self, use0: bool, use1: bool) -> Vec<(usize, usize, f64)> {
        if !use0 && !use1 {
            return vec![(0, 0, 1.0)];
        }
        if self.paired {
            let t = self.count(0);
            return (0..t).map(|i| (i, i, self.probs[0][i])).collect();
        }
        let r0: Vec<(usize, f64)> = if use0 { self.probs[0].iter().copied().enumerate().collect() } else { vec![(0, 1.0)] };
        let r1: Vec<(usize, f64)> = if use1 { self.probs[1].iter().copied().enumerate().collect() } else { vec![(0, 1.0)] };
        let mut out = Vec::with_capacity(r0.len() * r1.len());
        for &(i0, p0) in &r0 {
            for &(i1, p1) in &r1 {
                if p0 * p1 > 0.0 {
                    out.push((i0, i1, p0 * p1));
                }
            }
        }
        out
    }
}

fn monte_carlo_points(rec: &ClusterRecord, locs: &ClusterLocations, nuis: &NuisanceSet, n_mc: usize, seed: u64) -> Result<Points> {
    if n_mc == 0 {
        return Err(Error::Config("n_mc must be positive".into()));
    }
    let model = &nuis.ecmr;
    let (n, k) = (rec.n, model.k());
    let dense = if model.factor().is_none() { Some(model.dense_chol(n)?) } else { None };
    let mut rng = stream_rng(seed, 0);
    let mut eps = vec![0.0; k * n];
    let mut mats = [vec![0.0; n_mc * k * n], vec![0.0; n_mc * k * n]];
    for t in 0..n_mc {
        for (a, mat) in mats.iter_mut().enumerate() {
            model.sample_latent(n, dense.as_ref(), &mut rng, &mut eps);
            model.latent_to_mediators(&locs.loc[a], n, &eps, &mut mat[t * k * n..(t + 1) * k * n]);
        }
    }
    let w = 1.0 / n_mc as f64;
    Ok(Points { mats, probs: [vec![w; n_mc], vec![w; n_mc]], paired: true, table: None })
}

fn exact_points(rec: &ClusterRecord, locs: &ClusterLocations, nuis: &NuisanceSet) -> Result<Points> {
    let model = &nuis.ecmr;
    let (n, k) = (rec.n, model.k());
    let cells = k * n;
    if model.marginals.iter().any(|m| m.kind != MediatorKind::Binary) {
        return Err(Error::Config("exact integration requires binary mediators".into()));
    }
    if cells > MAX_EXACT_CELLS {
        return Err(Error::Config(format!("exact integration supports at most {MAX_EXACT_CELLS} mediator cells per cluster, got {cells}")));
    }
    let nc = 1usize << cells;
    let mut mats = vec![0.0; nc * cells];
    for c in 0..nc {
        for cell in 0..cells {
            mats[c * cells + cell] = ((c >> cell) & 1) as f64;
        }
    }
    let mask = vec![true; cells];
    let mut table = [vec![0.0; nc], vec![0.0; nc]];
    for (a, tab) in table.iter_mut().enumerate() {
        for c in 0..nc {
            tab[c] = model.log_density_masked(locs, a as u8, &mats[c * cells..(c + 1) * cells], &mask)?.exp();
        }
        let total: f64 = tab.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Numerical("mediator pmf does not normalize".into()));
        }
        tab.iter_mut().for_each(|p| *p /= total);
    }
    Ok(Points { mats: [mats.clone(), mats], probs: table.clone(), paired: false, table: Some(table) })
}

fn splice(srcs: &[Src], n: usize, obs: &[f64], d0: &[f64], d1: &[f64], out: &mut [f64]) {
    for (kk, s) in srcs.iter().enumerate() {
        let from = match s {
            Src::Obs => obs,
            Src::D0 => d0,
            Src::D1 => d1,
        };
        out[kk * n..(kk + 1) * n].copy_from_slice(&from[kk * n..(kk + 1) * n]);
    }
}

/// Per-individual η averaged over the mediator law of `key`.
fn integrate(key: &EvalKey, rec: &ClusterRecord, nuis: &NuisanceSet, pts: &Points) -> Vec<f64> {
    let (n, k) = (rec.n, rec.k);
    let cells = k * n;
    let outcome = &nuis.outcome;
    let ctx = outcome.context(rec);
    let mut buf = vec![0.0; outcome.dim(rec.v.len(), rec.d_x)];
    let mut p = vec![0.0; cells];
    let mut q = vec![0.0; cells];
    let mut own = vec![0.0; k];
    let mut at_j = vec![0.0; k];
    let mut loo_m = vec![0.0; k];
    let mut loo_p = vec![0.0; n_pairs(k)];
    let same = key.own == key.loo;
    let mut acc = vec![0.0; n];
    let empty: &[f64] = &[];
    for (i0, i1, w) in pts.schedule(key.uses(Src::D0), key.uses(Src::D1)) {
        let d0 = if key.uses(Src::D0) { &pts.mats[0][i0 * cells..(i0 + 1) * cells] } else { empty };
        let d1 = if key.uses(Src::D1) { &pts.mats[1][i1 * cells..(i1 + 1) * cells] } else { empty };
        splice(&key.own, n, &rec.m, d0, d1, &mut p);
        if !same {
            splice(&key.loo, n, &rec.m, d0, d1, &mut q);
        }
        let qm = if same { &p } else { &q };
        let sums = MediatorSums::new(qm, k, n);
        for j in 0..n {
            for kk in 0..k {
                own[kk] = p[kk * n + j];
                at_j[kk] = qm[kk * n + j];
            }
            sums.loo(&at_j, n, &mut loo_m, &mut loo_p);
            acc[j] += w * outcome.eta(&ctx, key.a as f64, j, &own, &loo_m, &loo_p, &mut buf);
        }
    }
    acc
}

/// Log density of the observed mediators restricted to `mask`, cached per (arm, mask).
struct Densities<'a> {
    rec: &'a ClusterRecord,
    nuis: &'a NuisanceSet,
    locs: &'a ClusterLocations,
    table: Option<&'a [Vec<f64>; 2]>,
    cache: HashMap<(u8, Vec<bool>), f64>,
}

impl Densities<'_> {
    fn log_f(&mut self, a: u8, mask: Vec<bool>) -> Result<f64> {
        if let Some(&v) = self.cache.get(&(a, mask.clone())) {
            return Ok(v);
        }
        let v = match self.table {
            None => self.nuis.ecmr.log_density_masked(self.locs, a, &self.rec.m, &mask)?,
            Some(tab) => {
                let mut fixed = 0usize;
                let mut bits = 0usize;
                for (cell, &on) in mask.iter().enumerate() {
                    if on {
                        fixed |= 1 << cell;
                        if self.rec.m[cell] != 0.0 {
                            bits |= 1 << cell;
                        }
                    }
                }
                let s: f64 = tab[a as usize].iter().enumerate().filter(|(c, _)| c & fixed == bits).map(|(_, p)| p).sum();
                s.max(self.nuis.ecmr.f_min).ln()
            }
        };
        self.cache.insert((a, mask), v);
        Ok(v)
    }

    fn rows_mask(&self, set: MediatorSet) -> Vec<bool> {
        let n = self.rec.n;
        (0..self.rec.k * n).map(|c| set.contains(c / n)).collect()
    }
}

/// Evaluates every planned functional on one cluster.
///
/// `pi` is P(A = 1); `stream` selects the cluster's random substream for the Monte Carlo law.
pub fn evaluate_cluster(rec: &ClusterRecord, stream: u64, nuis: &NuisanceSet, plans: &[Plan], pi: f64, cfg: &EngineConfig) -> Result<ClusterResult> {
    let (n, k) = (rec.n, rec.k);
    if nuis.ecmr.k() != k || nuis.outcome.k != k {
        return Err(Error::Config(format!("nuisance models expect K = {}, data has K = {k}", nuis.ecmr.k())));
    }
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::Domain(format!("treatment probability {pi} is not in (0, 1)")));
    }
    let full = MediatorSet::full(k);
    let a_obs = rec.a;
    let mut keys = Keys(Vec::new());
    let obs_rows = rows(k, |_| Src::Obs);
    let plan_keys: Vec<PlanKeys> = plans
        .iter()
        .map(|plan| {
            let main = keys.add(main_key(*plan, k));
            let obs = keys.same(plan.residual_arm(), obs_rows.clone());
            let (tilde, check) = match *plan {
                Plan::SetI { .. } => (None, None),
                Plan::SetII { jstar } => (
                    (a_obs == 0).then(|| keys.same(1, split(k, jstar, Src::Obs, Src::D1))),
                    (a_obs == 1).then(|| keys.same(1, split(k, jstar, Src::D0, Src::Obs))),
                ),
                Plan::Theta2 { k: piv, jstar } => {
                    let wide = jstar.with(piv);
                    let key = |inside: Src, outside: Src| EvalKey { a: 1, own: split(k, jstar, inside, outside), loo: split(k, wide, inside, outside) };
                    ((a_obs == 0).then(|| keys.add(key(Src::Obs, Src::D1))), (a_obs == 1).then(|| keys.add(key(Src::D0, Src::Obs))))
                }
            };
            PlanKeys { main, obs, tilde, check }
        })
        .collect();

    let locs = nuis.ecmr.locations(rec);
    let pts = points(rec, &locs, nuis, stream, cfg)?;
    let vals: Vec<Vec<f64>> = keys.0.iter().map(|key| integrate(key, rec, nuis, &pts)).collect();
    let mut dens = Densities { rec, nuis, locs: &locs, table: pts.table.as_ref(), cache: HashMap::new() };

    let p = [1.0 - pi, pi];
    let nf = n as f64;
    let mut truncated = 0usize;
    let mut contribs = Vec::with_capacity(plans.len());
    for (plan, pk) in plans.iter().zip(&plan_keys) {
        let main = &vals[pk.main];
        let obs = &vals[pk.obs];
        let arm = plan.residual_arm();
        let carries = a_obs == arm;
        let mut ratio = vec![1.0; n];
        if carries {
            match *plan {
                Plan::SetI { a_star, a_med } if a_star != a_med => {
                    let lr = dens.log_f(a_med, vec![true; k * n])? - dens.log_f(a_star, vec![true; k * n])?;
                    ratio.iter_mut().for_each(|r| *r = lr.exp());
                }
                Plan::SetI { .. } => {}
                Plan::SetII { jstar } => {
                    let lr = dens.log_f(0, dens.rows_mask(jstar))? + dens.log_f(1, dens.rows_mask(MediatorSet(full.0 & !jstar.0)))?
                        - dens.log_f(1, vec![true; k * n])?;
                    ratio.iter_mut().for_each(|r| *r = lr.exp());
                }
                Plan::Theta2 { k: piv, jstar } => {
                    let whole = dens.log_f(1, vec![true; k * n])?;
                    for (j, r) in ratio.iter_mut().enumerate() {
                        let u: Vec<bool> = (0..k * n).map(|c| jstar.contains(c / n) || (c / n == piv && c % n != j)).collect();
                        let uc: Vec<bool> = u.iter().map(|b| !b).collect();
                        *r = (dens.log_f(0, u)? + dens.log_f(1, uc)? - whole).exp();
                    }
                }
            }
            for r in ratio.iter_mut() {
                if !r.is_finite() {
                    return Err(Error::Numerical("density ratio is not finite".into()));
                }
                if *r > cfg.ratio_cap {
                    *r = cfg.ratio_cap;
                    truncated += 1;
                }
            }
        }
        let mut c = ClusterContribution::default();
        for j in 0..n {
            let resid = rec.y[j] - obs[j];
            let (num, rn, rd) = match *plan {
                Plan::SetI { a_star, a_med } => {
                    let mut v = main[j];
                    let (mut rn, mut rd) = (0.0, 0.0);
                    if a_obs == a_star {
                        rn = ratio[j] * resid;
                        rd = ratio[j];
                        v += rn / p[a_star as usize];
                    }
                    if a_obs == a_med {
                        v += (obs[j] - main[j]) / p[a_med as usize];
                    }
                    (v, rn, rd)
                }
                _ => {
                    if a_obs == 0 {
                        let tilde = vals[pk.tilde.expect("tilde key for control clusters")][j];
                        (tilde / p[0] + (1.0 - 1.0 / p[0]) * main[j], 0.0, 0.0)
                    } else {
                        let check = vals[pk.check.expect("check key for treated clusters")][j];
                        let rn = ratio[j] * resid;
                        ((1.0 - 1.0 / p[1]) * main[j] + (rn + check) / p[1], rn, ratio[j])
                    }
                }
            };
            c.plug += main[j] / nf;
            c.num += num / nf;
            c.rnum += rn / nf;
            c.rden += rd / nf;
        }
        contribs.push(c);
    }
    Ok(ClusterResult { contribs, truncated })
}

/// Integration law of a functional's g-computation integrand.
fn main_key(plan: Plan, k: usize) -> EvalKey {
    match plan {
        Plan::SetI { a_star, a_med } => {
            let d = if a_med == 0 { Src::D0 } else { Src::D1 };
            let r = rows(k, |_| d);
            EvalKey { a: a_star, own: r.clone(), loo: r }
        }
        Plan::SetII { jstar } => {
            let r = split(k, jstar, Src::D0, Src::D1);
            EvalKey { a: 1, own: r.clone(), loo: r }
        }
        Plan::Theta2 { k: piv, jstar } => EvalKey { a: 1, own: split(k, jstar, Src::D0, Src::D1), loo: split(k, jstar.with(piv), Src::D0, Src::D1) },
    }
}

fn points(rec: &ClusterRecord, locs: &ClusterLocations, nuis: &NuisanceSet, stream: u64, cfg: &EngineConfig) -> Result<Points> {
    match cfg.law {
        MediatorLaw::MonteCarlo { n_mc } => monte_carlo_points(rec, locs, nuis, n_mc, child_seed(cfg.seed, stream)),
        MediatorLaw::Exact => exact_points(rec, locs, nuis),
    }
}

/// Within-cluster means of the g-computation integrands only (no influence-function terms).
pub fn gcomp_cluster(rec: &ClusterRecord, stream: u64, nuis: &NuisanceSet, plans: &[Plan], cfg: &EngineConfig) -> Result<Vec<f64>> {
    let mut keys = Keys(Vec::new());
    let mains: Vec<usize> = plans.iter().map(|p| keys.add(main_key(*p, rec.k))).collect();
    let locs = nuis.ecmr.locations(rec);
    let pts = points(rec, &locs, nuis, stream, cfg)?;
    let vals: Vec<f64> = keys.0.iter().map(|key| integrate(key, rec, nuis, &pts).iter().sum::<f64>() / rec.n as f64).collect();
    Ok(mains.into_iter().map(|i| vals[i]).collect())
}
