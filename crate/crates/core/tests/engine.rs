mod common;

use common::{all_refs, exact_cfg, hajek, nuisances, tiny, Oracle};

use std::collections::BTreeMap;

use crtmed::data::WeightKind;
use crtmed::effects::{EffectName, EffectSpec, FunctionalRef, MediatorSet, Scale};
use crtmed::engine::{
    aggregate, contributions, estimate, evaluate_cluster, stabilize, AnalysisConfig, Contributions, EngineConfig, MediatorLaw, NuisanceSet,
    Plan, Variant,
};
use crtmed::inference::BootstrapConfig;
use crtmed::nuisance::FittedLearner;
use crtmed::sim::{DgpParams, TrialGenerator};

#[test]
fn contributions_match_exhaustive_enumeration() {
    let ds = tiny();
    let nuis = nuisances(0.0);
    let refs = all_refs(2);
    for cap in [50.0, 1.5] {
        let cfg = EngineConfig { ratio_cap: cap, ..exact_cfg() };
        let c = contributions(&ds, &nuis, &refs, &cfg).unwrap();
        for (ci, rec) in ds.clusters.iter().enumerate() {
            let o = Oracle::new(rec, &nuis);
            for (r, plan) in c.plans.iter().enumerate() {
                let want = o.contribution(*plan, 0.4, cap);
                let got = c.clusters[ci].contribs[r];
                for (g, w) in [got.plug, got.num, got.rnum, got.rden].iter().zip(want) {
                    assert!((g - w).abs() < 1e-8, "cluster {ci} {} cap {cap}: {g} vs {w}", refs[r].label(2));
                }
            }
        }
        if cap < 2.0 {
            assert!(c.truncated() > 0);
        }
    }
}

#[test]
fn estimates_match_exhaustive_enumeration() {
    let ds = tiny();
    let nuis = nuisances(0.0);
    let refs = all_refs(2);
    let c = contributions(&ds, &nuis, &refs, &exact_cfg()).unwrap();
    for kind in [WeightKind::ClusterAverage, WeightKind::IndividualAverage] {
        let w: Vec<f64> = ds.clusters.iter().map(|c| if kind == WeightKind::ClusterAverage { 1.0 } else { c.n as f64 }).collect();
        let g = aggregate(&c, kind, Variant::G).unwrap();
        let par = aggregate(&c, kind, Variant::Par).unwrap();
        let pars = aggregate(&c, kind, Variant::ParS).unwrap();
        for (r, plan) in c.plans.iter().enumerate() {
            let mut oracles: Vec<Oracle> = ds.clusters.iter().map(|rec| Oracle::new(rec, &nuis)).collect();
            let base: Vec<[f64; 4]> = oracles.iter().map(|o| o.contribution(*plan, 0.4, 50.0)).collect();
            let plug: Vec<f64> = base.iter().map(|b| b[0]).collect();
            let num: Vec<f64> = base.iter().map(|b| b[1]).collect();
            let label = refs[r].label(2);
            assert!((g[&refs[r]].value - hajek(&plug, &w)).abs() < 1e-8, "G {label}");
            assert!((par[&refs[r]].value - hajek(&num, &w)).abs() < 1e-8, "PAR {label}");
            // stabilized: shift η by the WLS intercept and re-evaluate every term
            let want = if matches!(plan, Plan::SetI { .. }) {
                hajek(&num, &w)
            } else {
                let rn: f64 = base.iter().zip(&w).map(|(b, w)| b[2] * w).sum();
                let rd: f64 = base.iter().zip(&w).map(|(b, w)| b[3] * w).sum();
                let beta = rn / rd;
                let shifted: Vec<f64> = oracles
                    .iter_mut()
                    .map(|o| {
                        o.shift = beta;
                        o.contribution(*plan, 0.4, 50.0)[1]
                    })
                    .collect();
                let resid: f64 = oracles.iter().zip(&w).map(|(o, w)| w * o.contribution(*plan, 0.4, 50.0)[2]).sum();
                assert!(resid.abs() < 1e-8, "stabilized residual sum {resid}");
                hajek(&shifted, &w)
            };
            assert!((pars[&refs[r]].value - want).abs() < 1e-8, "PAR.S {label}: {} vs {want}", pars[&refs[r]].value);
        }
    }
}

#[test]
fn cross_fitted_aggregation_matches_enumeration() {
    let ds = tiny();
    let refs = all_refs(2);
    let plans: Vec<Plan> = refs.iter().map(|&r| Plan::of(r, 2).unwrap()).collect();
    let folds = [0usize, 0, 1];
    let sets = [nuisances(0.0), nuisances(0.3)];
    let cfg = exact_cfg();
    let clusters = ds.clusters.iter().enumerate().map(|(i, rec)| evaluate_cluster(rec, i as u64, &sets[folds[i]], &plans, 0.4, &cfg).unwrap()).collect();
    let c = Contributions { refs: refs.clone(), plans: plans.clone(), clusters, fold: folds.to_vec(), n_folds: 2, sizes: vec![2, 2, 1], p: [0.6, 0.4] };
    let dml = aggregate(&c, WeightKind::ClusterAverage, Variant::Dml).unwrap();
    let dmls = aggregate(&c, WeightKind::ClusterAverage, Variant::DmlS).unwrap();
    for (r, plan) in plans.iter().enumerate() {
        let num: Vec<f64> = ds.clusters.iter().enumerate().map(|(i, rec)| Oracle::new(rec, &sets[folds[i]]).contribution(*plan, 0.4, 50.0)[1]).collect();
        let want = (2.0 * (num[0] + num[1]) / 2.0 + num[2]) / 3.0;
        assert!((dml[&refs[r]].value - want).abs() < 1e-8, "{}", refs[r].label(2));
        let mut stab = Vec::new();
        for (members, nuis) in [(vec![0usize, 1], &sets[0]), (vec![2], &sets[1])] {
            let mut os: Vec<Oracle> = members.iter().map(|&i| Oracle::new(&ds.clusters[i], nuis)).collect();
            if matches!(plan, Plan::SetI { .. }) {
                stab.extend(os.iter().map(|o| o.contribution(*plan, 0.4, 50.0)[1]));
                continue;
            }
            let base: Vec<[f64; 4]> = os.iter().map(|o| o.contribution(*plan, 0.4, 50.0)).collect();
            let beta = base.iter().map(|b| b[2]).sum::<f64>() / base.iter().map(|b| b[3]).sum::<f64>();
            for o in os.iter_mut() {
                o.shift = beta;
                stab.push(o.contribution(*plan, 0.4, 50.0)[1]);
            }
        }
        let want_s = ((stab[0] + stab[1]) + stab[2]) / 3.0;
        assert!((dmls[&refs[r]].value - want_s).abs() < 1e-8, "DML.S {}", refs[r].label(2));
    }
}

#[test]
fn effects_share_functionals_and_satisfy_identities() {
    let ds = tiny();
    let nuis = nuisances(0.0);
    let refs = all_refs(2);
    let c = contributions(&ds, &nuis, &refs, &exact_cfg()).unwrap();
    for v in [Variant::G, Variant::Par, Variant::ParS] {
        let agg = aggregate(&c, WeightKind::ClusterAverage, v).unwrap();
        let vals: BTreeMap<FunctionalRef, f64> = agg.iter().map(|(r, a)| (*r, a.value)).collect();
        let eff = |n: EffectName| EffectSpec::new(n, 2, Scale::Difference, WeightKind::ClusterAverage).unwrap().combine(&vals).unwrap();
        let full = MediatorSet::full(2);
        let te = eff(EffectName::Te);
        let nde = eff(EffectName::Nde);
        let nie = eff(EffectName::Nie);
        assert!((te - nde - nie).abs() <= 1e-10 * te.abs().max(1.0));
        let ints = eff(EffectName::Eie(0)) + eff(EffectName::Eie(1)) - eff(EffectName::Int(full));
        assert!((nie - ints).abs() <= 1e-10 * nie.abs().max(1.0));
    }
}

#[test]
fn one_step_is_plug_in_plus_mean_correction() {
    let ds = tiny();
    let nuis = nuisances(0.0);
    let refs = all_refs(2);
    let c = contributions(&ds, &nuis, &refs, &exact_cfg()).unwrap();
    let g = aggregate(&c, WeightKind::IndividualAverage, Variant::G).unwrap();
    let par = aggregate(&c, WeightKind::IndividualAverage, Variant::Par).unwrap();
    let w = [2.0, 2.0, 1.0];
    for (r, fr) in refs.iter().enumerate() {
        let corr: f64 = (0..3).map(|i| w[i] * (c.clusters[i].contribs[r].num - c.clusters[i].contribs[r].plug)).sum::<f64>() / 5.0;
        assert!((par[fr].value - (g[fr].value + corr)).abs() < 1e-12);
        let mean_psi: f64 = par[fr].psi.iter().sum::<f64>() / 3.0;
        assert!(mean_psi.abs() < 1e-12);
    }
}

#[test]
fn half_randomization_centring_factor_is_minus_one() {
    // with π = 1/2, 1 − I(A=0)/P0 − I(A=1)/P1 = −1; so for a treated cluster num = −τ + 2(r(Y−η) + τ̌)
    let ds = tiny();
    let nuis = nuisances(0.0);
    let refs = vec![FunctionalRef::theta1(1, MediatorSet::from_indices(&[0]))];
    let plans = [Plan::of(refs[0], 2).unwrap()];
    let cfg = exact_cfg();
    let rec = &ds.clusters[0];
    let got = evaluate_cluster(rec, 0, &nuis, &plans, 0.5, &cfg).unwrap().contribs[0];
    let o = Oracle::new(rec, &nuis);
    let want = o.contribution(plans[0], 0.5, 50.0);
    assert!((got.num - want[1]).abs() < 1e-10);
    let check_mean = (got.num + got.plug) / 2.0 - got.rnum;
    let u = o.rows(MediatorSet::from_indices(&[0]));
    let direct: f64 = (0..rec.n).map(|j| o.integral(1, j, &Oracle::not(&u), &u, &vec![false; 4])).sum::<f64>() / 2.0;
    assert!((check_mean - direct).abs() < 1e-10);
}

#[test]
fn stabilization_examples() {
    let resid = [0.3, -0.1, 0.7, 0.2];
    let ones = [1.0; 4];
    let beta = stabilize(&resid, &ones, &ones).unwrap();
    assert!((beta - 0.275).abs() < 1e-15);
    assert_eq!(stabilize(&[0.0; 4], &[0.5, 1.0, 2.0, 0.1], &ones).unwrap(), 0.0);
    let rn = [0.3, -0.4, 1.2];
    let rd = [0.5, 1.5, 2.0];
    let w = [1.0, 3.0, 2.0];
    let b = stabilize(&rn, &rd, &w).unwrap();
    let sum: f64 = (0..3).map(|i| w[i] * (rn[i] - b * rd[i])).sum();
    assert!(sum.abs() < 1e-12);
    assert!(stabilize(&rn, &[0.0; 3], &w).is_err());
}

fn mc_cfg(n_mc: usize, seed: u64) -> EngineConfig {
    EngineConfig { law: MediatorLaw::MonteCarlo { n_mc }, seed, ..EngineConfig::default() }
}

#[test]
fn mediator_free_outcome_has_zero_indirect_effect() {
    let gen = TrialGenerator::new(DgpParams::default());
    let ds = gen.dataset(20, 4).unwrap();
    let mut outcome = gen.outcome().clone();
    if let FittedLearner::Linear { beta, .. } = &mut outcome.learner {
        for b in beta.iter_mut().skip(6) {
            *b = 0.0;
        }
    }
    let nuis = NuisanceSet::new(outcome, gen.ecmr().clone());
    let spec = EffectSpec::new(EffectName::Nie, 2, Scale::Difference, WeightKind::ClusterAverage).unwrap();
    let c = contributions(&ds, &nuis, &all_refs(2), &mc_cfg(64, 1)).unwrap();
    let g = aggregate(&c, WeightKind::ClusterAverage, Variant::G).unwrap();
    let vals: BTreeMap<FunctionalRef, f64> = g.iter().map(|(r, a)| (*r, a.value)).collect();
    assert_eq!(spec.combine(&vals).unwrap(), 0.0);
    let treated: Vec<f64> = vals.iter().filter(|(r, _)| !matches!(r, FunctionalRef::Theta1 { a_star: 0, .. })).map(|(_, v)| *v).collect();
    assert!(treated.len() > 3 && treated.iter().all(|&t| t == treated[0]));
}

#[test]
fn linear_outcome_matches_plugged_mediator_means() {
    // outcome linear in own and neighbour mediators without products: θ₁ has a closed form
    let gen = TrialGenerator::new(DgpParams::default());
    let ds = gen.dataset(15, 5).unwrap();
    let mut outcome = gen.outcome().clone();
    if let FittedLearner::Linear { beta, .. } = &mut outcome.learner {
        beta[8] = 0.0;
        beta[11] = 0.0;
    }
    let nuis = NuisanceSet::new(outcome.clone(), gen.ecmr().clone());
    let r = FunctionalRef::theta1(1, MediatorSet::from_indices(&[1]));
    let n_mc = 4000;
    let c = contributions(&ds, &nuis, &[r], &mc_cfg(n_mc, 2)).unwrap();
    let g = aggregate(&c, WeightKind::ClusterAverage, Variant::G).unwrap()[&r].value;
    let mut closed = 0.0;
    let mut var = 0.0;
    for rec in &ds.clusters {
        let locs = gen.ecmr().locations(rec);
        let n = rec.n;
        // mediator 1 from arm 1, mediator 2 from arm 0; binary mean is the success probability
        let mean: Vec<f64> = (0..2 * n).map(|c| locs.loc[if c < n { 1 } else { 0 }][c]).collect();
        let eta: f64 = (0..n).map(|j| outcome.predict_eta(1, &mean, rec, j)).sum::<f64>() / n as f64;
        closed += eta / ds.clusters.len() as f64;
        // crude per-cluster MC variance bound from the mediator variances
        let (b1, b2) = (0.6f64.abs() + 0.7, 0.9f64.abs() + 1.4);
        var += (b1 * b1 * 6.25 + b2 * b2 * 0.25) / n_mc as f64;
    }
    let se = var.sqrt() / ds.clusters.len() as f64;
    assert!((g - closed).abs() < 3.0 * se, "{g} vs {closed} (se {se})");
}

#[test]
fn monte_carlo_integrals_are_self_consistent() {
    let gen = TrialGenerator::new(DgpParams::default());
    let ds = gen.dataset(6, 6).unwrap();
    let nuis = NuisanceSet::new(gen.outcome().clone(), gen.ecmr().clone());
    let refs = all_refs(2);
    let lo = contributions(&ds, &nuis, &refs, &mc_cfg(4096, 3)).unwrap();
    let hi = contributions(&ds, &nuis, &refs, &mc_cfg(16384, 4)).unwrap();
    // per-draw spread of a cluster-mean η is below 3, so 3 combined MC-SE is at least this bound
    let tol = 3.0 * 3.0 * (1.0 / 4096.0 + 1.0 / 16384.0f64).sqrt();
    for ci in 0..ds.clusters.len() {
        for r in 0..refs.len() {
            let (a, b) = (lo.clusters[ci].contribs[r].plug, hi.clusters[ci].contribs[r].plug);
            assert!((a - b).abs() < tol, "cluster {ci} {}: {a} vs {b}", refs[r].label(2));
        }
    }
}

#[test]
fn estimate_report_is_deterministic() {
    let gen = TrialGenerator::new(DgpParams::default());
    let ds = gen.dataset(20, 1).unwrap();
    let specs: Vec<EffectSpec> =
        [EffectName::Nde, EffectName::Nie].into_iter().map(|n| EffectSpec::new(n, 2, Scale::Difference, WeightKind::ClusterAverage).unwrap()).collect();
    let mut cfg = AnalysisConfig { engine: mc_cfg(32, 9), bootstrap: BootstrapConfig { reps: 3, ..BootstrapConfig::default() }, ..AnalysisConfig::default() };
    cfg.engine.folds = 2;
    cfg.nuisance.ecmr.max_iter = 20;
    let a = estimate(&ds, &specs, &cfg).unwrap();
    let b = estimate(&ds, &specs, &cfg).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(a.rows.len(), 10);
    for row in &a.rows {
        assert!(row.se.is_some_and(|s| s > 0.0), "{row:?}");
        assert!(row.lower.unwrap() <= row.estimate && row.estimate <= row.upper.unwrap());
    }
    let mut csv = Vec::new();
    a.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 11);
}

#[test]
fn unsupported_shapes_are_rejected() {
    let r = FunctionalRef::theta1(0, MediatorSet::from_indices(&[0]));
    assert!(Plan::of(r, 2).is_err());
    let ds = tiny();
    let err = contributions(&ds, &nuisances(0.0), &[FunctionalRef::theta1(1, MediatorSet::full(2))], &EngineConfig {
        law: MediatorLaw::Exact,
        ..EngineConfig::default()
    });
    assert!(err.is_ok());
    let big = TrialGenerator::new(DgpParams::default()).dataset(4, 1).unwrap();
    let gen_nuis = NuisanceSet::new(DgpParams::default().true_outcome(), DgpParams::default().true_ecmr());
    assert!(contributions(&big, &gen_nuis, &[r], &exact_cfg()).is_err());
}
