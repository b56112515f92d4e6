use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cluster::{evaluate_cluster, ClusterResult};
use super::nuisances::{fit_nuisances, fit_nuisances_warm, NuisanceSet, NuisanceSpec};
use super::{EngineConfig, MediatorLaw, PiMode, Plan};
use crate::data::{cluster_weight, Dataset, WeightKind};
use crate::ecmr::IccFit;
use crate::effects::{EffectSpec, FunctionalRef, Scale};
use crate::error::{Error, Result};
use crate::inference::{cluster_bootstrap, eif_variance, wald_ci, BootstrapConfig, BootstrapResult, CiMethod};
use crate::rng::{child_seed, stream_rng};

const FOLD_TAG: u64 = 0xf01d;
const BOOT_TAG: u64 = 0xb0b0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "G")]
    G,
    #[serde(rename = "EIF.PAR")]
    Par,
    #[serde(rename = "EIF.PAR.S")]
    ParS,
    #[serde(rename = "EIF.DML")]
    Dml,
    #[serde(rename = "EIF.DML.S")]
    DmlS,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::G, Variant::Par, Variant::ParS, Variant::Dml, Variant::DmlS];

    pub fn label(self) -> &'static str {
        match self {
            Variant::G => "G",
            Variant::Par => "EIF.PAR",
            Variant::ParS => "EIF.PAR.S",
            Variant::Dml => "EIF.DML",
            Variant::DmlS => "EIF.DML.S",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_uppercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.label() == t || v.label().trim_start_matches("EIF.") == t)
            .ok_or_else(|| Error::Config(format!("unknown estimator variant `{s}` (expected G, EIF.PAR, EIF.PAR.S, EIF.DML or EIF.DML.S)")))
    }

    pub fn cross_fit(self) -> bool {
        matches!(self, Variant::Dml | Variant::DmlS)
    }

    pub fn stabilized(self) -> bool {
        matches!(self, Variant::ParS | Variant::DmlS)
    }

    fn mode(self) -> Mode {
        match self {
            Variant::G => Mode::Plug,
            Variant::Par | Variant::Dml => Mode::Eif,
            Variant::ParS | Variant::DmlS => Mode::Stabilized,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Plug,
    Eif,
    Stabilized,
}

/// Per-cluster contributions of every planned functional, with the fold each cluster was evaluated in.
#[derive(Debug, Clone)]
pub struct Contributions {
    pub refs: Vec<FunctionalRef>,
    pub plans: Vec<Plan>,
    pub clusters: Vec<ClusterResult>,
    pub fold: Vec<usize>,
    pub n_folds: usize,
    pub sizes: Vec<usize>,
    /// (P(A = 0), P(A = 1)).
    pub p: [f64; 2],
}

impl Contributions {
    pub fn truncated(&self) -> usize {
        self.clusters.iter().map(|c| c.truncated).sum()
    }

    fn weight(&self, kind: WeightKind, i: usize) -> f64 {
        match kind {
            WeightKind::ClusterAverage => 1.0,
            WeightKind::IndividualAverage => self.sizes[i] as f64,
        }
    }
}

/// Treatment probability used in the influence-function weights.
pub fn treatment_probability(data: &Dataset, mode: PiMode) -> f64 {
    match mode {
        PiMode::Design => data.pi,
        PiMode::Empirical => data.empirical_pi(),
    }
}

fn plans_for(refs: &[FunctionalRef], k: usize) -> Result<Vec<Plan>> {
    refs.iter().map(|&r| Plan::of(r, k)).collect()
}

fn evaluate_many(data: &Dataset, idx: &[usize], nuis: &NuisanceSet, plans: &[Plan], pi: f64, cfg: &EngineConfig) -> Result<Vec<ClusterResult>> {
    idx.par_iter().map(|&i| evaluate_cluster(&data.clusters[i], i as u64, nuis, plans, pi, cfg)).collect()
}

/// Contributions of all clusters under one set of nuisances.
pub fn contributions(data: &Dataset, nuis: &NuisanceSet, refs: &[FunctionalRef], cfg: &EngineConfig) -> Result<Contributions> {
    let plans = plans_for(refs, data.k())?;
    let pi = treatment_probability(data, cfg.pi_mode);
    let idx: Vec<usize> = (0..data.clusters.len()).collect();
    let clusters = evaluate_many(data, &idx, nuis, &plans, pi, cfg)?;
    Ok(Contributions {
        refs: refs.to_vec(),
        plans,
        clusters,
        fold: vec![0; idx.len()],
        n_folds: 1,
        sizes: data.clusters.iter().map(|c| c.n).collect(),
        p: [1.0 - pi, pi],
    })
}

/// Random partition of clusters into `s` folds each holding both arms; returns the fold labels and the attempt used.
pub fn assign_folds(data: &Dataset, s: usize, seed: u64, max_refold: usize) -> Result<(Vec<usize>, usize)> {
    let i = data.clusters.len();
    if s < 2 {
        return Err(Error::Config(format!("cross-fitting needs at least 2 folds, got {s}")));
    }
    if i < 2 * s {
        return Err(Error::Data(format!("{i} clusters cannot fill {s} folds with both arms")));
    }
    for attempt in 0..max_refold.max(1) {
        let mut perm: Vec<usize> = (0..i).collect();
        perm.shuffle(&mut stream_rng(child_seed(seed, FOLD_TAG), attempt as u64));
        let mut fold = vec![0; i];
        for (pos, &c) in perm.iter().enumerate() {
            fold[c] = pos % s;
        }
        let ok = (0..s).all(|f| {
            let arms: BTreeSet<u8> = (0..i).filter(|&c| fold[c] == f).map(|c| data.clusters[c].a).collect();
            arms.len() == 2
        });
        if ok {
            return Ok((fold, attempt));
        }
    }
    Err(Error::Data(format!("no fold assignment with both arms in every fold after {max_refold} attempts")))
}

/// Outcome of cross-fitting: contributions plus the per-fold nuisance diagnostics.
#[derive(Debug, Clone)]
pub struct CrossFit {
    pub contributions: Contributions,
    pub refold_attempts: usize,
    pub icc_fits: Vec<Option<IccFit>>,
}

/// Nuisances fit on all folds but one, contributions evaluated on the held-out fold.
pub fn cross_fit(data: &Dataset, spec: &NuisanceSpec, refs: &[FunctionalRef], cfg: &EngineConfig) -> Result<CrossFit> {
    let plans = plans_for(refs, data.k())?;
    let pi = treatment_probability(data, cfg.pi_mode);
    let (fold, attempt) = assign_folds(data, cfg.folds, cfg.seed, cfg.max_refold)?;
    let mut clusters: Vec<Option<ClusterResult>> = vec![None; data.clusters.len()];
    let mut icc_fits = Vec::with_capacity(cfg.folds);
    for s in 0..cfg.folds {
        let train: Vec<usize> = (0..fold.len()).filter(|&c| fold[c] != s).collect();
        let test: Vec<usize> = (0..fold.len()).filter(|&c| fold[c] == s).collect();
        let nuis = fit_nuisances(&data.subset(&train), spec)?;
        for (c, r) in test.iter().zip(evaluate_many(data, &test, &nuis, &plans, pi, cfg)?) {
            clusters[*c] = Some(r);
        }
        icc_fits.push(nuis.icc_fit);
    }
    let contributions = Contributions {
        refs: refs.to_vec(),
        plans,
        clusters: clusters.into_iter().map(|c| c.expect("every cluster lies in one fold")).collect(),
        fold,
        n_folds: cfg.folds,
        sizes: data.clusters.iter().map(|c| c.n).collect(),
        p: [1.0 - pi, pi],
    };
    Ok(CrossFit { contributions, refold_attempts: attempt, icc_fits })
}

/// Intercept of the weighted least-squares fit of residuals on ratio weights: Σ w·rnum / Σ w·rden.
pub fn stabilize(rnum: &[f64], rden: &[f64], w: &[f64]) -> Result<f64> {
    let den: f64 = rden.iter().zip(w).map(|(r, w)| r * w).sum();
    if !(den > 0.0) {
        return Err(Error::Estimation("stabilization weights are all zero".into()));
    }
    let num: f64 = rnum.iter().zip(w).map(|(r, w)| r * w).sum();
    Ok(num / den)
}

/// Point estimate of one functional and its centred per-cluster influence values.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub value: f64,
    pub psi: Vec<f64>,
    /// Stabilization intercept per fold (empty when not stabilized).
    pub beta: Vec<f64>,
    /// Largest relative weighted residual sum left after stabilization, over folds.
    pub residual: Option<f64>,
}

fn aggregate_mode(c: &Contributions, r: usize, kind: WeightKind, mode: Mode) -> Result<Aggregate> {
    let i = c.clusters.len();
    let w: Vec<f64> = (0..i).map(|ci| c.weight(kind, ci)).collect();
    let stab = mode == Mode::Stabilized && !matches!(c.plans[r], Plan::SetI { .. });
    let arm = c.plans[r].residual_arm() as usize;
    let mut x = vec![0.0; i];
    let mut beta = Vec::new();
    let mut residual: Option<f64> = None;
    for s in 0..c.n_folds {
        let members: Vec<usize> = (0..i).filter(|&ci| c.fold[ci] == s).collect();
        let b = if stab {
            let rn: Vec<f64> = members.iter().map(|&ci| c.clusters[ci].contribs[r].rnum).collect();
            let rd: Vec<f64> = members.iter().map(|&ci| c.clusters[ci].contribs[r].rden).collect();
            let ww: Vec<f64> = members.iter().map(|&ci| w[ci]).collect();
            let b = stabilize(&rn, &rd, &ww)?;
            let (sum, size) = rn.iter().zip(&rd).zip(&ww).fold((0.0, 0.0), |(t, m), ((n, d), w)| (t + w * (n - b * d), m + w * (n.abs() + (b * d).abs())));
            let rel = if size > 0.0 { sum.abs() / size } else { 0.0 };
            residual = Some(residual.map_or(rel, |r: f64| r.max(rel)));
            beta.push(b);
            b
        } else {
            0.0
        };
        for &ci in &members {
            let cc = &c.clusters[ci].contribs[r];
            x[ci] = match mode {
                Mode::Plug => cc.plug,
                Mode::Eif => cc.num,
                Mode::Stabilized => cc.num + b * (1.0 - cc.rden / c.p[arm]),
            };
        }
    }
    let mut value = 0.0;
    let mut wbar = vec![0.0; c.n_folds];
    for (s, wb) in wbar.iter_mut().enumerate() {
        let members: Vec<usize> = (0..i).filter(|&ci| c.fold[ci] == s).collect();
        let ws: f64 = members.iter().map(|&ci| w[ci]).sum();
        let theta_s = members.iter().map(|&ci| w[ci] * x[ci]).sum::<f64>() / ws;
        value += members.len() as f64 * theta_s / i as f64;
        *wb = ws / members.len() as f64;
    }
    if !value.is_finite() {
        return Err(Error::Numerical("functional estimate is not finite".into()));
    }
    let psi = (0..i).map(|ci| w[ci] * (x[ci] - value) / wbar[c.fold[ci]]).collect();
    Ok(Aggregate { value, psi, beta, residual })
}

/// Aggregates every functional of `c` for an estimator variant.
pub fn aggregate(c: &Contributions, kind: WeightKind, variant: Variant) -> Result<BTreeMap<FunctionalRef, Aggregate>> {
    (0..c.refs.len()).map(|r| Ok((c.refs[r], aggregate_mode(c, r, kind, variant.mode())?))).collect()
}

/// Effect value on its natural scale plus the estimation-scale value and influence values.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectEstimate {
    pub value: f64,
    pub est_scale: f64,
    pub psi: Vec<f64>,
}

pub fn effect_estimate(spec: &EffectSpec, agg: &BTreeMap<FunctionalRef, Aggregate>) -> Result<EffectEstimate> {
    let values: BTreeMap<FunctionalRef, f64> = agg.iter().map(|(r, a)| (*r, a.value)).collect();
    let est_scale = spec.combine_log(&values)?;
    let value = if spec.scale.is_ratio() { est_scale.exp() } else { est_scale };
    let i = agg.values().next().map_or(0, |a| a.psi.len());
    let mut psi = vec![0.0; i];
    for (r, g) in spec.gradient(&values)? {
        for (p, q) in psi.iter_mut().zip(&agg[&r].psi) {
            *p += g * q;
        }
    }
    Ok(EffectEstimate { value, est_scale, psi })
}

/// Settings of a full analysis: engine, nuisance learners, variants and uncertainty quantification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub engine: EngineConfig,
    pub nuisance: NuisanceSpec,
    pub variants: Vec<Variant>,
    /// Replicates for the G and EIF.PAR variants; 0 skips their standard errors.
    pub bootstrap: BootstrapConfig,
    /// Monte Carlo draws inside bootstrap replicates (defaults to the engine's law).
    pub bootstrap_n_mc: Option<usize>,
    pub alpha: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            engine: EngineConfig::default(),
            nuisance: NuisanceSpec::default(),
            variants: Variant::ALL.to_vec(),
            bootstrap: BootstrapConfig::default(),
            bootstrap_n_mc: None,
            alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub estimand: String,
    pub scale: Scale,
    pub weight: WeightKind,
    pub variant: Variant,
    pub estimate: f64,
    pub se: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub method: Option<CiMethod>,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalValue {
    pub functional: String,
    pub variant: Variant,
    pub weight: WeightKind,
    pub value: f64,
    pub se: Option<f64>,
    /// Stabilization intercepts, one per fold.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub beta: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stabilized_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Diagnostics {
    pub clusters: usize,
    pub individuals: usize,
    pub pi: f64,
    pub law: Option<MediatorLaw>,
    /// Density ratios truncated at the cap, per variant family.
    pub truncated_full_fit: usize,
    pub truncated_cross_fit: usize,
    pub refold_attempts: usize,
    pub icc_fit: Option<IccFit>,
    pub fold_icc_boundary: usize,
    pub fold_icc_not_converged: usize,
    pub bootstrap_redraws: usize,
    pub bootstrap_failures: usize,
    /// Largest relative weighted residual sum after stabilization (0 when nothing was stabilized).
    pub max_stabilized_residual: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub rows: Vec<EstimateRow>,
    pub functionals: Vec<FunctionalValue>,
    pub diagnostics: Diagnostics,
}

impl EstimateReport {
    pub fn row(&self, estimand: &str, variant: Variant) -> Option<&EstimateRow> {
        self.rows.iter().find(|r| r.estimand == estimand && r.variant == variant)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Effect rows as CSV.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["estimand", "scale", "weight", "variant", "estimate", "se", "lower", "upper", "method", "replicates"])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.rows {
            let method = r.method.map_or(String::new(), |m| serde_json::to_value(m).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default());
            let json_str = |v: serde_json::Value| v.as_str().map(String::from).unwrap_or_default();
            out.write_record([
                r.estimand.clone(),
                json_str(serde_json::to_value(r.scale)?),
                json_str(serde_json::to_value(r.weight)?),
                r.variant.label().to_string(),
                r.estimate.to_string(),
                opt(r.se),
                opt(r.lower),
                opt(r.upper),
                method,
                r.replicates.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn union_refs(specs: &[EffectSpec]) -> Vec<FunctionalRef> {
    specs.iter().flat_map(|s| s.refs()).collect::<BTreeSet<_>>().into_iter().collect()
}

fn weight_kinds(specs: &[EffectSpec]) -> Vec<WeightKind> {
    let mut kinds: Vec<WeightKind> = Vec::new();
    for s in specs {
        if !kinds.contains(&s.weight) {
            kinds.push(s.weight);
        }
    }
    kinds
}

/// Functional aggregates for one variant, keyed by weight kind.
type VariantAggregates = Vec<(WeightKind, BTreeMap<FunctionalRef, Aggregate>)>;

fn aggregates_for(c: &Contributions, kinds: &[WeightKind], v: Variant) -> Result<VariantAggregates> {
    kinds.iter().map(|&k| Ok((k, aggregate(c, k, v)?))).collect()
}

fn lookup<'a>(aggs: &'a VariantAggregates, kind: WeightKind) -> &'a BTreeMap<FunctionalRef, Aggregate> {
    &aggs.iter().find(|(k, _)| *k == kind).expect("aggregated for every weight kind").1
}

/// Estimation-scale effect values of the non-cross-fitted variants, in (variant, spec) order.
fn full_fit_values(c: &Contributions, specs: &[EffectSpec], kinds: &[WeightKind], variants: &[Variant]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for &v in variants {
        let aggs = aggregates_for(c, kinds, v)?;
        for s in specs {
            out.push(effect_estimate(s, lookup(&aggs, s.weight))?.est_scale);
        }
    }
    Ok(out)
}

fn check_inputs(data: &Dataset, specs: &[EffectSpec], cfg: &AnalysisConfig) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Config("no estimands requested".into()));
    }
    if cfg.variants.is_empty() {
        return Err(Error::Config("no estimator variants requested".into()));
    }
    if let Some(s) = specs.iter().find(|s| s.k != data.k()) {
        return Err(Error::Config(format!("estimand {} is defined for K = {}, data has K = {}", s.name, s.k, data.k())));
    }
    if data.clusters.len() < 2 || !data.has_both_arms() {
        return Err(Error::Data("estimation needs at least one cluster in each arm".into()));
    }
    Ok(())
}

/// Runs every requested variant and returns effect rows, functional values and diagnostics.
pub fn estimate(data: &Dataset, specs: &[EffectSpec], cfg: &AnalysisConfig) -> Result<EstimateReport> {
    check_inputs(data, specs, cfg)?;
    let refs = union_refs(specs);
    let kinds = weight_kinds(specs);
    let variants: Vec<Variant> = cfg.variants.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let full_variants: Vec<Variant> = variants.iter().copied().filter(|v| !v.cross_fit()).collect();
    let pi = treatment_probability(data, cfg.engine.pi_mode);
    let mut diag = Diagnostics {
        clusters: data.clusters.len(),
        individuals: data.n_individuals(),
        pi,
        law: Some(cfg.engine.law),
        ..Diagnostics::default()
    };
    let mut rows = Vec::new();
    let mut functionals = Vec::new();
    let mut per_variant: Vec<(Variant, VariantAggregates)> = Vec::new();

    if !full_variants.is_empty() {
        let nuis = fit_nuisances(data, &cfg.nuisance)?;
        let c = contributions(data, &nuis, &refs, &cfg.engine)?;
        diag.truncated_full_fit = c.truncated();
        for &v in &full_variants {
            per_variant.push((v, aggregates_for(&c, &kinds, v)?));
        }
        let boot = if cfg.bootstrap.reps > 0 {
            let warm = nuis.icc_fit.as_ref().map(|f| vec![f.icc.clone()]);
            let mut engine = cfg.engine.clone();
            if let (Some(n_mc), MediatorLaw::MonteCarlo { .. }) = (cfg.bootstrap_n_mc, engine.law) {
                engine.law = MediatorLaw::MonteCarlo { n_mc };
            }
            let res = cluster_bootstrap(data, &cfg.bootstrap, |ds, b| {
                let nb = fit_nuisances_warm(ds, &cfg.nuisance, warm.as_deref())?;
                let eng = EngineConfig { seed: child_seed(child_seed(cfg.engine.seed, BOOT_TAG), b as u64), ..engine.clone() };
                let cb = contributions(ds, &nb, &refs, &eng)?;
                full_fit_values(&cb, specs, &kinds, &full_variants)
            })?;
            diag.bootstrap_redraws = res.redraws;
            diag.bootstrap_failures = res.failures;
            Some(res)
        } else {
            None
        };
        diag.icc_fit = nuis.icc_fit;
        for (vi, &v) in full_variants.iter().enumerate() {
            let aggs = &per_variant.iter().find(|(x, _)| *x == v).expect("aggregated").1;
            for (si, s) in specs.iter().enumerate() {
                let e = effect_estimate(s, lookup(aggs, s.weight))?;
                rows.push(bootstrap_row(s, v, &e, boot.as_ref().map(|b| (b, vi * specs.len() + si)), cfg.bootstrap.percentile, cfg.alpha)?);
            }
        }
    }

    if variants.iter().any(|v| v.cross_fit()) {
        let cf = cross_fit(data, &cfg.nuisance, &refs, &cfg.engine)?;
        diag.truncated_cross_fit = cf.contributions.truncated();
        diag.refold_attempts = cf.refold_attempts;
        diag.fold_icc_boundary = cf.icc_fits.iter().flatten().filter(|f| f.boundary).count();
        diag.fold_icc_not_converged = cf.icc_fits.iter().flatten().filter(|f| !f.converged).count();
        for &v in variants.iter().filter(|v| v.cross_fit()) {
            let aggs = aggregates_for(&cf.contributions, &kinds, v)?;
            for s in specs {
                let e = effect_estimate(s, lookup(&aggs, s.weight))?;
                let var = eif_variance(&e.psi)?;
                let ci = wald_ci(e.value, var.se, s.scale, cfg.alpha)?;
                rows.push(EstimateRow {
                    estimand: s.name.to_string(),
                    scale: s.scale,
                    weight: s.weight,
                    variant: v,
                    estimate: e.value,
                    se: Some(var.se),
                    lower: Some(ci.lower),
                    upper: Some(ci.upper),
                    method: Some(CiMethod::EifVariance),
                    replicates: 0,
                });
            }
            per_variant.push((v, aggs));
        }
    }

    for (v, aggs) in &per_variant {
        for (kind, map) in aggs {
            for (r, a) in map {
                let se = if v.cross_fit() { Some(eif_variance(&a.psi)?.se) } else { None };
                functionals.push(FunctionalValue { functional: r.label(data.k()), variant: *v, weight: *kind, value: a.value, se, beta: a.beta.clone(), stabilized_residual: a.residual });
                if let Some(res) = a.residual {
                    diag.max_stabilized_residual = diag.max_stabilized_residual.max(res);
                }
            }
        }
    }
    if diag.truncated_full_fit + diag.truncated_cross_fit > 0 {
        diag.warnings.push(format!("{} density ratios truncated at {}", diag.truncated_full_fit + diag.truncated_cross_fit, cfg.engine.ratio_cap));
    }
    if diag.icc_fit.as_ref().is_some_and(|f| f.boundary) || diag.fold_icc_boundary > 0 {
        diag.warnings.push("ICC estimate on the positive-definiteness boundary".into());
    }
    Ok(EstimateReport { rows, functionals, diagnostics: diag })
}

fn bootstrap_row(s: &EffectSpec, v: Variant, e: &EffectEstimate, boot: Option<(&BootstrapResult, usize)>, percentile: bool, alpha: f64) -> Result<EstimateRow> {
    let mut row = EstimateRow {
        estimand: s.name.to_string(),
        scale: s.scale,
        weight: s.weight,
        variant: v,
        estimate: e.value,
        se: None,
        lower: None,
        upper: None,
        method: None,
        replicates: 0,
    };
    if let Some((b, col)) = boot {
        let se = b.se(col);
        row.se = Some(se);
        row.replicates = b.replicates.len();
        if percentile {
            let (lo, hi) = b.percentile(col, alpha);
            let f = |x: f64| if s.scale.is_ratio() { x.exp() } else { x };
            row.lower = Some(f(lo));
            row.upper = Some(f(hi));
            row.method = Some(CiMethod::BootstrapPercentile);
        } else {
            let ci = wald_ci(e.value, se, s.scale, alpha)?;
            row.lower = Some(ci.lower);
            row.upper = Some(ci.upper);
            row.method = Some(CiMethod::ClusterBootstrap);
        }
    }
    Ok(row)
}

/// Weighted cluster average of per-cluster values, used for sanity checks and truths.
pub fn weighted_mean(data: &Dataset, kind: WeightKind, values: &[f64]) -> f64 {
    let w: Vec<f64> = data.clusters.iter().map(|c| cluster_weight(kind, c)).collect();
    w.iter().zip(values).map(|(w, v)| w * v).sum::<f64>() / w.iter().sum::<f64>()
}
