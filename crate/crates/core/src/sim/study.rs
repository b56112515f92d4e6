use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{DgpParams, TrialGenerator};
use crate::data::WeightKind;
use crate::effects::{EffectName, EffectSpec, FunctionalRef, Scale};
use crate::elliptical::Generator;
use crate::engine::{estimate, gcomp_cluster, AnalysisConfig, EngineConfig, EstimateRow, MediatorLaw, NuisanceSet, NuisanceSpec, Plan, Variant};
use crate::error::{Error, Result};
use crate::inference::BootstrapConfig;
use crate::ecmr::ResidualKind;
use crate::nuisance::CovariateTransform;
use crate::rng::{child_seed, stream_rng};

const TRUTH_TAG: u64 = 0x7e57;
const REP_TAG: u64 = 0x4e9;

/// Working-model misspecification of the simulation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Every working model correct.
    A,
    /// Mediator mean designs use the distorted covariates.
    B,
    /// Outcome mean design uses the distorted covariates.
    C,
    /// Copula generator taken as t with 2 degrees of freedom.
    D,
    /// B, C and D together.
    E,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [Scenario::A, Scenario::B, Scenario::C, Scenario::D, Scenario::E];

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Ok(Scenario::A),
            "b" => Ok(Scenario::B),
            "c" => Ok(Scenario::C),
            "d" => Ok(Scenario::D),
            "e" => Ok(Scenario::E),
            _ => Err(Error::Config(format!("unknown scenario `{s}` (expected a, b, c, d or e)"))),
        }
    }

    pub fn tag(self) -> char {
        match self {
            Scenario::A => 'a',
            Scenario::B => 'b',
            Scenario::C => 'c',
            Scenario::D => 'd',
            Scenario::E => 'e',
        }
    }
}

/// Parametric working models of the study: Normal residuals for the continuous mediator.
pub fn working_models() -> NuisanceSpec {
    let mut spec = NuisanceSpec::default();
    spec.ecmr.marginal.residual = ResidualKind::Normal;
    spec
}

/// Working nuisance specification under a scenario.
pub fn apply_misspecification(scenario: Scenario, base: &NuisanceSpec) -> NuisanceSpec {
    let mut spec = base.clone();
    if matches!(scenario, Scenario::B | Scenario::E) {
        spec.ecmr.marginal.design.transform = CovariateTransform::Distorted;
    }
    if matches!(scenario, Scenario::C | Scenario::E) {
        spec.outcome_map.transform = CovariateTransform::Distorted;
    }
    if matches!(scenario, Scenario::D | Scenario::E) {
        spec.ecmr.generator = Generator::StudentT { nu: 2.0 };
    }
    spec
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub clusters: usize,
    pub replications: usize,
    pub seed: u64,
    pub variants: Vec<Variant>,
    pub estimands: Vec<String>,
    pub scale: Scale,
    pub weight: WeightKind,
    pub n_mc: usize,
    pub folds: usize,
    pub bootstrap: usize,
    /// Monte Carlo draws inside bootstrap replicates.
    pub bootstrap_n_mc: Option<usize>,
    pub alpha: f64,
    pub truth_clusters: usize,
    pub truth_n_mc: usize,
    pub dgp: DgpParams,
    pub nuisance: NuisanceSpec,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            scenario: Scenario::A,
            clusters: 100,
            replications: 200,
            seed: 2024,
            variants: Variant::ALL.to_vec(),
            estimands: ["NDE", "NIE", "INT{1}", "INT{2}", "INT{1,2}"].iter().map(|s| s.to_string()).collect(),
            scale: Scale::Difference,
            weight: WeightKind::ClusterAverage,
            n_mc: 2048,
            folds: 5,
            bootstrap: 100,
            bootstrap_n_mc: None,
            alpha: 0.05,
            truth_clusters: 50_000,
            truth_n_mc: 64,
            dgp: DgpParams::default(),
            nuisance: working_models(),
        }
    }
}

impl ScenarioSpec {
    /// True at full study scale.
    pub fn is_full_scale(&self) -> bool {
        self.replications >= 1000 || self.truth_clusters >= 500_000
    }

    pub fn effect_specs(&self) -> Result<Vec<EffectSpec>> {
        self.estimands.iter().map(|e| EffectSpec::parse(e, 2, self.scale, self.weight)).collect()
    }

    pub fn analysis_config(&self, rep: usize) -> AnalysisConfig {
        let seed = child_seed(child_seed(self.seed, REP_TAG), rep as u64);
        AnalysisConfig {
            engine: EngineConfig { law: MediatorLaw::MonteCarlo { n_mc: self.n_mc }, folds: self.folds, seed, ..EngineConfig::default() },
            nuisance: apply_misspecification(self.scenario, &self.nuisance),
            variants: self.variants.clone(),
            bootstrap: BootstrapConfig { reps: self.bootstrap, seed: child_seed(seed, 1), ..BootstrapConfig::default() },
            bootstrap_n_mc: self.bootstrap_n_mc,
            alpha: self.alpha,
        }
    }

    /// Seed of the truth superpopulation.
    pub fn truth_seed(&self) -> u64 {
        child_seed(self.seed, TRUTH_TAG)
    }

    /// Data seed of replication `rep`; identical across scenarios.
    pub fn data_seed(&self, rep: usize) -> u64 {
        child_seed(self.seed, rep as u64)
    }
}

/// Superpopulation values of each functional and estimand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub clusters: usize,
    pub n_mc: usize,
    pub functionals: BTreeMap<String, f64>,
    pub effects: BTreeMap<String, f64>,
    /// Monte Carlo standard error of each effect's truth.
    pub effects_mcse: BTreeMap<String, f64>,
}

/// Averages the true g-computation integrands over a superpopulation of fresh clusters.
pub fn compute_truth(dgp: &DgpParams, specs: &[EffectSpec], clusters: usize, n_mc: usize, seed: u64) -> Result<Truth> {
    if clusters < 2 {
        return Err(Error::Config("truth superpopulation needs at least 2 clusters".into()));
    }
    let gen = TrialGenerator::new(dgp.clone());
    let nuis = NuisanceSet::new(gen.outcome().clone(), gen.ecmr().clone());
    let refs: Vec<FunctionalRef> = specs.iter().flat_map(|s| s.refs()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let plans: Vec<Plan> = refs.iter().map(|&r| Plan::of(r, 2)).collect::<Result<_>>()?;
    let cfg = EngineConfig { law: MediatorLaw::MonteCarlo { n_mc }, seed: child_seed(seed, TRUTH_TAG), ..EngineConfig::default() };
    let rows: Vec<(usize, Vec<f64>)> = (0..clusters)
        .into_par_iter()
        .map(|c| {
            let rec = gen.covariates(String::new(), &mut stream_rng(seed, c as u64));
            Ok((rec.n, gcomp_cluster(&rec, c as u64, &nuis, &plans, &cfg)?))
        })
        .collect::<Result<_>>()?;
    let mut functionals = BTreeMap::new();
    let mut effects = BTreeMap::new();
    let mut effects_mcse = BTreeMap::new();
    let mut by_weight: Vec<(WeightKind, BTreeMap<FunctionalRef, f64>)> = Vec::new();
    for s in specs {
        if !by_weight.iter().any(|(w, _)| *w == s.weight) {
            let w: Vec<f64> = rows.iter().map(|(n, _)| weight_of(s.weight, *n)).collect();
            let tot: f64 = w.iter().sum();
            let vals = refs.iter().enumerate().map(|(r, fr)| (*fr, rows.iter().zip(&w).map(|((_, v), w)| w * v[r]).sum::<f64>() / tot)).collect();
            by_weight.push((s.weight, vals));
        }
        let vals = &by_weight.iter().find(|(w, _)| *w == s.weight).expect("computed").1;
        let name = s.name.to_string();
        effects.insert(name.clone(), s.combine(vals)?);
        // linearized per-cluster contributions give the Monte Carlo error of the truth
        let grad = s.gradient(vals)?;
        let w: Vec<f64> = rows.iter().map(|(n, _)| weight_of(s.weight, *n)).collect();
        let wbar = w.iter().sum::<f64>() / w.len() as f64;
        let psi: Vec<f64> = rows
            .iter()
            .zip(&w)
            .map(|((_, v), wi)| grad.iter().map(|(fr, g)| g * wi * (v[refs.iter().position(|x| x == fr).expect("ref")] - vals[fr]) / wbar).sum())
            .collect();
        let var = psi.iter().map(|p| p * p).sum::<f64>() / (psi.len() as f64 - 1.0);
        let mut se = (var / psi.len() as f64).sqrt();
        if s.scale.is_ratio() {
            se *= effects[&name];
        }
        effects_mcse.insert(name, se);
    }
    if let Some((_, vals)) = by_weight.first() {
        for (r, v) in vals {
            functionals.insert(r.label(2), *v);
        }
    }
    Ok(Truth { clusters, n_mc, functionals, effects, effects_mcse })
}

fn weight_of(kind: WeightKind, n: usize) -> f64 {
    match kind {
        WeightKind::ClusterAverage => 1.0,
        WeightKind::IndividualAverage => n as f64,
    }
}

/// Estimates of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub rep: usize,
    pub rows: Vec<EstimateRow>,
    /// Largest relative weighted residual sum after stabilization.
    pub stabilized_residual: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub estimand: String,
    pub variant: Variant,
    pub truth: f64,
    pub replications: usize,
    pub mean: f64,
    pub bias: f64,
    pub bias_mcse: f64,
    pub empirical_sd: f64,
    /// Average estimated standard error.
    pub aese: Option<f64>,
    pub aese_mcse: Option<f64>,
    pub coverage: Option<f64>,
    pub coverage_mcse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub scenario: Scenario,
    pub clusters: usize,
    pub replications: usize,
    pub failures: usize,
    pub truth: Truth,
    pub rows: Vec<MetricRow>,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sd(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return f64::NAN;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)).sqrt()
}

/// Aggregates replications into bias, average SE and coverage with Monte Carlo standard errors.
pub fn summarize(scenario: Scenario, clusters: usize, truth: &Truth, reps: &[Replication], order: &[String], variants: &[Variant]) -> MetricsTable {
    let mut sorted: Vec<&Replication> = reps.iter().collect();
    sorted.sort_by_key(|r| r.rep);
    let mut rows = Vec::new();
    for est in order {
        let Some(&t) = truth.effects.get(est) else { continue };
        for &v in variants {
            let hits: Vec<&EstimateRow> = sorted.iter().flat_map(|r| r.rows.iter()).filter(|row| &row.estimand == est && row.variant == v).collect();
            if hits.is_empty() {
                continue;
            }
            let est_v: Vec<f64> = hits.iter().map(|r| r.estimate).collect();
            let n = est_v.len() as f64;
            let m = mean(&est_v);
            let ses: Vec<f64> = hits.iter().filter_map(|r| r.se).collect();
            let covered: Vec<f64> = hits
                .iter()
                .filter_map(|r| match (r.lower, r.upper) {
                    (Some(l), Some(u)) => Some(if l <= t && t <= u { 1.0 } else { 0.0 }),
                    _ => None,
                })
                .collect();
            let cov = (!covered.is_empty()).then(|| mean(&covered));
            rows.push(MetricRow {
                estimand: est.clone(),
                variant: v,
                truth: t,
                replications: hits.len(),
                mean: m,
                bias: m - t,
                bias_mcse: sd(&est_v) / n.sqrt(),
                empirical_sd: sd(&est_v),
                aese: (!ses.is_empty()).then(|| mean(&ses)),
                aese_mcse: (!ses.is_empty()).then(|| sd(&ses) / (ses.len() as f64).sqrt()),
                coverage: cov,
                coverage_mcse: cov.map(|c| (c * (1.0 - c) / covered.len() as f64).sqrt()),
            });
        }
    }
    MetricsTable {
        scenario,
        clusters,
        replications: reps.len(),
        failures: reps.iter().filter(|r| r.error.is_some()).count(),
        truth: truth.clone(),
        rows,
    }
}

/// Full study result: metrics plus the per-replication estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub metrics: MetricsTable,
    pub replications: Vec<Replication>,
}

/// Runs one replication of the estimator sweep.
pub fn run_replication(spec: &ScenarioSpec, specs: &[EffectSpec], rep: usize) -> Replication {
    let gen = TrialGenerator::new(spec.dgp.clone());
    let out = gen.dataset(spec.clusters, spec.data_seed(rep)).and_then(|ds| estimate(&ds, specs, &spec.analysis_config(rep)));
    match out {
        Ok(report) => Replication { rep, stabilized_residual: report.diagnostics.max_stabilized_residual, rows: report.rows, error: None },
        Err(e) => Replication { rep, rows: Vec::new(), stabilized_residual: 0.0, error: Some(e.to_string()) },
    }
}

/// Runs `spec.replications` replications against precomputed truths; `progress` sees each finished replication.
pub fn run_study_with_truth<F>(spec: &ScenarioSpec, truth: &Truth, progress: F) -> Result<StudyResult>
where
    F: Fn(&Replication) + Sync,
{
    let specs = spec.effect_specs()?;
    let reps: Vec<Replication> = (0..spec.replications)
        .into_par_iter()
        .map(|r| {
            let rep = run_replication(spec, &specs, r);
            progress(&rep);
            rep
        })
        .collect();
    let order: Vec<String> = specs.iter().map(|s| s.name.to_string()).collect();
    let mut variants = spec.variants.clone();
    variants.sort();
    variants.dedup();
    Ok(StudyResult { metrics: summarize(spec.scenario, spec.clusters, truth, &reps, &order, &variants), replications: reps })
}

/// Computes truths from the superpopulation, then runs the study.
pub fn run_study(spec: &ScenarioSpec) -> Result<StudyResult> {
    let specs = spec.effect_specs()?;
    let truth = compute_truth(&spec.dgp, &specs, spec.truth_clusters, spec.truth_n_mc, spec.truth_seed())?;
    run_study_with_truth(spec, &truth, |_| {})
}

impl MetricsTable {
    pub fn row(&self, estimand: &str, variant: Variant) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.estimand == estimand && r.variant == variant)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "scenario", "estimand", "variant", "truth", "replications", "mean", "bias", "bias_mcse", "empirical_sd", "aese", "aese_mcse", "coverage",
            "coverage_mcse",
        ])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.rows {
            out.write_record([
                self.scenario.tag().to_string(),
                r.estimand.clone(),
                r.variant.label().to_string(),
                r.truth.to_string(),
                r.replications.to_string(),
                r.mean.to_string(),
                r.bias.to_string(),
                r.bias_mcse.to_string(),
                r.empirical_sd.to_string(),
                opt(r.aese),
                opt(r.aese_mcse),
                opt(r.coverage),
                opt(r.coverage_mcse),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Plain-text table of bias and coverage per estimand and estimator.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "scenario ({}), I = {}, {} replications ({} failed), truth from {} clusters",
            self.scenario.tag(),
            self.clusters,
            self.replications,
            self.failures,
            self.truth.clusters
        );
        let _ = writeln!(s, "{:<10} {:<10} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}", "estimand", "estimator", "truth", "bias", "mcse", "emp.sd", "aese", "coverage");
        for r in &self.rows {
            let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            let _ = writeln!(
                s,
                "{:<10} {:<10} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9} {:>9}",
                r.estimand,
                r.variant.label(),
                r.truth,
                r.bias,
                r.bias_mcse,
                r.empirical_sd,
                f(r.aese),
                f(r.coverage)
            );
        }
        s
    }
}

/// Estimand names in the default reporting order for K = 2.
pub fn default_names() -> Vec<String> {
    crate::effects::default_estimands(2).into_iter().map(|n: EffectName| n.to_string()).collect()
}
