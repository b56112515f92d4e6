//! Run configuration: defaults, config-file overlay, flag overrides and key listing.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crtmed::data::{MediatorKind, MediatorMeta, Schema, WeightKind};
use crtmed::effects::{default_estimands, EffectSpec, Scale};
use crtmed::engine::{AnalysisConfig, EngineConfig, MediatorLaw, NuisanceSpec, PiMode, Variant};
use crtmed::inference::BootstrapConfig;
use crtmed::rng::child_seed;
use crtmed::sim::{DgpParams, Scenario, ScenarioSpec};
use crtmed::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Worker threads; all logical cores when unset.
    pub threads: Option<usize>,
    pub data: DataConfig,
    pub analysis: AnalysisSection,
    pub nuisance: NuisanceSpec,
    pub simulate: SimulateSection,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            threads: None,
            data: DataConfig::default(),
            analysis: AnalysisSection::default(),
            nuisance: NuisanceSpec::default(),
            simulate: SimulateSection::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Long-format CSV, one row per individual.
    pub path: Option<PathBuf>,
    /// Design probability of assignment to treatment.
    pub pi: Option<f64>,
    pub schema: Option<Schema>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    /// Empty selects every default estimand for the number of mediators.
    pub estimands: Vec<String>,
    pub scale: Scale,
    pub weight: WeightKind,
    pub variants: Vec<String>,
    pub seed: u64,
    pub law: MediatorLaw,
    pub ratio_cap: f64,
    pub pi_mode: PiMode,
    pub folds: usize,
    pub max_refold: usize,
    pub bootstrap: usize,
    pub bootstrap_n_mc: Option<usize>,
    pub max_redraw: usize,
    pub percentile: bool,
    pub alpha: f64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        let a = AnalysisConfig::default();
        AnalysisSection {
            estimands: Vec::new(),
            scale: Scale::Difference,
            weight: WeightKind::ClusterAverage,
            variants: a.variants.iter().map(|v| v.label().to_string()).collect(),
            seed: 1,
            law: a.engine.law,
            ratio_cap: a.engine.ratio_cap,
            pi_mode: a.engine.pi_mode,
            folds: a.engine.folds,
            max_refold: a.engine.max_refold,
            bootstrap: a.bootstrap.reps,
            bootstrap_n_mc: None,
            max_redraw: a.bootstrap.max_redraw,
            percentile: false,
            alpha: a.alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub scenario: Scenario,
    pub clusters: usize,
    pub replications: usize,
    pub seed: u64,
    pub variants: Vec<String>,
    pub estimands: Vec<String>,
    pub scale: Scale,
    pub weight: WeightKind,
    pub n_mc: usize,
    pub folds: usize,
    pub bootstrap: usize,
    pub bootstrap_n_mc: Option<usize>,
    pub alpha: f64,
    pub truth_clusters: usize,
    pub truth_n_mc: usize,
    pub dgp: DgpParams,
    /// Working models fitted in each replication.
    pub nuisance: NuisanceSpec,
}

impl Default for SimulateSection {
    fn default() -> Self {
        let s = ScenarioSpec::default();
        SimulateSection {
            scenario: s.scenario,
            clusters: s.clusters,
            replications: s.replications,
            seed: s.seed,
            variants: s.variants.iter().map(|v| v.label().to_string()).collect(),
            estimands: s.estimands,
            scale: s.scale,
            weight: s.weight,
            n_mc: s.n_mc,
            folds: s.folds,
            bootstrap: s.bootstrap,
            bootstrap_n_mc: s.bootstrap_n_mc,
            alpha: s.alpha,
            truth_clusters: s.truth_clusters,
            truth_n_mc: s.truth_n_mc,
            dgp: s.dgp,
            nuisance: s.nuisance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("crtmed-out") }
    }
}

fn parse_variants(v: &[String]) -> Result<Vec<Variant>> {
    if v.is_empty() {
        return Err(Error::Config("at least one estimator variant is required".into()));
    }
    v.iter().map(|s| Variant::parse(s)).collect()
}

impl RunConfig {
    pub fn analysis_config(&self) -> Result<AnalysisConfig> {
        let a = &self.analysis;
        Ok(AnalysisConfig {
            engine: EngineConfig { law: a.law, ratio_cap: a.ratio_cap, pi_mode: a.pi_mode, folds: a.folds, max_refold: a.max_refold, seed: a.seed },
            nuisance: self.nuisance.clone(),
            variants: parse_variants(&a.variants)?,
            bootstrap: BootstrapConfig { reps: a.bootstrap, max_redraw: a.max_redraw, percentile: a.percentile, seed: self.bootstrap_seed() },
            bootstrap_n_mc: a.bootstrap_n_mc,
            alpha: a.alpha,
        })
    }

    pub fn bootstrap_seed(&self) -> u64 {
        child_seed(self.analysis.seed, 1)
    }

    /// Estimand specifications for a dataset with `k` mediators.
    pub fn effect_specs(&self, k: usize) -> Result<Vec<EffectSpec>> {
        let a = &self.analysis;
        if a.estimands.is_empty() {
            return default_estimands(k).into_iter().map(|n| EffectSpec::new(n, k, a.scale, a.weight)).collect();
        }
        a.estimands.iter().map(|e| EffectSpec::parse(e, k, a.scale, a.weight)).collect()
    }

    pub fn scenario_spec(&self) -> Result<ScenarioSpec> {
        let s = &self.simulate;
        Ok(ScenarioSpec {
            scenario: s.scenario,
            clusters: s.clusters,
            replications: s.replications,
            seed: s.seed,
            variants: parse_variants(&s.variants)?,
            estimands: s.estimands.clone(),
            scale: s.scale,
            weight: s.weight,
            n_mc: s.n_mc,
            folds: s.folds,
            bootstrap: s.bootstrap,
            bootstrap_n_mc: s.bootstrap_n_mc,
            alpha: s.alpha,
            truth_clusters: s.truth_clusters,
            truth_n_mc: s.truth_n_mc,
            dgp: s.dgp.clone(),
            nuisance: s.nuisance.clone(),
        })
    }

    /// Canonical JSON (sorted keys) used for hashing and manifests.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&serde_json::to_value(self)?)?)
    }
}

/// Reads a TOML or JSON config file into a JSON value.
pub fn read_config_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config `{}`: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        return serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid JSON in `{}`: {e}", path.display())));
    }
    let t: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("invalid TOML in `{}`: {e}", path.display())))?;
    Ok(serde_json::to_value(t)?)
}

/// Parses an override value: JSON when it parses, a bare string otherwise.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            // switching an enum variant replaces the whole table
            let retag = matches!((b.get("kind"), o.get("kind")), (Some(x), Some(y)) if x != y);
            if retag {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn nest(path: &str, value: Value) -> Result<Value> {
    let mut out = value;
    for key in path.rsplit('.') {
        if key.is_empty() {
            return Err(Error::Config(format!("malformed config key `{path}`")));
        }
        let mut m = Map::new();
        m.insert(key.to_string(), out);
        out = Value::Object(m);
    }
    Ok(out)
}

fn leaves(v: &Value, prefix: &str, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, x) in m {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaves(x, &p, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

/// Builds the effective configuration: defaults, then the config file, then `overrides` in order.
pub fn resolve(file: Option<Value>, overrides: &[(String, Value)]) -> Result<RunConfig> {
    let mut merged = serde_json::to_value(RunConfig::default())?;
    let mut user: Vec<Value> = Vec::new();
    if let Some(f) = file {
        if !f.is_object() {
            return Err(Error::Config("config file must contain a table".into()));
        }
        user.push(f);
    }
    for (k, v) in overrides {
        user.push(nest(k, v.clone())?);
    }
    for u in &user {
        merge(&mut merged, u.clone());
    }
    let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
    let known: BTreeSet<String> = {
        let mut l = Vec::new();
        leaves(&serde_json::to_value(&cfg)?, "", &mut l);
        l.into_iter().map(|(k, _)| k).collect()
    };
    for u in &user {
        let mut l = Vec::new();
        leaves(u, "", &mut l);
        for (k, v) in l {
            let parent_known = known.iter().any(|x| x == &k || x.starts_with(&format!("{k}.")));
            if !parent_known && !v.is_null() {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
        }
    }
    parse_variants(&cfg.analysis.variants)?;
    parse_variants(&cfg.simulate.variants)?;
    if cfg.threads == Some(0) {
        return Err(Error::Config("threads must be at least 1".into()));
    }
    Ok(cfg)
}

/// Every configuration key with its default value, one per line.
pub fn key_listing() -> String {
    let mut example = RunConfig::default();
    example.threads = Some(0);
    example.data.path = Some(PathBuf::from("<csv path>"));
    example.data.pi = Some(0.5);
    example.data.schema = Some(Schema {
        cluster: "cluster".into(),
        treatment: "A".into(),
        outcome: "Y".into(),
        mediators: vec![MediatorMeta { name: "M1".into(), kind: MediatorKind::Continuous }],
        cluster_covariates: vec!["V1".into()],
        individual_covariates: vec!["X1".into()],
    });
    let mut l = Vec::new();
    leaves(&serde_json::to_value(&example).expect("config serializes"), "", &mut l);
    let mut s = String::from("Configuration keys (file tables or --set KEY=VALUE) with default values:\n");
    for (k, v) in l {
        let shown = match (k.as_str(), &v) {
            ("threads", _) => "all cores".to_string(),
            ("data.path", _) | ("data.pi", _) => "required for data commands".to_string(),
            (_, Value::Null) => "unset".to_string(),
            _ if k.starts_with("data.schema") => format!("e.g. {v}"),
            _ => v.to_string(),
        };
        s.push_str(&format!("  {k} = {shown}\n"));
    }
    s.push_str("\nOther values: analysis.law = {\"kind\":\"exact\"}; nuisance.ecmr.generator.kind = student_t (with nu), cauchy, laplace;\n");
    s.push_str("learner kinds: linear, logistic, polynomial, stumps; scale: difference, risk_ratio, odds_ratio;\n");
    s.push_str("weight: cluster_average, individual_average; analysis.pi_mode: design, empirical; simulate.scenario: a-e.\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = resolve(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn overrides_apply_in_order() {
        let o = vec![
            ("analysis.seed".to_string(), parse_value("9")),
            ("analysis.seed".to_string(), parse_value("11")),
            ("nuisance.ecmr.generator".to_string(), parse_value(r#"{"kind":"student_t","nu":4}"#)),
            ("analysis.scale".to_string(), parse_value("risk_ratio")),
        ];
        let cfg = resolve(None, &o).unwrap();
        assert_eq!(cfg.analysis.seed, 11);
        assert_eq!(cfg.analysis.scale, Scale::RiskRatio);
        assert_eq!(cfg.nuisance.ecmr.generator, crtmed::elliptical::Generator::StudentT { nu: 4.0 });
        let back = resolve(None, &[("nuisance.ecmr.generator.kind".to_string(), parse_value("normal"))]).unwrap();
        assert_eq!(back.nuisance.ecmr.generator, crtmed::elliptical::Generator::Normal);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for k in ["analysis.sede", "nuisance.ecmr.max_iters", "bogus"] {
            let e = resolve(None, &[(k.to_string(), parse_value("1"))]).unwrap_err();
            assert!(e.is_input_error(), "{e}");
        }
        assert!(resolve(None, &[("analysis.variants".to_string(), parse_value(r#"["PAR", "XYZ"]"#))]).is_err());
        assert!(resolve(None, &[("analysis.variants".to_string(), parse_value(r#"["PAR", "dml.s"]"#))]).is_ok());
    }

    #[test]
    fn toml_file_overlays_defaults() {
        let t: toml::Table = toml::from_str("[analysis]\nfolds = 3\n[simulate.dgp]\nq1 = 0.02\n").unwrap();
        let cfg = resolve(Some(serde_json::to_value(t).unwrap()), &[]).unwrap();
        assert_eq!(cfg.analysis.folds, 3);
        assert_eq!(cfg.simulate.dgp.q1, 0.02);
        assert_eq!(cfg.simulate.dgp.n_max, DgpParams::default().n_max);
    }

    #[test]
    fn listing_names_every_leaf() {
        let s = key_listing();
        for k in ["analysis.seed", "analysis.law.n_mc", "nuisance.ecmr.latent.n_qmc", "simulate.dgp.q0_offdiag", "data.schema.outcome", "output.dir", "threads"] {
            assert!(s.contains(&format!("  {k} = ")), "{k}");
        }
    }

    #[test]
    fn canonical_json_is_stable() {
        let a = RunConfig::default().canonical_json().unwrap();
        assert_eq!(a, RunConfig::default().canonical_json().unwrap());
        assert!(a.find("\"analysis\"").unwrap() < a.find("\"simulate\"").unwrap());
    }
}
