use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use crtmed::data::{load_dataset, Dataset};
use crtmed::ecmr::fit_ecmr;
use crtmed::engine::{estimate, PiMode};
use crtmed::sim::{compute_truth, run_study_with_truth};
use crtmed::{Error, Result};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn load(cfg: &RunConfig) -> Result<(Dataset, String)> {
    let path = cfg.data.path.as_ref().ok_or_else(|| Error::Config("data.path is required (use --data)".into()))?;
    let schema = cfg.data.schema.as_ref().ok_or_else(|| Error::Config("data.schema is required".into()))?;
    let pi = match (cfg.data.pi, cfg.analysis.pi_mode) {
        (Some(p), _) => p,
        (None, PiMode::Empirical) => 0.5,
        (None, PiMode::Design) => return Err(Error::Config("data.pi is required when analysis.pi_mode = design".into())),
    };
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("cannot open `{}`: {e}", path.display())))?;
    let mut ds = load_dataset(path, schema, pi)?;
    if cfg.data.pi.is_none() {
        ds.pi = ds.empirical_pi();
    }
    eprintln!("crtmed: loaded {} clusters, {} individuals, {} mediators", ds.clusters.len(), ds.n_individuals(), ds.k());
    Ok((ds, sha256_hex(&bytes)))
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), bytes)?;
    eprintln!("crtmed: wrote {}", dir.join(name).display());
    Ok(())
}

fn manifest(cfg: &RunConfig, command: &str, data_sha256: Option<&str>, seeds: Value, outputs: &[&str]) -> Result<String> {
    let canonical = cfg.canonical_json()?;
    let m = json!({
        "command": command,
        "crtmed_version": crtmed::VERSION,
        "cli_version": env!("CARGO_PKG_VERSION"),
        "config_sha256": sha256_hex(canonical.as_bytes()),
        "data_sha256": data_sha256,
        "seeds": seeds,
        "outputs": outputs,
        "config": serde_json::from_str::<Value>(&canonical)?,
    });
    Ok(serde_json::to_string_pretty(&m)? + "\n")
}

pub fn analyze(cfg: &RunConfig) -> Result<()> {
    let (ds, data_hash) = load(cfg)?;
    let specs = cfg.effect_specs(ds.k())?;
    let acfg = cfg.analysis_config()?;
    eprintln!("crtmed: estimating {} effects with {} variants", specs.len(), acfg.variants.len());
    let report = estimate(&ds, &specs, &acfg)?;
    for w in &report.diagnostics.warnings {
        eprintln!("crtmed: warning: {w}");
    }
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    let dir = &cfg.output.dir;
    write(dir, "estimates.csv", &csv)?;
    write(dir, "estimates.json", (report.to_json()? + "\n").as_bytes())?;
    let seeds = json!({"analysis": cfg.analysis.seed, "bootstrap": cfg.bootstrap_seed()});
    let outputs = ["estimates.csv", "estimates.json"];
    write(dir, "manifest.json", manifest(cfg, "analyze", Some(&data_hash), seeds, &outputs)?.as_bytes())?;
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(())
}

fn matrix_text(name: &str, m: &[Vec<f64>]) -> String {
    let mut s = format!("{name}:\n");
    for row in m {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>9.4}")).collect();
        s.push_str(&format!("  {}\n", cells.join(" ")));
    }
    s
}

pub fn fit_copula(cfg: &RunConfig) -> Result<()> {
    let (ds, data_hash) = load(cfg)?;
    eprintln!("crtmed: fitting the copula model");
    let fit = fit_ecmr(&ds, &cfg.nuisance.ecmr)?;
    let out = json!({
        "generator": fit.model.generator,
        "mediators": ds.schema.mediators.iter().map(|m| m.name.clone()).collect::<Vec<_>>(),
        "icc_fit": fit.icc_fit,
        "marginals": fit.model.marginals,
    });
    let dir = &cfg.output.dir;
    write(dir, "copula.json", (serde_json::to_string_pretty(&out)? + "\n").as_bytes())?;
    write(dir, "manifest.json", manifest(cfg, "fit-copula", Some(&data_hash), json!({}), &["copula.json"])?.as_bytes())?;
    let icc = serde_json::to_value(&fit.icc_fit.icc)?;
    let q = |k: &str| -> Vec<Vec<f64>> { serde_json::from_value(icc[k].clone()).unwrap_or_default() };
    let f = &fit.icc_fit;
    println!("log pseudo-likelihood per cluster: {:.6}", f.loglik);
    println!("converged: {}, boundary: {}, iterations: {}", f.converged, f.boundary, f.iterations);
    print!("{}", matrix_text("Q0", &q("q0")));
    print!("{}", matrix_text("Q1", &q("q1")));
    Ok(())
}

pub fn simulate(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.scenario_spec()?;
    let specs = spec.effect_specs()?;
    if spec.is_full_scale() {
        eprintln!("crtmed: full-scale run");
    }
    eprintln!("crtmed: computing truths from {} superpopulation clusters", spec.truth_clusters);
    let truth = compute_truth(&spec.dgp, &specs, spec.truth_clusters, spec.truth_n_mc, spec.truth_seed())?;
    let done = AtomicUsize::new(0);
    let total = spec.replications;
    let result = run_study_with_truth(&spec, &truth, |r| {
        let d = done.fetch_add(1, Ordering::SeqCst) + 1;
        match &r.error {
            Some(e) => eprintln!("crtmed: replication {} failed ({d}/{total}): {e}", r.rep),
            None => eprintln!("crtmed: replication {} done ({d}/{total})", r.rep),
        }
    })?;
    let dir = &cfg.output.dir;
    let mut csv = Vec::new();
    result.metrics.write_csv(&mut csv)?;
    write(dir, "metrics.csv", &csv)?;
    write(dir, "metrics.json", (serde_json::to_string_pretty(&result.metrics)? + "\n").as_bytes())?;
    write(dir, "truth.json", (serde_json::to_string_pretty(&truth)? + "\n").as_bytes())?;
    write(dir, "replications.json", (serde_json::to_string_pretty(&result.replications)? + "\n").as_bytes())?;
    let seeds = json!({"study": spec.seed, "truth": spec.truth_seed()});
    let outputs = ["metrics.csv", "metrics.json", "truth.json", "replications.json"];
    write(dir, "manifest.json", manifest(cfg, "simulate", None, seeds, &outputs)?.as_bytes())?;
    print!("{}", result.metrics.summary());
    Ok(())
}

pub fn validate(cfg: &RunConfig) -> Result<()> {
    cfg.analysis_config()?;
    let sim = cfg.scenario_spec()?;
    sim.effect_specs()?;
    let data = match cfg.data.path {
        Some(_) => {
            let (ds, hash) = load(cfg)?;
            let specs = cfg.effect_specs(ds.k())?;
            let sizes: Vec<usize> = ds.clusters.iter().map(|c| c.n).collect();
            let treated = ds.clusters.iter().filter(|c| c.a == 1).count();
            if !ds.has_both_arms() {
                return Err(Error::Data("both arms must be represented".into()));
            }
            json!({
                "sha256": hash,
                "clusters": ds.clusters.len(),
                "treated_clusters": treated,
                "individuals": ds.n_individuals(),
                "min_cluster_size": sizes.iter().min(),
                "max_cluster_size": sizes.iter().max(),
                "mediators": ds.schema.mediators,
                "pi": ds.pi,
                "estimands": specs.iter().map(|s| s.name.to_string()).collect::<Vec<_>>(),
            })
        }
        None => Value::Null,
    };
    let out = json!({
        "status": "ok",
        "config_sha256": sha256_hex(cfg.canonical_json()?.as_bytes()),
        "data": data,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}
