mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use config::{parse_value, read_config_file, resolve, RunConfig};

#[derive(Parser)]
#[command(name = "crtmed", version, about = "Spillover-aware mediation analysis for cluster-randomized trials", after_long_help = config::key_listing())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the configured effects on a dataset and write the report.
    #[command(after_long_help = config::key_listing())]
    Analyze(Common),
    /// Fit the mediator copula model and write its parameters.
    #[command(name = "fit-copula", after_long_help = config::key_listing())]
    FitCopula(Common),
    /// Run the simulation study for one scenario.
    #[command(after_long_help = config::key_listing())]
    Simulate(Common),
    /// Check the configuration (and the dataset, when given) without estimating.
    #[command(after_long_help = config::key_listing())]
    Validate(Common),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML or JSON config file; flags override its values.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. --set nuisance.ecmr.max_iter=50 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Input CSV (data.path).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (output.dir).
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Seed of the analysis or the study.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (threads).
    #[arg(long)]
    threads: Option<usize>,
    /// Estimand such as NDE or INT{1,2} (repeatable).
    #[arg(short, long = "estimand")]
    estimand: Vec<String>,
    /// Estimator variant: G, EIF.PAR, EIF.PAR.S, EIF.DML or EIF.DML.S (repeatable).
    #[arg(long = "variant")]
    variant: Vec<String>,
    /// Effect scale: difference, risk_ratio or odds_ratio.
    #[arg(long)]
    scale: Option<String>,
    /// Cluster weighting: cluster_average or individual_average.
    #[arg(long)]
    weight: Option<String>,
    /// Monte Carlo draws per cluster.
    #[arg(long)]
    n_mc: Option<usize>,
    /// Cross-fitting folds.
    #[arg(long)]
    folds: Option<usize>,
    /// Bootstrap replicates.
    #[arg(long)]
    bootstrap: Option<usize>,
    /// Copula generator of the working model: normal, t:<nu>, cauchy or laplace.
    #[arg(long)]
    generator: Option<String>,
    /// Simulation scenario a-e.
    #[arg(long)]
    scenario: Option<String>,
    /// Simulation replications.
    #[arg(long)]
    reps: Option<usize>,
    /// Clusters per simulated trial.
    #[arg(long)]
    clusters: Option<usize>,
}

fn generator_value(raw: &str) -> crtmed::Result<Value> {
    let s = raw.trim().to_ascii_lowercase();
    let v = match s.as_str() {
        "normal" | "gaussian" => serde_json::json!({"kind": "normal"}),
        "cauchy" => serde_json::json!({"kind": "cauchy"}),
        "laplace" => serde_json::json!({"kind": "laplace"}),
        _ => {
            let nu = s
                .strip_prefix("t:")
                .or_else(|| s.strip_prefix("student_t:"))
                .and_then(|n| n.parse::<f64>().ok())
                .ok_or_else(|| crtmed::Error::Config(format!("unknown generator `{raw}` (expected normal, t:<nu>, cauchy or laplace)")))?;
            serde_json::json!({"kind": "student_t", "nu": nu})
        }
    };
    Ok(v)
}

fn build_config(cmd: &Command) -> crtmed::Result<RunConfig> {
    let (c, sim) = match cmd {
        Command::Analyze(c) | Command::FitCopula(c) | Command::Validate(c) => (c, false),
        Command::Simulate(c) => (c, true),
    };
    let section = if sim { "simulate" } else { "analysis" };
    let file = c.config.as_deref().map(read_config_file).transpose()?;
    let mut o: Vec<(String, Value)> = Vec::new();
    for kv in &c.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| crtmed::Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        o.push((k.trim().to_string(), parse_value(v.trim())));
    }
    let s = |v: &str| Value::String(v.to_string());
    if let Some(p) = &c.data {
        o.push(("data.path".into(), s(&p.to_string_lossy())));
    }
    if let Some(p) = &c.out {
        o.push(("output.dir".into(), s(&p.to_string_lossy())));
    }
    if let Some(x) = c.seed {
        o.push((format!("{section}.seed"), x.into()));
    }
    if let Some(x) = c.threads {
        o.push(("threads".into(), x.into()));
    }
    if !c.estimand.is_empty() {
        o.push((format!("{section}.estimands"), c.estimand.iter().map(|e| s(e)).collect()));
    }
    if !c.variant.is_empty() {
        o.push((format!("{section}.variants"), c.variant.iter().map(|e| s(e)).collect()));
    }
    if let Some(x) = &c.scale {
        o.push((format!("{section}.scale"), s(&x.to_ascii_lowercase().replace('-', "_"))));
    }
    if let Some(x) = &c.weight {
        o.push((format!("{section}.weight"), s(&x.to_ascii_lowercase().replace('-', "_"))));
    }
    if let Some(x) = c.n_mc {
        if sim {
            o.push(("simulate.n_mc".into(), x.into()));
        } else {
            o.push(("analysis.law".into(), serde_json::json!({"kind": "monte_carlo", "n_mc": x})));
        }
    }
    if let Some(x) = c.folds {
        o.push((format!("{section}.folds"), x.into()));
    }
    if let Some(x) = c.bootstrap {
        o.push((format!("{section}.bootstrap"), x.into()));
    }
    if let Some(x) = &c.generator {
        let key = if sim { "simulate.nuisance.ecmr.generator" } else { "nuisance.ecmr.generator" };
        o.push((key.into(), generator_value(x)?));
    }
    if let Some(x) = &c.scenario {
        o.push(("simulate.scenario".into(), s(&crtmed::sim::Scenario::parse(x)?.tag().to_string())));
    }
    if let Some(x) = c.reps {
        o.push(("simulate.replications".into(), x.into()));
    }
    if let Some(x) = c.clusters {
        o.push(("simulate.clusters".into(), x.into()));
    }
    resolve(file, &o)
}

fn run(cmd: Command) -> crtmed::Result<()> {
    let cfg = build_config(&cmd)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| crtmed::Error::Config(format!("cannot start {n} worker threads: {e}")))?;
    }
    match cmd {
        Command::Analyze(_) => commands::analyze(&cfg),
        Command::FitCopula(_) => commands::fit_copula(&cfg),
        Command::Simulate(_) => commands::simulate(&cfg),
        Command::Validate(_) => commands::validate(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code: u8 = if e.is_input_error() { 2 } else { 1 };
            let body = serde_json::json!({"error": {"kind": e.kind(), "message": e.to_string(), "exit_code": code}});
            eprintln!("{body}");
            ExitCode::from(code)
        }
    }
}
