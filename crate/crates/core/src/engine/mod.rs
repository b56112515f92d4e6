//! Mediation functionals: Monte Carlo g-computation, per-cluster influence-function contributions,
//! one-step, stabilized and cross-fitted estimators.

pub mod cluster;
pub mod estimate;
pub mod nuisances;

use serde::{Deserialize, Serialize};

use crate::effects::{FunctionalRef, MediatorSet};
use crate::error::{Error, Result};

pub use cluster::{evaluate_cluster, gcomp_cluster, ClusterContribution, ClusterResult};
pub use estimate::{
    aggregate, assign_folds, contributions, cross_fit, effect_estimate, estimate, stabilize, treatment_probability, Aggregate,
    AnalysisConfig, Contributions, CrossFit, Diagnostics, EffectEstimate, EstimateReport, EstimateRow, FunctionalValue, Variant,
};
pub use nuisances::{fit_nuisances, fit_nuisances_warm, NuisanceSet, NuisanceSpec};
pub use cluster::MAX_EXACT_CELLS;

/// How integrals over mediator laws are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MediatorLaw {
    /// Independent draws from each arm's fitted joint law, shared by every functional of a cluster.
    MonteCarlo { n_mc: usize },
    /// Exhaustive enumeration of binary mediator configurations (small clusters only).
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PiMode {
    #[default]
    Design,
    Empirical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub law: MediatorLaw,
    /// Density ratios above this value are truncated (and counted).
    pub ratio_cap: f64,
    pub pi_mode: PiMode,
    pub folds: usize,
    pub max_refold: usize,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig { law: MediatorLaw::MonteCarlo { n_mc: 4096 }, ratio_cap: 50.0, pi_mode: PiMode::Design, folds: 5, max_refold: 10, seed: 1 }
    }
}

/// Where a mediator row of a spliced matrix comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Src {
    Obs,
    D0,
    D1,
}

/// Evaluation shape of a functional.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Plan {
    /// θ₁(a*, a') with every mediator drawn under the single arm `a_med`.
    SetI { a_star: u8, a_med: u8 },
    /// θ₁(1, a_J*) with J* under control and the rest under treatment, J* proper.
    SetII { jstar: MediatorSet },
    /// θ₂(k, J*).
    Theta2 { k: usize, jstar: MediatorSet },
}

impl Plan {
    pub fn of(r: FunctionalRef, k: usize) -> Result<Self> {
        let full = MediatorSet::full(k);
        match r {
            FunctionalRef::Theta1 { a_star, zeros } => {
                if !zeros.is_subset_of(full) || a_star > 1 {
                    return Err(Error::Config(format!("functional {} does not fit K = {k}", r.label(k))));
                }
                if zeros.is_empty() {
                    Ok(Plan::SetI { a_star, a_med: 1 })
                } else if zeros == full {
                    Ok(Plan::SetI { a_star, a_med: 0 })
                } else if a_star == 1 {
                    Ok(Plan::SetII { jstar: zeros })
                } else {
                    Err(Error::Config(format!("unsupported functional {}: mixed mediator arms need a* = 1", r.label(k))))
                }
            }
            FunctionalRef::Theta2 { k: piv, jstar } => {
                let piv = piv as usize;
                if piv >= k || jstar.contains(piv) || !jstar.is_subset_of(full) {
                    return Err(Error::Config(format!("functional {} does not fit K = {k}", r.label(k))));
                }
                Ok(Plan::Theta2 { k: piv, jstar })
            }
        }
    }

    /// Arm whose units carry the density-ratio-weighted residual term.
    pub fn residual_arm(self) -> u8 {
        match self {
            Plan::SetI { a_star, .. } => a_star,
            _ => 1,
        }
    }
}
