use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::ecmr::{fit_ecmr_from, EcmrModel, EcmrSpec, IccFit, IccMatrices};
use crate::error::Result;
use crate::nuisance::{fit_outcome, FeatureMap, LearnerSpec, OutcomeModel};

/// Learners for the outcome mean and the mediator model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct NuisanceSpec {
    pub outcome_map: FeatureMap,
    pub outcome_learner: LearnerSpec,
    pub ecmr: EcmrSpec,
}

/// Fitted outcome mean and joint mediator law.
#[derive(Debug, Clone)]
pub struct NuisanceSet {
    pub outcome: OutcomeModel,
    pub ecmr: EcmrModel,
    pub icc_fit: Option<IccFit>,
}

impl NuisanceSet {
    pub fn new(outcome: OutcomeModel, ecmr: EcmrModel) -> Self {
        NuisanceSet { outcome, ecmr, icc_fit: None }
    }
}

pub fn fit_nuisances(data: &Dataset, spec: &NuisanceSpec) -> Result<NuisanceSet> {
    fit_nuisances_warm(data, spec, None)
}

/// As [`fit_nuisances`], starting the ICC search from `starts` only.
pub fn fit_nuisances_warm(data: &Dataset, spec: &NuisanceSpec, starts: Option<&[IccMatrices]>) -> Result<NuisanceSet> {
    let outcome = fit_outcome(data, &spec.outcome_map, &spec.outcome_learner)?;
    let fit = fit_ecmr_from(data, &spec.ecmr, starts)?;
    Ok(NuisanceSet { outcome, ecmr: fit.model, icc_fit: Some(fit.icc_fit) })
}
