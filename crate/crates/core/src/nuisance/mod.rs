//! Outcome-regression nuisance with interference-aware features.

pub mod features;
pub mod learners;
pub mod outcome;

pub use features::{build_features, build_features_at, CovContext, CovariateTransform, FeatureMap, MediatorSums};
pub use learners::{fit_learner, Design, FittedLearner, LearnerSpec, Link};
pub use outcome::{fit_outcome, fitted_values, outcome_design, OutcomeModel};
