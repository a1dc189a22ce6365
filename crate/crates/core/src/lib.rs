//! Hybrid cold-start recommender for picking the best item (a closure-model
//! combination) for a new case from a sparse items × cases performance matrix
//! and structured case metadata.
//!
//! The recommender finds the query's nearest historical cases in feature
//! space and averages their observed or imputed performances per item.
//! Imputation uses a low-rank Gaussian copula (or soft-thresholded SVD).
//! [`protocol`] holds the experiment-level nested cross-validation used to
//! evaluate it against popularity, reference and random baselines.

pub mod completion;
pub mod domain;
pub mod error;
pub mod eval;
pub mod features;
pub mod io;
pub mod protocol;
pub mod recommend;
pub mod stability;
pub mod synth;

#[cfg(test)]
pub(crate) mod testutil;

pub use domain::{
    drop_experiment, observed_fraction, validate_matrix, ExperimentMap, PerformanceMatrix,
    ValidationReport,
};
pub use error::{Error, Result};
pub use features::{CaseFeatureTable, CaseFeatures, DistanceMetric, FeatureSchema};
