//! Anchor-aligned weighting of multi-cohort data.
//!
//! A multinomial cohort model gives log density ratios between each external
//! cohort and the anchor; these become per-subject weights whose weighted
//! moments estimate anchor-population features while borrowing effective
//! sample size from the external cohorts.

pub mod alignment;
pub mod baselines;
pub mod cohort_model;
pub mod dataset;
pub mod error;
pub mod functionals;
pub mod pipeline;
pub mod resampling;
pub mod rng;
pub mod simulation;

pub use alignment::{
    align, alignment_factors, alignment_weights, cohort_ess, composite_ess, normalize_weights,
    translate_proportions, Alignment, AlignmentConfig, AlignmentFactors, AlignmentProportions,
    EssReport, GammaChoice, WeightSet,
};
pub use cohort_model::{
    predict_eta, CohortClassifier, CohortProbabilityModel, EtaMatrix, ModelConfig, ModelInput,
};
pub use dataset::{
    cohort_prevalences, load_dataset, Dataset, MissingPolicy, PrevalenceVector, Schema,
};
pub use error::{Error, Result};
pub use functionals::{estimate_feature, FeatureKind, FeatureSpec, FunctionalEstimate, Subgroup};
pub use pipeline::{
    compute_weights, compute_weights_with_model, Method, PipelineConfig, Weighting,
};
pub use resampling::{
    bootstrap_pipeline, paired_difference, BootstrapConfig, BootstrapOutput, BootstrapResult,
};
