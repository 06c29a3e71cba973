//! Comparator weightings: naive pooling, anchor-only analysis, and
//! covariate-only importance weighting.

use crate::alignment::{alignment_factors, normalize_weights, AlignmentProportions, WeightSet};
use crate::cohort_model::{predict_eta, CohortProbabilityModel, ModelConfig, ModelInput};
use crate::dataset::{cohort_prevalences, Dataset};
use crate::error::Result;

/// Unit weight for every subject.
pub fn naive_weights(ds: &Dataset) -> WeightSet {
    WeightSet::new(vec![1.0; ds.n()], "naive").expect("unit weights sum to N")
}

/// N/N₀ on anchor subjects, zero elsewhere.
pub fn anchor_only_weights(ds: &Dataset) -> WeightSet {
    let n = ds.n() as f64;
    let n0 = ds.cohort_counts()[0] as f64;
    let w = ds
        .labels()
        .iter()
        .map(|&s| if s == 0 { n / n0 } else { 0.0 })
        .collect();
    let mut gamma = vec![0.0; ds.n_cohorts()];
    gamma[0] = 1.0;
    WeightSet::new(w, "anchor_only")
        .expect("anchor weights sum to N")
        .with_gamma(AlignmentProportions::new(gamma).expect("vertex of the simplex"))
}

/// Covariate-shift weights ψ̂ˣᵢ = (π̂_{sᵢ}/π̂₀)·θ̂₀(xᵢ)/θ̂_{sᵢ}(xᵢ) from a model
/// fitted on covariates only, with the cohort proportions left at π̂.
pub fn importance_weights(ds: &Dataset, model_cfg: &ModelConfig) -> Result<WeightSet> {
    let model = model_cfg.fit(ds, ModelInput::CovariatesOnly)?;
    importance_weights_with_model(ds, &model)
}

pub fn importance_weights_with_model(
    ds: &Dataset,
    model: &CohortProbabilityModel,
) -> Result<WeightSet> {
    let prev = cohort_prevalences(ds);
    let eta = predict_eta(model, ds)?;
    let psi = alignment_factors(&eta, ds.labels(), &prev)?;
    Ok(normalize_weights(psi.values(), "importance")?
        .with_gamma(AlignmentProportions::new(prev.pi_hat.clone())?))
}
