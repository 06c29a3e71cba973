//! Stage 1 end to end: fit the cohort model, derive weights for a chosen
//! method, and report the composite ESS.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alignment::{align, composite_ess, AlignmentConfig, EssReport, WeightSet};
use crate::baselines::{anchor_only_weights, importance_weights_with_model, naive_weights};
use crate::cohort_model::{predict_eta, CohortProbabilityModel, ModelConfig, ModelInput};
use crate::dataset::{cohort_prevalences, Dataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Translate,
    Naive,
    AnchorOnly,
    Importance,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Naive,
        Method::AnchorOnly,
        Method::Importance,
        Method::Translate,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Translate => "translate",
            Method::Naive => "naive",
            Method::AnchorOnly => "anchor_only",
            Method::Importance => "importance",
        }
    }

    /// Columns the method's cohort model uses, if it fits one.
    pub fn model_input(self) -> Option<ModelInput> {
        match self {
            Method::Translate => Some(ModelInput::CovariatesAndOutcomes),
            Method::Importance => Some(ModelInput::CovariatesOnly),
            Method::Naive | Method::AnchorOnly => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "translate" => Ok(Method::Translate),
            "naive" => Ok(Method::Naive),
            "anchor_only" | "anchor" => Ok(Method::AnchorOnly),
            "importance" | "iw" => Ok(Method::Importance),
            other => Err(Error::Spec(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub method: Method,
    pub model: ModelConfig,
    #[serde(default)]
    pub alignment: AlignmentConfig,
}

impl PipelineConfig {
    pub fn new(method: Method, model: ModelConfig) -> Self {
        Self {
            method,
            model,
            alignment: AlignmentConfig::default(),
        }
    }

    /// Fits the method's cohort model, if it has one.
    pub fn fit_model(&self, ds: &Dataset) -> Result<Option<CohortProbabilityModel>> {
        self.method
            .model_input()
            .map(|input| self.model.fit(ds, input))
            .transpose()
    }
}

/// Weights plus their diagnostics.
#[derive(Debug, Clone)]
pub struct Weighting {
    pub weights: WeightSet,
    pub composite_ess: f64,
    /// Per-cohort breakdown; only for the alignment-weighting method.
    pub report: Option<EssReport>,
}

pub fn compute_weights(ds: &Dataset, cfg: &PipelineConfig) -> Result<Weighting> {
    let model = cfg.fit_model(ds)?;
    compute_weights_with_model(ds, cfg, model.as_ref())
}

/// As [`compute_weights`], but with an already-fitted cohort model.
pub fn compute_weights_with_model(
    ds: &Dataset,
    cfg: &PipelineConfig,
    model: Option<&CohortProbabilityModel>,
) -> Result<Weighting> {
    let need_model = || {
        model.ok_or_else(|| Error::Domain(format!("method {} needs a fitted model", cfg.method)))
    };
    let (weights, report) = match cfg.method {
        Method::Naive => (naive_weights(ds), None),
        Method::AnchorOnly => (anchor_only_weights(ds), None),
        Method::Importance => (importance_weights_with_model(ds, need_model()?)?, None),
        Method::Translate => {
            let eta = predict_eta(need_model()?, ds)?;
            let prev = cohort_prevalences(ds);
            let a = align(&eta, ds.labels(), &prev, ds.cohort_names(), &cfg.alignment)?;
            (a.weights, Some(a.report))
        }
    };
    Ok(Weighting {
        composite_ess: composite_ess(&weights),
        weights,
        report,
    })
}
