//! Cohort-membership models θₛ(z) = P(S = s | Z = z) and the log ratios
//! ηₛ(z) = log θₛ(z)/θ₀(z) that the alignment step consumes.
//!
//! Two model families are provided: a ridge-penalized multinomial logistic
//! regression fitted by Newton/IRLS, and quadratic discriminant analysis.
//! Other classifiers plug in through [`CohortClassifier`].

mod logistic;
mod qda;

pub use logistic::{fit_multinomial_logistic, LogisticConfig, LogisticModel};
pub use qda::{fit_qda, QdaModel};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Probabilities are clipped into `[PROB_CLIP, 1 - PROB_CLIP]` before logs.
pub const PROB_CLIP: f64 = 1e-6;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Which columns of a dataset a model is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelInput {
    /// z = (x, y): the alignment model.
    #[default]
    CovariatesAndOutcomes,
    /// x only: the covariate-shift (importance weighting) model.
    CovariatesOnly,
}

impl ModelInput {
    pub fn matrix(self, ds: &Dataset) -> DMatrix<f64> {
        match self {
            ModelInput::CovariatesAndOutcomes => ds.z_matrix(),
            ModelInput::CovariatesOnly => ds.covariates().clone(),
        }
    }

    pub fn names(self, ds: &Dataset) -> Vec<String> {
        match self {
            ModelInput::CovariatesAndOutcomes => ds.z_names(),
            ModelInput::CovariatesOnly => ds.covariate_names().to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMapKind {
    #[default]
    Identity,
    /// Identity plus all squares and pairwise products.
    Quadratic,
}

/// Resolved feature transformation. Squares of two-valued columns are
/// skipped because they duplicate the column itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap {
    Identity { dim: usize },
    Quadratic { dim: usize, skip_square: Vec<usize> },
}

impl FeatureMap {
    pub fn resolve(kind: FeatureMapKind, inputs: &DMatrix<f64>) -> Self {
        let dim = inputs.ncols();
        match kind {
            FeatureMapKind::Identity => FeatureMap::Identity { dim },
            FeatureMapKind::Quadratic => {
                let skip_square = (0..dim)
                    .filter(|&j| {
                        let col = inputs.column(j);
                        let first = col[0];
                        let other = col.iter().copied().find(|&v| v != first);
                        match other {
                            None => true,
                            Some(o) => col.iter().all(|&v| v == first || v == o),
                        }
                    })
                    .collect();
                FeatureMap::Quadratic { dim, skip_square }
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            FeatureMap::Identity { dim } | FeatureMap::Quadratic { dim, .. } => *dim,
        }
    }

    fn pairs(&self) -> Vec<(usize, usize)> {
        match self {
            FeatureMap::Identity { .. } => Vec::new(),
            FeatureMap::Quadratic { dim, skip_square } => {
                let mut out = Vec::new();
                for a in 0..*dim {
                    for b in a..*dim {
                        if a == b && skip_square.contains(&a) {
                            continue;
                        }
                        out.push((a, b));
                    }
                }
                out
            }
        }
    }

    pub fn names(&self, input_names: &[String]) -> Vec<String> {
        let mut names = input_names.to_vec();
        names.extend(self.pairs().into_iter().map(|(a, b)| {
            if a == b {
                format!("{}^2", input_names[a])
            } else {
                format!("{}*{}", input_names[a], input_names[b])
            }
        }));
        names
    }

    pub fn apply(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let dim = self.input_dim();
        if inputs.ncols() != dim {
            return Err(Error::Shape(format!(
                "model expects {dim} input columns, got {}",
                inputs.ncols()
            )));
        }
        let pairs = self.pairs();
        if pairs.is_empty() {
            return Ok(inputs.clone());
        }
        let n = inputs.nrows();
        Ok(DMatrix::from_fn(n, dim + pairs.len(), |i, j| {
            if j < dim {
                inputs[(i, j)]
            } else {
                let (a, b) = pairs[j - dim];
                inputs[(i, a)] * inputs[(i, b)]
            }
        }))
    }
}

/// η̂ₛ(zᵢ) for every subject (rows) and cohort (columns); column 0 is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaMatrix {
    values: DMatrix<f64>,
}

impl EtaMatrix {
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(Error::Shape(
                "eta matrix needs at least the anchor column".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(
                "eta matrix contains non-finite entries".into(),
            ));
        }
        if values.column(0).iter().any(|&v| v != 0.0) {
            return Err(Error::Domain(
                "eta column for the anchor must be zero".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cohorts(&self) -> usize {
        self.values.ncols()
    }

    pub fn get(&self, i: usize, s: usize) -> f64 {
        self.values[(i, s)]
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Rows selected by index, for reuse of a fixed model across resamples.
    pub fn select_rows(&self, rows: &[usize]) -> EtaMatrix {
        EtaMatrix {
            values: self.values.select_rows(rows.iter()),
        }
    }

    /// Softmax against the anchor column: recovers (clipped) θₛ(zᵢ).
    pub fn probabilities(&self) -> DMatrix<f64> {
        let mut p = self.values.clone();
        for mut row in p.row_iter_mut() {
            let m = row.max();
            row.iter_mut().for_each(|v| *v = (*v - m).exp());
            let s: f64 = row.sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        p
    }
}

/// Any model that yields log cohort probabilities. Implement this to plug in
/// tree ensembles or other classifiers.
pub trait CohortClassifier {
    fn n_cohorts(&self) -> usize;
    fn input(&self) -> ModelInput;
    /// Unclipped log θₛ for each row of `inputs` (N × (J+1)).
    fn log_probabilities(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CohortProbabilityModel {
    MultinomialLogistic(LogisticModel),
    QuadraticDiscriminant(QdaModel),
}

impl CohortProbabilityModel {
    pub fn kind(&self) -> &'static str {
        match self {
            CohortProbabilityModel::MultinomialLogistic(_) => "multinomial_logistic",
            CohortProbabilityModel::QuadraticDiscriminant(_) => "quadratic_discriminant",
        }
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Saved<'a> {
            format_version: u32,
            model: &'a CohortProbabilityModel,
        }
        Ok(serde_json::to_string_pretty(&Saved {
            format_version: MODEL_FORMAT_VERSION,
            model: self,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Saved {
            format_version: u32,
            model: CohortProbabilityModel,
        }
        let saved: Saved = serde_json::from_str(text)?;
        if saved.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::ModelFormat(format!(
                "unsupported model format version {}",
                saved.format_version
            )));
        }
        Ok(saved.model)
    }
}

impl CohortClassifier for CohortProbabilityModel {
    fn n_cohorts(&self) -> usize {
        match self {
            CohortProbabilityModel::MultinomialLogistic(m) => m.n_cohorts(),
            CohortProbabilityModel::QuadraticDiscriminant(m) => m.n_cohorts(),
        }
    }

    fn input(&self) -> ModelInput {
        match self {
            CohortProbabilityModel::MultinomialLogistic(m) => m.input(),
            CohortProbabilityModel::QuadraticDiscriminant(m) => m.input(),
        }
    }

    fn log_probabilities(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            CohortProbabilityModel::MultinomialLogistic(m) => m.log_probabilities(inputs),
            CohortProbabilityModel::QuadraticDiscriminant(m) => m.log_probabilities(inputs),
        }
    }
}

/// Which model family to fit, with its settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Logistic(LogisticConfig),
    Qda { reg: f64 },
}

impl ModelConfig {
    pub fn logistic() -> Self {
        ModelConfig::Logistic(LogisticConfig::default())
    }

    pub fn qda() -> Self {
        ModelConfig::Qda { reg: 0.0 }
    }

    pub fn fit(&self, ds: &Dataset, input: ModelInput) -> Result<CohortProbabilityModel> {
        match self {
            ModelConfig::Logistic(cfg) => Ok(CohortProbabilityModel::MultinomialLogistic(
                fit_multinomial_logistic(ds, input, cfg)?,
            )),
            ModelConfig::Qda { reg } => Ok(CohortProbabilityModel::QuadraticDiscriminant(fit_qda(
                ds, input, *reg,
            )?)),
        }
    }
}

/// η̂ₛ(zᵢ) = log θ̂ₛ(zᵢ) − log θ̂₀(zᵢ) with θ̂ clipped into [ε, 1 − ε].
pub fn predict_eta<M: CohortClassifier + ?Sized>(model: &M, ds: &Dataset) -> Result<EtaMatrix> {
    if model.n_cohorts() != ds.n_cohorts() {
        return Err(Error::Shape(format!(
            "model has {} cohorts, dataset has {}",
            model.n_cohorts(),
            ds.n_cohorts()
        )));
    }
    let logp = model.log_probabilities(&model.input().matrix(ds))?;
    eta_from_log_probabilities(&logp)
}

pub fn eta_from_log_probabilities(logp: &DMatrix<f64>) -> Result<EtaMatrix> {
    let lo = PROB_CLIP.ln();
    let hi = (1.0 - PROB_CLIP).ln();
    let mut eta = DMatrix::zeros(logp.nrows(), logp.ncols());
    for i in 0..logp.nrows() {
        let base = logp[(i, 0)].clamp(lo, hi);
        for s in 1..logp.ncols() {
            eta[(i, s)] = logp[(i, s)].clamp(lo, hi) - base;
        }
    }
    EtaMatrix::from_matrix(eta)
}

/// log Σ exp(v) without overflow.
pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
