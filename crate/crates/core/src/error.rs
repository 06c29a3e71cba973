use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at data row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("missing value at data row {row}, column '{column}'")]
    Missing { row: usize, column: String },

    #[error("support error: {0}")]
    Support(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("rank-deficient design: column(s) {} are collinear with earlier columns", .columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("covariance of cohort '{cohort}' is singular; add regularization")]
    Singular { cohort: String },

    #[error("cohort '{cohort}' has {count} subjects but the model needs more than {dim}")]
    InsufficientData {
        cohort: String,
        count: usize,
        dim: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    #[error("feature spec error: {0}")]
    Spec(String),

    #[error("subgroup '{0}' has zero weighted mass")]
    SubgroupSupport(String),

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("bootstrap pairing error: {0}")]
    Pairing(String),

    #[error("bootstrap error: {0}")]
    Bootstrap(String),

    #[error("study error: {0}")]
    Study(String),

    #[error("model format error: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
