//! Flag parsing, the optional TOML config file, and their merge.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(
    name = "anchorweight",
    version,
    about = "Anchor-aligned cohort weighting and estimation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the cohort model and write per-subject weights plus an ESS report.
    Weights(WeightsArgs),
    /// Weighted feature estimates with bootstrap uncertainty.
    Estimate(EstimateArgs),
    /// Run the two-scenario simulation study.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// TOML file with defaults for any flag; flags given on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Weighting method(s): translate, naive, anchor_only, importance.
    #[arg(long, value_delimiter = ',')]
    pub method: Option<Vec<String>>,
    /// Cohort model: logistic or qda.
    #[arg(long)]
    pub model: Option<String>,
    /// Number of bootstrap replicates (0 disables the bootstrap).
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Delimiter of tabular output files.
    #[arg(long)]
    pub delimiter: Option<char>,
    /// Significant digits in the printed table.
    #[arg(long)]
    pub precision: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub label_col: Option<String>,
    /// Label value of the anchor cohort.
    #[arg(long)]
    pub anchor: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub outcomes: Option<Vec<String>>,
    /// Covariates to one-hot encode.
    #[arg(long, value_delimiter = ',')]
    pub categorical: Option<Vec<String>>,
    /// Rows with missing values: drop or fail.
    #[arg(long)]
    pub missing: Option<String>,
    /// Upper quantile at which raw weights are capped.
    #[arg(long)]
    pub cap_quantile: Option<f64>,
}

#[derive(Debug, Args)]
pub struct WeightsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// ESS report path; defaults to the weight file with `.ess.json` appended.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Feature such as `mean:y`, `sd:y`, `cor:a,b`, `cor:*`, `cdf:y@1,2`,
    /// `quantile:y@0.9`, `mean:y|sex=F`. Repeatable.
    #[arg(long)]
    pub feature: Vec<String>,
    /// Categorical covariate; every feature is also estimated within each of
    /// its levels, with differences against the first level.
    #[arg(long)]
    pub by: Option<String>,
    /// Resample within cohorts instead of from the pooled sample.
    #[arg(long)]
    pub stratified: bool,
    /// Reuse the full-sample cohort model in every replicate.
    #[arg(long)]
    pub fixed_model: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Scenarios: dissimilar_y (y), dissimilar_xy (xy).
    #[arg(long, value_delimiter = ',')]
    pub scenario: Option<Vec<String>>,
    /// Total sample size(s); each scenario runs at every size.
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Parameter preset: default or calibrated.
    #[arg(long)]
    pub preset: Option<String>,
    /// Monte Carlo draws for the oracle check.
    #[arg(long)]
    pub mc_size: Option<usize>,
}

/// A list that may be written as a single string in the config file.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum StrList {
    One(String),
    Many(Vec<String>),
}

impl StrList {
    fn into_vec(self) -> Vec<String> {
        match self {
            StrList::One(s) => s.split(',').map(|t| t.trim().to_string()).collect(),
            StrList::Many(v) => v,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub input: Option<PathBuf>,
    pub label_col: Option<String>,
    pub anchor: Option<String>,
    pub covariates: Option<StrList>,
    pub outcomes: Option<StrList>,
    pub categorical: Option<StrList>,
    pub missing: Option<String>,
    pub cap_quantile: Option<f64>,
    pub method: Option<StrList>,
    pub model: Option<String>,
    pub bootstrap: Option<usize>,
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub delimiter: Option<char>,
    pub precision: Option<usize>,
    pub report: Option<PathBuf>,
    pub feature: Option<StrList>,
    pub by: Option<String>,
    pub stratified: Option<bool>,
    pub fixed_model: Option<bool>,
    pub scenario: Option<StrList>,
    pub n: Option<Vec<usize>>,
    pub replicates: Option<usize>,
    pub preset: Option<String>,
    pub mc_size: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }
}

pub const DEFAULT_SEED: u64 = 20_240_601;

/// Settings shared by every subcommand after merging flags over the file.
#[derive(Debug, Clone, Serialize)]
pub struct Common {
    pub methods: Vec<String>,
    pub model: Option<String>,
    pub bootstrap: usize,
    pub seed: u64,
    pub alpha: f64,
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[serde(skip)]
    pub threads: Option<usize>,
    pub delimiter: char,
    #[serde(skip)]
    pub precision: usize,
}

pub fn merge_common(a: CommonArgs, f: &FileConfig) -> Common {
    Common {
        methods: a
            .method
            .or_else(|| f.method.clone().map(StrList::into_vec))
            .unwrap_or_default(),
        model: a.model.or_else(|| f.model.clone()),
        bootstrap: a.bootstrap.or(f.bootstrap).unwrap_or(0),
        seed: a.seed.or(f.seed).unwrap_or(DEFAULT_SEED),
        alpha: a.alpha.or(f.alpha).unwrap_or(0.05),
        out: a.out.or_else(|| f.out.clone()),
        threads: a.threads.or(f.threads),
        delimiter: a.delimiter.or(f.delimiter).unwrap_or(','),
        precision: a.precision.or(f.precision).unwrap_or(4),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Data {
    pub input: PathBuf,
    pub label_col: String,
    pub anchor: String,
    pub covariates: Vec<String>,
    pub outcomes: Vec<String>,
    pub categorical: Vec<String>,
    pub missing: String,
    pub cap_quantile: Option<f64>,
}

pub fn merge_data(a: DataArgs, f: &FileConfig) -> Result<Data, String> {
    let list = |flag: Option<Vec<String>>, file: &Option<StrList>| {
        flag.or_else(|| file.clone().map(StrList::into_vec))
    };
    Ok(Data {
        input: a
            .input
            .or_else(|| f.input.clone())
            .ok_or("missing required option --input")?,
        label_col: a
            .label_col
            .or_else(|| f.label_col.clone())
            .ok_or("missing required option --label-col")?,
        anchor: a
            .anchor
            .or_else(|| f.anchor.clone())
            .unwrap_or_else(|| "0".into()),
        covariates: list(a.covariates, &f.covariates)
            .ok_or("missing required option --covariates")?,
        outcomes: list(a.outcomes, &f.outcomes).ok_or("missing required option --outcomes")?,
        categorical: list(a.categorical, &f.categorical).unwrap_or_default(),
        missing: a
            .missing
            .or_else(|| f.missing.clone())
            .unwrap_or_else(|| "drop".into()),
        cap_quantile: a.cap_quantile.or(f.cap_quantile),
    })
}

pub fn file_list(f: &Option<StrList>) -> Option<Vec<String>> {
    f.clone().map(StrList::into_vec)
}

/// As [`file_list`], but a single string stays one entry (feature specs
/// contain commas).
pub fn file_features(f: &Option<StrList>) -> Option<Vec<String>> {
    f.clone().map(|l| match l {
        StrList::One(s) => vec![s],
        StrList::Many(v) => v,
    })
}
