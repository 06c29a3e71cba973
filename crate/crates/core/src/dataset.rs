//! Multi-cohort tabular data: ingestion, validation and cohort prevalences.
//!
//! Labels are remapped so the anchor cohort is always internal index 0 and the
//! external cohorts follow as `1..=J`. Original label strings are kept for
//! reporting. Categorical covariates are one-hot expanded against their first
//! (sorted) level; the expansion map is retained so subgroup features can refer
//! to the original categories.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MISSING_TOKENS: &[&str] = &["", "NA", "N/A", "NaN", "nan", "null", "NULL", "."];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    #[default]
    Drop,
    Fail,
}

/// Column roles for [`load_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub label_column: String,
    #[serde(default = "default_anchor")]
    pub anchor_label: String,
    pub covariates: Vec<String>,
    /// Covariates that are read as category strings and one-hot expanded.
    #[serde(default)]
    pub categorical: Vec<String>,
    pub outcomes: Vec<String>,
    #[serde(default)]
    pub missing: MissingPolicy,
    /// Field delimiter; sniffed from the header line when absent.
    #[serde(default)]
    pub delimiter: Option<char>,
}

fn default_anchor() -> String {
    "0".to_string()
}

impl Schema {
    pub fn new(label_column: &str, covariates: &[&str], outcomes: &[&str]) -> Self {
        Self {
            label_column: label_column.to_string(),
            anchor_label: default_anchor(),
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
            categorical: Vec::new(),
            outcomes: outcomes.iter().map(|s| s.to_string()).collect(),
            missing: MissingPolicy::Drop,
            delimiter: None,
        }
    }

    pub fn with_anchor(mut self, anchor: &str) -> Self {
        self.anchor_label = anchor.to_string();
        self
    }

    pub fn with_categorical(mut self, cols: &[&str]) -> Self {
        self.categorical = cols.iter().map(|s| s.to_string()).collect();
        self
    }

    fn validate(&self) -> Result<()> {
        if self.label_column.is_empty() {
            return Err(Error::Schema("no label column named".into()));
        }
        if self.covariates.is_empty() {
            return Err(Error::Schema(
                "at least one covariate column is required".into(),
            ));
        }
        if self.outcomes.is_empty() {
            return Err(Error::Schema(
                "at least one outcome column is required".into(),
            ));
        }
        for c in &self.categorical {
            if !self.covariates.contains(c) {
                return Err(Error::Schema(format!(
                    "categorical column '{c}' is not listed as a covariate"
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for c in std::iter::once(&self.label_column)
            .chain(&self.covariates)
            .chain(&self.outcomes)
        {
            if !seen.insert(c) {
                return Err(Error::Schema(format!(
                    "column '{c}' assigned more than one role"
                )));
            }
        }
        Ok(())
    }
}

/// How one source covariate column maps onto the design columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CovariateEncoding {
    Numeric {
        name: String,
        column: usize,
    },
    /// `columns[k]` holds the indicator of `levels[k + 1]`; `levels[0]` is the
    /// reference level and has no column of its own.
    Categorical {
        name: String,
        levels: Vec<String>,
        codes: Vec<usize>,
        columns: Vec<usize>,
    },
}

impl CovariateEncoding {
    pub fn name(&self) -> &str {
        match self {
            CovariateEncoding::Numeric { name, .. }
            | CovariateEncoding::Categorical { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    labels: Vec<usize>,
    cohort_names: Vec<String>,
    covariates: DMatrix<f64>,
    outcomes: DMatrix<f64>,
    covariate_names: Vec<String>,
    outcome_names: Vec<String>,
    encodings: Vec<CovariateEncoding>,
}

impl Dataset {
    /// Builds a dataset from already-numeric parts. `labels` use internal
    /// indices with the anchor at 0; `cohort_names[s]` names cohort `s`.
    pub fn new(
        labels: Vec<usize>,
        cohort_names: Vec<String>,
        covariates: DMatrix<f64>,
        outcomes: DMatrix<f64>,
        covariate_names: Vec<String>,
        outcome_names: Vec<String>,
    ) -> Result<Self> {
        let encodings = covariate_names
            .iter()
            .enumerate()
            .map(|(column, name)| CovariateEncoding::Numeric {
                name: name.clone(),
                column,
            })
            .collect();
        Self::with_encodings(
            labels,
            cohort_names,
            covariates,
            outcomes,
            covariate_names,
            outcome_names,
            encodings,
        )
    }

    fn with_encodings(
        labels: Vec<usize>,
        cohort_names: Vec<String>,
        covariates: DMatrix<f64>,
        outcomes: DMatrix<f64>,
        covariate_names: Vec<String>,
        outcome_names: Vec<String>,
        encodings: Vec<CovariateEncoding>,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::Support("dataset has no subjects".into()));
        }
        if covariates.nrows() != n || outcomes.nrows() != n {
            return Err(Error::Shape(format!(
                "{} labels but {} covariate rows and {} outcome rows",
                n,
                covariates.nrows(),
                outcomes.nrows()
            )));
        }
        if covariates.ncols() != covariate_names.len() || outcomes.ncols() != outcome_names.len() {
            return Err(Error::Shape(
                "column names do not match matrix widths".into(),
            ));
        }
        if covariates.ncols() == 0 || outcomes.ncols() == 0 {
            return Err(Error::Shape(
                "need at least one covariate and one outcome".into(),
            ));
        }
        let k = cohort_names.len();
        let mut counts = vec![0usize; k];
        for &s in &labels {
            if s >= k {
                return Err(Error::Shape(format!("label {s} outside 0..{k}")));
            }
            counts[s] += 1;
        }
        if let Some(s) = counts.iter().position(|&c| c == 0) {
            let role = if s == 0 { "anchor cohort" } else { "cohort" };
            return Err(Error::Support(format!(
                "{role} '{}' is empty",
                cohort_names[s]
            )));
        }
        if covariates
            .iter()
            .chain(outcomes.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite(
                "covariates and outcomes must be finite".into(),
            ));
        }
        Ok(Self {
            labels,
            cohort_names,
            covariates,
            outcomes,
            covariate_names,
            outcome_names,
            encodings,
        })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    /// Number of cohorts including the anchor (J + 1).
    pub fn n_cohorts(&self) -> usize {
        self.cohort_names.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn n_outcomes(&self) -> usize {
        self.outcomes.ncols()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn cohort_names(&self) -> &[String] {
        &self.cohort_names
    }

    pub fn anchor_name(&self) -> &str {
        &self.cohort_names[0]
    }

    pub fn cohort_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_cohorts()];
        for &s in &self.labels {
            counts[s] += 1;
        }
        counts
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn outcome_names(&self) -> &[String] {
        &self.outcome_names
    }

    pub fn encodings(&self) -> &[CovariateEncoding] {
        &self.encodings
    }

    /// `Z = [X | Y]`, one row per subject.
    pub fn z_matrix(&self) -> DMatrix<f64> {
        let n = self.n();
        let p = self.n_covariates();
        let l = self.n_outcomes();
        DMatrix::from_fn(n, p + l, |i, j| {
            if j < p {
                self.covariates[(i, j)]
            } else {
                self.outcomes[(i, j - p)]
            }
        })
    }

    pub fn z_names(&self) -> Vec<String> {
        self.covariate_names
            .iter()
            .chain(&self.outcome_names)
            .cloned()
            .collect()
    }

    pub fn outcome_index(&self, name: &str) -> Result<usize> {
        self.outcome_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Spec(format!("unknown outcome '{name}'")))
    }

    /// Distinct values of a source covariate, as strings, in sorted order.
    pub fn levels_of(&self, covariate: &str) -> Result<Vec<String>> {
        match self.encoding_of(covariate)? {
            CovariateEncoding::Categorical { levels, .. } => Ok(levels.clone()),
            CovariateEncoding::Numeric { column, .. } => {
                let mut vals: Vec<f64> = self.covariates.column(*column).iter().copied().collect();
                vals.sort_by(f64::total_cmp);
                vals.dedup();
                Ok(vals.into_iter().map(format_number).collect())
            }
        }
    }

    fn encoding_of(&self, covariate: &str) -> Result<&CovariateEncoding> {
        self.encodings
            .iter()
            .find(|e| e.name() == covariate)
            .ok_or_else(|| Error::Spec(format!("unknown covariate '{covariate}'")))
    }

    /// Per-subject membership of `covariate == value`.
    pub fn subgroup_indicator(&self, covariate: &str, value: &str) -> Result<Vec<bool>> {
        let indicator: Vec<bool> = match self.encoding_of(covariate)? {
            CovariateEncoding::Categorical { levels, codes, .. } => {
                let code = levels.iter().position(|l| l == value).ok_or_else(|| {
                    Error::Spec(format!("covariate '{covariate}' has no category '{value}'"))
                })?;
                codes.iter().map(|&c| c == code).collect()
            }
            CovariateEncoding::Numeric { column, .. } => {
                let target: f64 = value.trim().parse().map_err(|_| {
                    Error::Spec(format!(
                        "covariate '{covariate}' is numeric; '{value}' is not a number"
                    ))
                })?;
                self.covariates
                    .column(*column)
                    .iter()
                    .map(|&v| v == target)
                    .collect()
            }
        };
        if !indicator.iter().any(|&b| b) {
            return Err(Error::Spec(format!("no subject has {covariate} = {value}")));
        }
        Ok(indicator)
    }

    /// Dataset made of the given rows (repeats allowed), keeping cohort
    /// structure. Fails with a support error if any cohort ends up empty.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Dataset> {
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        let covariates = self.covariates.select_rows(rows.iter());
        let outcomes = self.outcomes.select_rows(rows.iter());
        let encodings = self
            .encodings
            .iter()
            .map(|e| match e {
                CovariateEncoding::Categorical {
                    name,
                    levels,
                    codes,
                    columns,
                } => CovariateEncoding::Categorical {
                    name: name.clone(),
                    levels: levels.clone(),
                    codes: rows.iter().map(|&r| codes[r]).collect(),
                    columns: columns.clone(),
                },
                other => other.clone(),
            })
            .collect();
        Self::with_encodings(
            labels,
            self.cohort_names.clone(),
            covariates,
            outcomes,
            self.covariate_names.clone(),
            self.outcome_names.clone(),
            encodings,
        )
    }

    /// Same subjects and covariates with a replacement outcome block.
    pub fn with_outcomes(&self, outcomes: DMatrix<f64>, names: Vec<String>) -> Result<Dataset> {
        Self::with_encodings(
            self.labels.clone(),
            self.cohort_names.clone(),
            self.covariates.clone(),
            outcomes,
            self.covariate_names.clone(),
            names,
            self.encodings.clone(),
        )
    }

    pub fn summary(&self) -> DatasetSummary {
        let prev = cohort_prevalences(self);
        DatasetSummary {
            n: self.n(),
            j: self.n_cohorts() - 1,
            p: self.n_covariates(),
            l: self.n_outcomes(),
            anchor: self.anchor_name().to_string(),
            cohorts: self
                .cohort_names
                .iter()
                .zip(&prev.counts)
                .zip(&prev.pi_hat)
                .map(|((label, &count), &prevalence)| CohortSummary {
                    label: label.clone(),
                    count,
                    prevalence,
                })
                .collect(),
        }
    }

    /// Writes the dataset back as delimited text with original labels and
    /// category strings, readable by [`load_dataset`] with [`Dataset::schema`].
    pub fn write_delimited<W: Write>(
        &self,
        writer: W,
        delimiter: u8,
        label_column: &str,
    ) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .delimiter(delimiter)
            .from_writer(writer);
        let mut header = vec![label_column.to_string()];
        header.extend(self.encodings.iter().map(|e| e.name().to_string()));
        header.extend(self.outcome_names.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![self.cohort_names[self.labels[i]].clone()];
            for e in &self.encodings {
                rec.push(match e {
                    CovariateEncoding::Numeric { column, .. } => {
                        format_number(self.covariates[(i, *column)])
                    }
                    CovariateEncoding::Categorical { levels, codes, .. } => {
                        levels[codes[i]].clone()
                    }
                });
            }
            rec.extend((0..self.n_outcomes()).map(|j| format_number(self.outcomes[(i, j)])));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Schema that reads back the output of [`Dataset::write_delimited`].
    pub fn schema(&self, label_column: &str) -> Schema {
        Schema {
            label_column: label_column.to_string(),
            anchor_label: self.anchor_name().to_string(),
            covariates: self
                .encodings
                .iter()
                .map(|e| e.name().to_string())
                .collect(),
            categorical: self
                .encodings
                .iter()
                .filter(|e| matches!(e, CovariateEncoding::Categorical { .. }))
                .map(|e| e.name().to_string())
                .collect(),
            outcomes: self.outcome_names.clone(),
            missing: MissingPolicy::Fail,
            delimiter: None,
        }
    }
}

/// Shortest text that parses back to the same `f64`.
fn format_number(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub label: String,
    pub count: usize,
    pub prevalence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n: usize,
    pub j: usize,
    pub p: usize,
    pub l: usize,
    pub anchor: String,
    pub cohorts: Vec<CohortSummary>,
}

/// π̂ₛ = Nₛ / N for every cohort, anchor first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrevalenceVector {
    pub counts: Vec<usize>,
    pub n: usize,
    pub pi_hat: Vec<f64>,
}

impl PrevalenceVector {
    pub fn from_counts(counts: Vec<usize>) -> Result<Self> {
        let n: usize = counts.iter().sum();
        if counts.is_empty() || counts.contains(&0) {
            return Err(Error::Support(
                "every cohort needs at least one subject".into(),
            ));
        }
        let pi_hat = counts.iter().map(|&c| c as f64 / n as f64).collect();
        Ok(Self { counts, n, pi_hat })
    }

    pub fn len(&self) -> usize {
        self.pi_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi_hat.is_empty()
    }
}

pub fn cohort_prevalences(ds: &Dataset) -> PrevalenceVector {
    PrevalenceVector::from_counts(ds.cohort_counts())
        .expect("dataset invariants guarantee non-empty cohorts")
}

/// A loaded dataset plus ingestion bookkeeping.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub dataset: Dataset,
    /// 1-based data-row numbers dropped for missing values.
    pub dropped_rows: Vec<usize>,
}

fn is_missing(cell: &str) -> bool {
    MISSING_TOKENS.contains(&cell.trim())
}

fn sniff_delimiter(first_line: &str) -> u8 {
    if first_line.matches('\t').count() > first_line.matches(',').count() {
        b'\t'
    } else {
        b','
    }
}

fn label_order(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    }
}

fn same_label(a: &str, b: &str) -> bool {
    match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

/// Reads delimited text with a header row into a validated [`Dataset`].
pub fn load_dataset<R: Read>(mut source: R, schema: &Schema) -> Result<Loaded> {
    schema.validate()?;
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    let delimiter = match schema.delimiter {
        Some(c) => c as u8,
        None => sniff_delimiter(text.lines().next().unwrap_or("")),
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing required column '{name}'")))
    };
    let label_idx = col(&schema.label_column)?;
    let cov_idx: Vec<usize> = schema
        .covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;
    let out_idx: Vec<usize> = schema
        .outcomes
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;
    let is_cat: Vec<bool> = schema
        .covariates
        .iter()
        .map(|c| schema.categorical.contains(c))
        .collect();

    enum Cell {
        Num(f64),
        Cat(String),
    }

    let mut all_labels = BTreeSet::new();
    let mut kept_labels: Vec<String> = Vec::new();
    let mut kept_cov: Vec<Vec<Cell>> = Vec::new();
    let mut kept_out: Vec<Vec<f64>> = Vec::new();
    let mut dropped_rows = Vec::new();

    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record?;
        let get = |j: usize| record.get(j).unwrap_or("");
        let mut missing_col: Option<&str> = None;

        let label = get(label_idx).to_string();
        if is_missing(&label) {
            missing_col = Some(&schema.label_column);
        } else {
            all_labels.insert(label.clone());
        }

        let mut cov_cells = Vec::with_capacity(cov_idx.len());
        for (k, &j) in cov_idx.iter().enumerate() {
            let cell = get(j);
            let name = &schema.covariates[k];
            if is_missing(cell) {
                missing_col.get_or_insert(name);
                continue;
            }
            if is_cat[k] {
                cov_cells.push(Cell::Cat(cell.to_string()));
            } else {
                cov_cells.push(Cell::Num(parse_number(cell, row, name)?));
            }
        }
        let mut out_cells = Vec::with_capacity(out_idx.len());
        for (k, &j) in out_idx.iter().enumerate() {
            let cell = get(j);
            let name = &schema.outcomes[k];
            if is_missing(cell) {
                missing_col.get_or_insert(name);
                continue;
            }
            out_cells.push(parse_number(cell, row, name)?);
        }

        if let Some(column) = missing_col {
            match schema.missing {
                MissingPolicy::Fail => {
                    return Err(Error::Missing {
                        row,
                        column: column.to_string(),
                    })
                }
                MissingPolicy::Drop => {
                    dropped_rows.push(row);
                    continue;
                }
            }
        }
        kept_labels.push(label);
        kept_cov.push(cov_cells);
        kept_out.push(out_cells);
    }

    let anchor = all_labels
        .iter()
        .find(|l| same_label(l, &schema.anchor_label))
        .cloned()
        .ok_or_else(|| {
            Error::Support(format!(
                "anchor label '{}' does not occur in column '{}' (anchor cohort empty)",
                schema.anchor_label, schema.label_column
            ))
        })?;
    let mut cohort_names = vec![anchor.clone()];
    let mut externals: Vec<String> = all_labels.into_iter().filter(|l| *l != anchor).collect();
    externals.sort_by(|a, b| label_order(a, b));
    cohort_names.extend(externals);
    let label_map: BTreeMap<&str, usize> = cohort_names
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let labels: Vec<usize> = kept_labels.iter().map(|l| label_map[l.as_str()]).collect();
    let n = labels.len();
    if n == 0 {
        return Err(Error::Support(
            "no rows left after removing missing values".into(),
        ));
    }

    // Design columns: numeric columns map 1:1, categorical ones expand to
    // one indicator per non-reference level.
    let mut encodings = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut covariate_names = Vec::new();
    for (k, name) in schema.covariates.iter().enumerate() {
        if is_cat[k] {
            let levels: Vec<String> = kept_cov
                .iter()
                .map(|row| match &row[k] {
                    Cell::Cat(s) => s.clone(),
                    Cell::Num(_) => unreachable!(),
                })
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let codes: Vec<usize> = kept_cov
                .iter()
                .map(|row| match &row[k] {
                    Cell::Cat(s) => levels.binary_search(s).unwrap(),
                    Cell::Num(_) => unreachable!(),
                })
                .collect();
            let mut cols = Vec::new();
            for (lvl_idx, lvl) in levels.iter().enumerate().skip(1) {
                cols.push(columns.len());
                covariate_names.push(format!("{name}={lvl}"));
                columns.push(codes.iter().map(|&c| (c == lvl_idx) as u8 as f64).collect());
            }
            encodings.push(CovariateEncoding::Categorical {
                name: name.clone(),
                levels,
                codes,
                columns: cols,
            });
        } else {
            encodings.push(CovariateEncoding::Numeric {
                name: name.clone(),
                column: columns.len(),
            });
            covariate_names.push(name.clone());
            columns.push(
                kept_cov
                    .iter()
                    .map(|row| match row[k] {
                        Cell::Num(v) => v,
                        Cell::Cat(_) => unreachable!(),
                    })
                    .collect(),
            );
        }
    }
    if columns.is_empty() {
        return Err(Error::Schema(
            "categorical covariates have a single level each; no usable covariate columns".into(),
        ));
    }
    let covariates = DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i]);
    let outcomes = DMatrix::from_fn(n, out_idx.len(), |i, j| kept_out[i][j]);

    let dataset = Dataset::with_encodings(
        labels,
        cohort_names,
        covariates,
        outcomes,
        covariate_names,
        schema.outcomes.clone(),
        encodings,
    )
    .map_err(|e| match e {
        Error::Support(msg) => Error::Support(format!("{msg} after filtering")),
        other => other,
    })?;
    Ok(Loaded {
        dataset,
        dropped_rows,
    })
}

fn parse_number(cell: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = cell.parse().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("'{cell}' is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            column: column.to_string(),
            message: format!("'{cell}' is not finite"),
        });
    }
    Ok(v)
}
