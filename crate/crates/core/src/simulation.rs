//! Two-cohort simulation study: data generation, ground-truth anchor
//! features, and a replicated comparison of weighting methods.
//!
//! Generating model (cohort s ∈ {0, 1}, anchor with probability π₀):
//!
//! ```text
//! x1 ~ Bernoulli(0.2)   x2 ~ Uniform(0, u)   x3 ~ N(0, v)   x4 | s ~ N(φx·s, v)
//! (y1, y2) | x, s ~ N2(Σx + φy·s, σₛ² [[1, ρₛ], [ρₛ, 1]]),  ρ₀ = −½, ρ₁ = +½
//! ```
//!
//! The spread parameter `v` is read either as a variance or as a standard
//! deviation, see [`VarianceConvention`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use nalgebra::DMatrix;

use crate::alignment::AlignmentConfig;
use crate::cohort_model::ModelConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::functionals::{estimate_feature, FeatureKind, FeatureSpec};
use crate::pipeline::{compute_weights, Method, PipelineConfig};
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceConvention {
    /// "N(m, 0.1)" means variance 0.1.
    #[default]
    Variance,
    /// "N(m, 0.1)" means standard deviation 0.1.
    Sd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub n: usize,
    /// Probability that a subject belongs to the anchor cohort.
    pub pi0: f64,
    pub phi_x: f64,
    pub phi_y: f64,
    pub sigma0: f64,
    pub sigma1: f64,
    pub x1_prob: f64,
    /// Upper end of the x2 uniform range.
    pub x2_upper: f64,
    /// Spread of x3 and x4, interpreted per `variance_convention`.
    pub normal_spread: f64,
    pub variance_convention: VarianceConvention,
}

impl ScenarioConfig {
    fn base(name: &str, n: usize, phi_x: f64) -> Self {
        Self {
            name: name.to_string(),
            n,
            pi0: 0.05,
            phi_x,
            phi_y: 1.5,
            sigma0: 0.5,
            sigma1: 0.6,
            x1_prob: 0.2,
            x2_upper: 0.1,
            normal_spread: 0.1,
            variance_convention: VarianceConvention::Variance,
        }
    }

    /// Similar covariates, shifted outcomes (φx = 0).
    pub fn dissimilar_y(n: usize) -> Self {
        Self::base("dissimilar_y", n, 0.0)
    }

    /// Shifted covariates and outcomes (φx = 1).
    pub fn dissimilar_xy(n: usize) -> Self {
        Self::base("dissimilar_xy", n, 1.0)
    }

    /// x2 ~ Uniform(0, √0.1), so that V(x2) = 1/120.
    pub fn with_reference_x2(mut self) -> Self {
        self.x2_upper = 0.1f64.sqrt();
        self
    }

    /// π₀ = 0.1, φy = 0.5 and the reference x2 range. Under these values the
    /// naive pooled bias of the anchor mean is (1 − π₀)(φx + φy): 0.45 with
    /// φx = 0 and 1.35 with φx = 1.
    pub fn calibrated(mut self) -> Self {
        self.pi0 = 0.1;
        self.phi_y = 0.5;
        self.with_reference_x2()
    }

    pub fn by_name(name: &str, n: usize) -> Result<Self> {
        match name {
            "dissimilar_y" | "y" => Ok(Self::dissimilar_y(n)),
            "dissimilar_xy" | "xy" => Ok(Self::dissimilar_xy(n)),
            other => Err(Error::Spec(format!("unknown scenario '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.n >= 2
            && self.pi0 > 0.0
            && self.pi0 < 1.0
            && self.sigma0 > 0.0
            && self.sigma1 > 0.0
            && (0.0..=1.0).contains(&self.x1_prob)
            && self.x2_upper >= 0.0
            && self.normal_spread > 0.0
            && self.phi_x.is_finite()
            && self.phi_y.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "invalid scenario configuration '{}'",
                self.name
            )))
        }
    }

    /// Variance of x3 and x4 under the configured convention.
    pub fn normal_variance(&self) -> f64 {
        match self.variance_convention {
            VarianceConvention::Variance => self.normal_spread,
            VarianceConvention::Sd => self.normal_spread * self.normal_spread,
        }
    }

    /// E[Σx | S = 0] and V(Σx | S = 0).
    pub fn anchor_covariate_moments(&self) -> (f64, f64) {
        let p = self.x1_prob;
        let u = self.x2_upper;
        let v = self.normal_variance();
        (p + u / 2.0, p * (1.0 - p) + u * u / 12.0 + 2.0 * v)
    }
}

/// One subject drawn from cohort `s`.
fn draw_subject<R: Rng>(cfg: &ScenarioConfig, s: usize, rng: &mut R) -> ([f64; 4], [f64; 2]) {
    let sd = cfg.normal_variance().sqrt();
    let sf = s as f64;
    let x1 = (rng.random::<f64>() < cfg.x1_prob) as u8 as f64;
    let x2 = cfg.x2_upper * rng.random::<f64>();
    let z3: f64 = StandardNormal.sample(rng);
    let z4: f64 = StandardNormal.sample(rng);
    let x = [x1, x2, sd * z3, cfg.phi_x * sf + sd * z4];
    let mean = x.iter().sum::<f64>() + cfg.phi_y * sf;
    let (sigma, rho) = if s == 0 {
        (cfg.sigma0, -0.5)
    } else {
        (cfg.sigma1, 0.5)
    };
    let e1: f64 = StandardNormal.sample(rng);
    let e2: f64 = StandardNormal.sample(rng);
    let y1 = mean + sigma * e1;
    let y2 = mean + sigma * (rho * e1 + (1.0f64 - rho * rho).sqrt() * e2);
    (x, [y1, y2])
}

pub fn generate_dataset(cfg: &ScenarioConfig, seed: u64) -> Result<Dataset> {
    generate_with_stream(cfg, seed, 0)
}

pub(crate) fn generate_with_stream(
    cfg: &ScenarioConfig,
    seed: u64,
    stream: u64,
) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = stream_rng(seed, stream);
    let n = cfg.n;
    let mut labels = Vec::with_capacity(n);
    let mut x = DMatrix::zeros(n, 4);
    let mut y = DMatrix::zeros(n, 2);
    for i in 0..n {
        let s = (rng.random::<f64>() >= cfg.pi0) as usize;
        let (xi, yi) = draw_subject(cfg, s, &mut rng);
        labels.push(s);
        for j in 0..4 {
            x[(i, j)] = xi[j];
        }
        y[(i, 0)] = yi[0];
        y[(i, 1)] = yi[1];
    }
    Dataset::new(
        labels,
        vec!["0".into(), "1".into()],
        x,
        y,
        (1..=4).map(|j| format!("x{j}")).collect(),
        vec!["y1".into(), "y2".into()],
    )
}

/// Anchor-cohort mean of y1, SD of y2, and covariance of (y1, y2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truths {
    pub mean_y1: f64,
    pub sd_y2: f64,
    pub cov_y1_y2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleTruths {
    pub closed_form: Truths,
    pub monte_carlo: Truths,
    pub monte_carlo_se: Truths,
    pub mc_size: usize,
    /// |closed form − Monte Carlo| in Monte Carlo SEs.
    pub z_scores: Truths,
    pub agree: bool,
}

/// Closed-form anchor truths from Gaussian/Bernoulli/Uniform moment algebra.
pub fn closed_form_truths(cfg: &ScenarioConfig) -> Truths {
    let (mu, v) = cfg.anchor_covariate_moments();
    let s2 = cfg.sigma0 * cfg.sigma0;
    Truths {
        mean_y1: mu,
        sd_y2: (v + s2).sqrt(),
        cov_y1_y2: v - 0.5 * s2,
    }
}

const MC_CHUNK: usize = 1 << 16;

/// Closed-form truths plus an independent Monte Carlo check from `mc_size`
/// anchor draws.
pub fn oracle_truths(cfg: &ScenarioConfig, mc_size: usize, seed: u64) -> Result<OracleTruths> {
    cfg.validate()?;
    if mc_size < 2 {
        return Err(Error::Domain("Monte Carlo size must be at least 2".into()));
    }
    let cf = closed_form_truths(cfg);
    // Shifted sums about the closed-form centre keep cancellation small.
    let c = cf.mean_y1;
    let chunks = mc_size.div_ceil(MC_CHUNK);
    let sums = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(seed, k as u64);
            let len = MC_CHUNK.min(mc_size - k * MC_CHUNK);
            let mut acc = [0.0f64; 8];
            for _ in 0..len {
                let (_, y) = draw_subject(cfg, 0, &mut rng);
                let a = y[0] - c;
                let b = y[1] - c;
                acc[0] += a;
                acc[1] += a * a;
                acc[2] += b;
                acc[3] += b * b;
                acc[4] += b * b * b * b;
                acc[5] += a * b;
                acc[6] += a * a * b * b;
                acc[7] += b * b * b;
            }
            acc
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold([0.0f64; 8], |mut t, a| {
            for (x, y) in t.iter_mut().zip(a) {
                *x += y;
            }
            t
        });
    let n = mc_size as f64;
    let m: Vec<f64> = sums.iter().map(|s| s / n).collect();
    let (ma, maa, mb, mbb, mb4, mab, ma2b2, mb3) = (m[0], m[1], m[2], m[3], m[4], m[5], m[6], m[7]);
    let var_a = maa - ma * ma;
    let var_b = mbb - mb * mb;
    let cov = mab - ma * mb;
    // Fourth central moment of b from raw moments.
    let mu4_b = mb4 - 4.0 * mb * mb3 + 6.0 * mb * mb * mbb - 3.0 * mb.powi(4);
    let sd_b = var_b.sqrt();
    let mc = Truths {
        mean_y1: c + ma,
        sd_y2: sd_b,
        cov_y1_y2: cov,
    };
    let se = Truths {
        mean_y1: (var_a / n).sqrt(),
        sd_y2: ((mu4_b - var_b * var_b) / n).sqrt() / (2.0 * sd_b),
        cov_y1_y2: ((ma2b2 - mab * mab) / n).sqrt(),
    };
    let z = Truths {
        mean_y1: (cf.mean_y1 - mc.mean_y1).abs() / se.mean_y1,
        sd_y2: (cf.sd_y2 - mc.sd_y2).abs() / se.sd_y2,
        cov_y1_y2: (cf.cov_y1_y2 - mc.cov_y1_y2).abs() / se.cov_y1_y2,
    };
    Ok(OracleTruths {
        closed_form: cf,
        monte_carlo: mc,
        monte_carlo_se: se,
        mc_size,
        agree: z.mean_y1 <= 5.0 && z.sd_y2 <= 5.0 && z.cov_y1_y2 <= 5.0,
        z_scores: z,
    })
}

/// Anchor truth of a feature under the scenario, where it has a closed form.
pub fn feature_truth(spec: &FeatureSpec, cfg: &ScenarioConfig) -> Result<f64> {
    let (mu, v) = cfg.anchor_covariate_moments();
    let s2 = cfg.sigma0 * cfg.sigma0;
    let var = v + s2;
    let cov = |a: usize, b: usize| if a == b { var } else { v - 0.5 * s2 };
    if spec.subgroup.is_some() {
        return Err(Error::Spec(
            "no closed-form truth for subgroup features".into(),
        ));
    }
    let check = |i: usize| {
        if i < 2 {
            Ok(i)
        } else {
            Err(Error::Spec(format!("outcome index {i} not simulated")))
        }
    };
    match &spec.kind {
        FeatureKind::Mean { outcome } => check(*outcome).map(|_| mu),
        FeatureKind::Variance { outcome } => check(*outcome).map(|_| var),
        FeatureKind::Sd { outcome } => check(*outcome).map(|_| var.sqrt()),
        FeatureKind::Covariance { a, b } => Ok(cov(check(*a)?, check(*b)?)),
        FeatureKind::Correlation { a, b } => Ok(cov(check(*a)?, check(*b)?) / var),
        _ => Err(Error::Spec(
            "no closed-form truth for this feature kind".into(),
        )),
    }
}

/// The three features of the simulation table.
pub fn study_features() -> Vec<FeatureSpec> {
    vec![
        FeatureKind::Mean { outcome: 0 }.into(),
        FeatureKind::Sd { outcome: 1 }.into(),
        FeatureKind::Covariance { a: 0, b: 1 }.into(),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub scenarios: Vec<ScenarioConfig>,
    pub replicates: usize,
    pub methods: Vec<Method>,
    pub features: Vec<FeatureSpec>,
    pub model: ModelConfig,
    #[serde(default)]
    pub alignment: AlignmentConfig,
    pub seed: u64,
    /// Failed-replicate fraction above which the study errors.
    pub max_failure_rate: f64,
}

impl StudyConfig {
    pub fn new(scenarios: Vec<ScenarioConfig>, replicates: usize, seed: u64) -> Self {
        Self {
            scenarios,
            replicates,
            methods: vec![Method::Naive, Method::Importance, Method::Translate],
            features: study_features(),
            model: ModelConfig::qda(),
            alignment: AlignmentConfig::default(),
            seed,
            max_failure_rate: 0.05,
        }
    }
}

/// Estimates from one method on one simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub scenario: String,
    pub replicate: usize,
    pub method: Method,
    pub n0: usize,
    pub composite_ess: f64,
    /// Σ Q̂⁽ˢ⁾, for the alignment method only.
    pub sum_cohort_ess: Option<f64>,
    pub estimates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub scenario: String,
    pub method: Method,
    pub feature: String,
    pub truth: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    /// Mean of |estimate − truth| across replicates.
    pub abs_bias: f64,
    pub abs_bias_se: f64,
    pub rmse: f64,
    pub rmse_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssSummary {
    pub scenario: String,
    pub method: Method,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    /// Share of replicates whose composite ESS exceeds N·π₀.
    pub share_above_n_pi0: f64,
    /// Share of replicates whose composite ESS exceeds the realized anchor count.
    pub share_above_n0: f64,
    /// Median of |ESS − ΣQ̂⁽ˢ⁾| / ΣQ̂⁽ˢ⁾, alignment method only.
    pub median_additivity_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFailures {
    pub scenario: String,
    pub failed: usize,
    pub messages: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub config: StudyConfig,
    pub cells: Vec<CellSummary>,
    pub ess: Vec<EssSummary>,
    pub failures: Vec<ScenarioFailures>,
    pub records: Vec<ReplicateRecord>,
}

fn run_replicate(
    study: &StudyConfig,
    cfg: &ScenarioConfig,
    si: usize,
    r: usize,
) -> Result<Vec<ReplicateRecord>> {
    let ds = generate_with_stream(cfg, study.seed, ((si as u64) << 32) | r as u64)?;
    let n0 = ds.cohort_counts()[0];
    study
        .methods
        .iter()
        .map(|&method| {
            let pc = PipelineConfig {
                method,
                model: study.model.clone(),
                alignment: study.alignment.clone(),
            };
            let w = compute_weights(&ds, &pc)?;
            let estimates = study
                .features
                .iter()
                .map(|f| estimate_feature(f, &w.weights, &ds).map(|e| e.value()))
                .collect::<Result<Vec<_>>>()?;
            Ok(ReplicateRecord {
                scenario: cfg.name.clone(),
                replicate: r,
                method,
                n0,
                composite_ess: w.composite_ess,
                sum_cohort_ess: w.report.as_ref().map(|rep| rep.sum_cohort_ess),
                estimates,
            })
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

/// Runs every method on `replicates` datasets per scenario and aggregates
/// bias, RMSE and ESS against the closed-form anchor truths.
pub fn run_study(study: &StudyConfig) -> Result<StudyResult> {
    if study.replicates < 2 {
        return Err(Error::Study("at least two replicates are required".into()));
    }
    if study.methods.is_empty() || study.features.is_empty() {
        return Err(Error::Study(
            "need at least one method and one feature".into(),
        ));
    }
    let mut cells = Vec::new();
    let mut ess = Vec::new();
    let mut failures = Vec::new();
    let mut records = Vec::new();

    for (si, cfg) in study.scenarios.iter().enumerate() {
        cfg.validate()?;
        let truths = study
            .features
            .iter()
            .map(|f| feature_truth(f, cfg))
            .collect::<Result<Vec<_>>>()?;
        let outcomes: Vec<Result<Vec<ReplicateRecord>>> = (0..study.replicates)
            .into_par_iter()
            .map(|r| run_replicate(study, cfg, si, r))
            .collect();
        let mut ok: Vec<ReplicateRecord> = Vec::new();
        let mut fail = ScenarioFailures {
            scenario: cfg.name.clone(),
            failed: 0,
            messages: Vec::new(),
        };
        for (r, o) in outcomes.into_iter().enumerate() {
            match o {
                Ok(recs) => ok.extend(recs),
                Err(e) => {
                    fail.failed += 1;
                    fail.messages.push(format!("replicate {r}: {e}"));
                }
            }
        }
        let rate = fail.failed as f64 / study.replicates as f64;
        if rate > study.max_failure_rate {
            return Err(Error::Study(format!(
                "scenario '{}': {} of {} replicates failed (first: {})",
                cfg.name,
                fail.failed,
                study.replicates,
                fail.messages.first().map(String::as_str).unwrap_or("")
            )));
        }
        let threshold = cfg.n as f64 * cfg.pi0;
        for &method in &study.methods {
            let recs: Vec<&ReplicateRecord> = ok.iter().filter(|r| r.method == method).collect();
            if recs.len() < 2 {
                return Err(Error::Study(format!(
                    "scenario '{}' has fewer than two successful replicates",
                    cfg.name
                )));
            }
            for (fi, spec) in study.features.iter().enumerate() {
                let truth = truths[fi];
                let est: Vec<f64> = recs.iter().map(|r| r.estimates[fi]).collect();
                let err: Vec<f64> = est.iter().map(|e| e - truth).collect();
                let abs: Vec<f64> = err.iter().map(|e| e.abs()).collect();
                let sq: Vec<f64> = err.iter().map(|e| e * e).collect();
                let k = est.len() as f64;
                let rmse = mean(&sq).sqrt();
                cells.push(CellSummary {
                    scenario: cfg.name.clone(),
                    method,
                    feature: feature_name(spec),
                    truth,
                    mean_estimate: mean(&est),
                    bias: mean(&err),
                    abs_bias: mean(&abs),
                    abs_bias_se: sample_sd(&abs) / k.sqrt(),
                    rmse,
                    rmse_se: if rmse > 0.0 {
                        sample_sd(&sq) / (2.0 * rmse * k.sqrt())
                    } else {
                        0.0
                    },
                });
            }
            let values: Vec<f64> = recs.iter().map(|r| r.composite_ess).collect();
            let gaps: Vec<f64> = recs
                .iter()
                .filter_map(|r| r.sum_cohort_ess.map(|s| (r.composite_ess - s).abs() / s))
                .collect();
            ess.push(EssSummary {
                scenario: cfg.name.clone(),
                method,
                mean: mean(&values),
                median: median(&values),
                min: values.iter().copied().fold(f64::INFINITY, f64::min),
                max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                share_above_n_pi0: values.iter().filter(|&&v| v > threshold).count() as f64
                    / values.len() as f64,
                share_above_n0: recs
                    .iter()
                    .filter(|r| r.composite_ess > r.n0 as f64)
                    .count() as f64
                    / recs.len() as f64,
                median_additivity_gap: (!gaps.is_empty()).then(|| median(&gaps)),
            });
        }
        failures.push(fail);
        records.extend(ok);
    }
    Ok(StudyResult {
        config: study.clone(),
        cells,
        ess,
        failures,
        records,
    })
}

fn feature_name(spec: &FeatureSpec) -> String {
    let y = |i: usize| format!("y{}", i + 1);
    match &spec.kind {
        FeatureKind::Mean { outcome } => format!("mean({})", y(*outcome)),
        FeatureKind::Variance { outcome } => format!("var({})", y(*outcome)),
        FeatureKind::Sd { outcome } => format!("sd({})", y(*outcome)),
        FeatureKind::Covariance { a, b } => format!("cov({},{})", y(*a), y(*b)),
        FeatureKind::Correlation { a, b } => format!("cor({},{})", y(*a), y(*b)),
        other => format!("{other:?}"),
    }
}

impl StudyResult {
    pub fn cell(&self, scenario: &str, method: Method, feature: &str) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.scenario == scenario && c.method == method && c.feature == feature)
    }

    pub fn ess_summary(&self, scenario: &str, method: Method) -> Option<&EssSummary> {
        self.ess
            .iter()
            .find(|e| e.scenario == scenario && e.method == method)
    }

    /// Scenario blocks × (bias, RMSE) panels, features as rows and methods as
    /// columns; each cell is `value (mc_se)`.
    /// Delimited table with fields quoted where needed; a blank record
    /// separates scenarios.
    pub fn render_table(&self, delimiter: char, precision: usize) -> String {
        let mut rows: Vec<Vec<String>> = Vec::new();
        let methods = &self.config.methods;
        for scen in &self.config.scenarios {
            rows.push(vec![
                "scenario".into(),
                scen.name.clone(),
                format!("N={}", scen.n),
            ]);
            for (panel, pick) in [("abs_bias", 0), ("rmse", 1)] {
                let mut header = vec![panel.to_string()];
                header.extend(methods.iter().map(|m| m.tag().to_string()));
                rows.push(header);
                for spec in &self.config.features {
                    let name = feature_name(spec);
                    let mut row = vec![name.clone()];
                    for &m in methods {
                        row.push(match self.cell(&scen.name, m, &name) {
                            Some(c) => {
                                let (v, se) = if pick == 0 {
                                    (c.abs_bias, c.abs_bias_se)
                                } else {
                                    (c.rmse, c.rmse_se)
                                };
                                format!("{v:.precision$} ({se:.precision$})")
                            }
                            None => "NA".into(),
                        });
                    }
                    rows.push(row);
                }
            }
            rows.push(
                ["ess", "mean", "median", "min", "max", "share_above_n_pi0"]
                    .map(String::from)
                    .to_vec(),
            );
            for &m in methods {
                if let Some(e) = self.ess_summary(&scen.name, m) {
                    rows.push(vec![
                        m.tag().to_string(),
                        format!("{:.1}", e.mean),
                        format!("{:.1}", e.median),
                        format!("{:.1}", e.min),
                        format!("{:.1}", e.max),
                        format!("{:.3}", e.share_above_n_pi0),
                    ]);
                }
            }
            rows.push(Vec::new());
        }
        let mut out = String::new();
        for block in rows.split(Vec::is_empty).filter(|b| !b.is_empty()) {
            let mut w = csv::WriterBuilder::new()
                .delimiter(delimiter as u8)
                .flexible(true)
                .from_writer(Vec::new());
            for r in block {
                w.write_record(r).expect("writing to memory");
            }
            out.push_str(
                &String::from_utf8(w.into_inner().expect("writing to memory"))
                    .expect("utf-8 fields"),
            );
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_matches_moment_algebra() {
        let cfg = ScenarioConfig::dissimilar_y(100);
        let t = closed_form_truths(&cfg);
        // 0.2 + 0.05; V = 0.16 + 0.01/12 + 0.2
        assert!((t.mean_y1 - 0.25).abs() < 1e-15);
        let v = 0.16 + 0.01 / 12.0 + 0.2;
        assert!((t.sd_y2 - (v + 0.25f64).sqrt()).abs() < 1e-15);
        assert!((t.cov_y1_y2 - (v - 0.125)).abs() < 1e-15);
    }

    #[test]
    fn calibrated_naive_bias_formula() {
        for (cfg, expected) in [
            (ScenarioConfig::dissimilar_y(10).calibrated(), 0.45),
            (ScenarioConfig::dissimilar_xy(10).calibrated(), 1.35),
        ] {
            let bias = (1.0 - cfg.pi0) * (cfg.phi_x + cfg.phi_y);
            assert!((bias - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = ScenarioConfig::dissimilar_xy(500);
        assert_eq!(
            generate_dataset(&cfg, 3).unwrap(),
            generate_dataset(&cfg, 3).unwrap()
        );
        assert_ne!(
            generate_dataset(&cfg, 3).unwrap(),
            generate_dataset(&cfg, 4).unwrap()
        );
    }

    #[test]
    fn correlation_signs_by_cohort() {
        let mut cfg = ScenarioConfig::dissimilar_y(20_000);
        cfg.pi0 = 0.5;
        let ds = generate_dataset(&cfg, 9).unwrap();
        for (s, sign) in [(0usize, -1.0), (1usize, 1.0)] {
            let rows: Vec<usize> = (0..ds.n()).filter(|&i| ds.labels()[i] == s).collect();
            let a: Vec<f64> = rows.iter().map(|&i| ds.outcomes()[(i, 0)]).collect();
            let b: Vec<f64> = rows.iter().map(|&i| ds.outcomes()[(i, 1)]).collect();
            let (ma, mb) = (mean(&a), mean(&b));
            // Residual correlation after removing the shared covariate signal.
            let xs: Vec<f64> = rows.iter().map(|&i| ds.covariates().row(i).sum()).collect();
            let ra: Vec<f64> = a.iter().zip(&xs).map(|(v, x)| v - x).collect();
            let rb: Vec<f64> = b.iter().zip(&xs).map(|(v, x)| v - x).collect();
            let (mra, mrb) = (mean(&ra), mean(&rb));
            let c: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - mra) * (y - mrb)).sum();
            assert_eq!(c.signum(), sign, "cohort {s}");
            let _ = (ma, mb);
        }
    }
}
