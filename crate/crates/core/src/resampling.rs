//! Nonparametric bootstrap over subjects.
//!
//! Each replicate `r` draws its resample indices from its own random stream
//! `(seed, r)`, so results do not depend on thread count or scheduling.
//! Every quantity tracked in one call shares the same indices, which is what
//! makes [`paired_difference`] valid.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort_model::CohortProbabilityModel;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::functionals::{estimate_feature, FeatureKind, FeatureSpec};
use crate::pipeline::{compute_weights_with_model, PipelineConfig};
use crate::rng::stream_rng;

/// Redraw attempts per replicate before giving up.
const MAX_ATTEMPTS: usize = 100;
const REDRAW_WARN_RATE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    pub alpha: f64,
    /// Resample within each cohort at its observed size instead of from
    /// the pooled sample.
    #[serde(default)]
    pub stratified: bool,
    /// Refit the cohort model in every replicate; otherwise the full-sample
    /// fit is reused.
    pub refit: bool,
    /// Worker threads; `None` uses the global pool.
    #[serde(default)]
    pub threads: Option<usize>,
}

impl BootstrapConfig {
    pub fn new(replicates: usize, seed: u64) -> Self {
        Self {
            replicates,
            seed,
            alpha: 0.05,
            stratified: false,
            refit: true,
            threads: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::Bootstrap("need at least two replicates".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Domain(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.threads == Some(0) {
            return Err(Error::Bootstrap("thread count must be positive".into()));
        }
        Ok(())
    }
}

/// Identifies the resample stream a result came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub replicates: usize,
    pub n: usize,
    pub stratified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub quantity: String,
    pub point_estimate: f64,
    pub replicate_values: Vec<f64>,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub alpha: f64,
    pub redraws: usize,
    pub provenance: Provenance,
}

impl BootstrapResult {
    fn from_values(
        quantity: String,
        point_estimate: f64,
        replicate_values: Vec<f64>,
        alpha: f64,
        redraws: usize,
        provenance: Provenance,
    ) -> Self {
        let (ci_low, ci_high) = percentile_interval(&replicate_values, alpha);
        Self {
            quantity,
            point_estimate,
            se: sample_sd(&replicate_values),
            ci_low,
            ci_high,
            replicate_values,
            alpha,
            redraws,
            provenance,
        }
    }

    pub fn replicates(&self) -> usize {
        self.replicate_values.len()
    }

    /// True when the percentile interval excludes zero.
    pub fn significant(&self) -> bool {
        self.ci_low > 0.0 || self.ci_high < 0.0
    }

    /// (min, median, max) of the replicate values.
    pub fn range_summary(&self) -> (f64, f64, f64) {
        let s = sorted(&self.replicate_values);
        let k = s.len();
        let med = if k % 2 == 1 {
            s[k / 2]
        } else {
            0.5 * (s[k / 2 - 1] + s[k / 2])
        };
        (s[0], med, s[k - 1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOutput {
    pub results: Vec<BootstrapResult>,
    pub redraws: usize,
    pub warnings: Vec<String>,
}

impl BootstrapOutput {
    pub fn get(&self, quantity: &str) -> Option<&BootstrapResult> {
        self.results.iter().find(|r| r.quantity == quantity)
    }
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Order statistics at ranks ⌈Bα/2⌉ and ⌈B(1 − α/2)⌉ (1-based).
pub fn percentile_interval(values: &[f64], alpha: f64) -> (f64, f64) {
    let s = sorted(values);
    let b = s.len() as f64;
    let rank = |p: f64| ((b * p).ceil() as usize).clamp(1, s.len()) - 1;
    (s[rank(alpha / 2.0)], s[rank(1.0 - alpha / 2.0)])
}

/// Names of the scalar values a feature produces: its label, or one
/// `label@point` per grid point for a CDF.
pub fn feature_value_names(f: &FeatureSpec, ds: &Dataset) -> Vec<String> {
    let label = f.label(ds);
    match &f.kind {
        FeatureKind::CdfAt { grid, .. } if grid.len() > 1 => {
            grid.iter().map(|g| format!("{label}@{g}")).collect()
        }
        _ => vec![label],
    }
}

/// Quantity names are `"{method}:{feature}"` and `"{method}:ess"`.
pub fn quantity_names(
    configs: &[PipelineConfig],
    features: &[FeatureSpec],
    ds: &Dataset,
) -> Vec<String> {
    configs
        .iter()
        .flat_map(|c| {
            features
                .iter()
                .flat_map(|f| feature_value_names(f, ds))
                .map(move |f| format!("{}:{f}", c.method))
                .chain(std::iter::once(format!("{}:ess", c.method)))
        })
        .collect()
}

fn evaluate(
    ds: &Dataset,
    configs: &[PipelineConfig],
    models: Option<&[Option<CohortProbabilityModel>]>,
    features: &[FeatureSpec],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(configs.len() * (features.len() + 1));
    for (k, cfg) in configs.iter().enumerate() {
        let fitted;
        let model = match models {
            Some(m) => m[k].as_ref(),
            None => {
                fitted = cfg.fit_model(ds)?;
                fitted.as_ref()
            }
        };
        let w = compute_weights_with_model(ds, cfg, model)?;
        for f in features {
            out.extend(estimate_feature(f, &w.weights, ds)?.values);
        }
        out.push(w.composite_ess);
    }
    Ok(out)
}

fn draw_indices(rng: &mut ChaCha8Rng, ds: &Dataset, strata: Option<&[Vec<usize>]>) -> Vec<usize> {
    let n = ds.n();
    match strata {
        None => (0..n).map(|_| rng.random_range(0..n)).collect(),
        Some(groups) => groups
            .iter()
            .flat_map(|g| {
                (0..g.len())
                    .map(|_| g[rng.random_range(0..g.len())])
                    .collect::<Vec<_>>()
            })
            .collect(),
    }
}

/// Bootstraps every method in `configs` and every feature, plus each
/// method's composite ESS. A replicate that leaves a cohort empty or fails in
/// the pipeline is redrawn from the same stream.
pub fn bootstrap_pipeline(
    ds: &Dataset,
    configs: &[PipelineConfig],
    features: &[FeatureSpec],
    cfg: &BootstrapConfig,
) -> Result<BootstrapOutput> {
    cfg.validate()?;
    if configs.is_empty() {
        return Err(Error::Bootstrap("no methods to bootstrap".into()));
    }
    for f in features {
        f.validate(ds)?;
    }
    let names = quantity_names(configs, features, ds);

    let full_models = configs
        .iter()
        .map(|c| c.fit_model(ds))
        .collect::<Result<Vec<_>>>()?;
    let point = evaluate(ds, configs, Some(&full_models), features)?;
    let fixed = (!cfg.refit).then_some(full_models.as_slice());

    let strata: Option<Vec<Vec<usize>>> = cfg.stratified.then(|| {
        (0..ds.n_cohorts())
            .map(|s| (0..ds.n()).filter(|&i| ds.labels()[i] == s).collect())
            .collect()
    });

    let run = |r: usize| -> Result<(Vec<f64>, usize)> {
        let mut rng = stream_rng(cfg.seed, r as u64);
        let mut last = None;
        for attempt in 0..MAX_ATTEMPTS {
            let idx = draw_indices(&mut rng, ds, strata.as_deref());
            let outcome = ds
                .select_rows(&idx)
                .and_then(|sample| evaluate(&sample, configs, fixed, features));
            match outcome {
                Ok(v) => return Ok((v, attempt)),
                Err(e) => last = Some(e),
            }
        }
        Err(Error::Bootstrap(format!(
            "replicate {r} failed {MAX_ATTEMPTS} times; last error: {}",
            last.expect("at least one attempt")
        )))
    };

    let collect = || {
        (0..cfg.replicates)
            .into_par_iter()
            .map(run)
            .collect::<Vec<_>>()
    };
    let outcomes = match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Bootstrap(e.to_string()))?
            .install(collect),
        None => collect(),
    };

    let mut rows = Vec::with_capacity(cfg.replicates);
    let mut redraws = 0;
    for o in outcomes {
        let (v, extra) = o?;
        redraws += extra;
        rows.push(v);
    }

    let mut warnings = Vec::new();
    if redraws as f64 > REDRAW_WARN_RATE * cfg.replicates as f64 {
        warnings.push(format!(
            "{redraws} redraws across {} replicates exceeds {:.0}%",
            cfg.replicates,
            100.0 * REDRAW_WARN_RATE
        ));
    }
    let provenance = Provenance {
        seed: cfg.seed,
        replicates: cfg.replicates,
        n: ds.n(),
        stratified: cfg.stratified,
    };
    let results = names
        .into_iter()
        .enumerate()
        .map(|(q, name)| {
            BootstrapResult::from_values(
                name,
                point[q],
                rows.iter().map(|row| row[q]).collect(),
                cfg.alpha,
                redraws,
                provenance,
            )
        })
        .collect();
    Ok(BootstrapOutput {
        results,
        redraws,
        warnings,
    })
}

/// Per-replicate differences `a − b` with their own percentile interval.
pub fn paired_difference(a: &BootstrapResult, b: &BootstrapResult) -> Result<BootstrapResult> {
    if a.provenance != b.provenance || a.replicates() != b.replicates() {
        return Err(Error::Pairing(format!(
            "'{}' and '{}' come from different resample streams",
            a.quantity, b.quantity
        )));
    }
    if a.alpha != b.alpha {
        return Err(Error::Pairing("results use different alpha levels".into()));
    }
    let diffs = a
        .replicate_values
        .iter()
        .zip(&b.replicate_values)
        .map(|(x, y)| x - y)
        .collect();
    Ok(BootstrapResult::from_values(
        format!("{} - {}", a.quantity, b.quantity),
        a.point_estimate - b.point_estimate,
        diffs,
        a.alpha,
        a.redraws,
        a.provenance,
    ))
}
