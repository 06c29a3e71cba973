//! Ridge-penalized multinomial logistic regression with the anchor as the
//! reference category, fitted by Newton/IRLS with step-halving.
//!
//! Fitting happens on internally standardized features; coefficients are
//! mapped back to the original feature scale afterwards. The ridge penalty
//! applies to the standardized slopes, never to the intercepts.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::{log_sum_exp, CohortClassifier, FeatureMap, FeatureMapKind, ModelInput};
use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Standardized slopes beyond this magnitude are treated as separation.
const SEPARATION_LIMIT: f64 = 30.0;
/// Relative residual norm below which a design column counts as collinear.
const COLLINEAR_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub ridge: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Ridge used for the refit when separation is detected.
    pub separation_ridge_floor: f64,
    pub feature_map: FeatureMapKind,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            ridge: 1e-4,
            tol: 1e-8,
            max_iter: 100,
            max_halvings: 10,
            separation_ridge_floor: 1e-2,
            feature_map: FeatureMapKind::Identity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    input: ModelInput,
    feature_map: FeatureMap,
    feature_names: Vec<String>,
    n_cohorts: usize,
    /// One entry per external cohort `1..=J`.
    intercepts: Vec<f64>,
    /// `coefficients[k][j]`: slope of feature `j` for cohort `k + 1`.
    coefficients: Vec<Vec<f64>>,
    /// `standard_errors[k]`: intercept first, then slopes.
    standard_errors: Vec<Vec<f64>>,
    converged: bool,
    iterations: usize,
    separation_warning: bool,
    ridge_used: f64,
    log_likelihood_trace: Vec<f64>,
}

impl LogisticModel {
    pub fn n_cohorts(&self) -> usize {
        self.n_cohorts
    }

    pub fn input(&self) -> ModelInput {
        self.input
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Intercept for cohort `s` (`s ≥ 1`).
    pub fn intercept(&self, s: usize) -> f64 {
        self.intercepts[s - 1]
    }

    /// Slopes for cohort `s` (`s ≥ 1`) on the original feature scale.
    pub fn coefficients(&self, s: usize) -> &[f64] {
        &self.coefficients[s - 1]
    }

    /// Standard errors for cohort `s` (`s ≥ 1`): intercept, then slopes.
    pub fn standard_errors(&self, s: usize) -> &[f64] {
        &self.standard_errors[s - 1]
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn separation_warning(&self) -> bool {
        self.separation_warning
    }

    pub fn ridge_used(&self) -> f64 {
        self.ridge_used
    }

    /// Penalized log-likelihood after each accepted iteration (starting point first).
    pub fn log_likelihood_trace(&self) -> &[f64] {
        &self.log_likelihood_trace
    }
}

impl CohortClassifier for LogisticModel {
    fn n_cohorts(&self) -> usize {
        self.n_cohorts
    }

    fn input(&self) -> ModelInput {
        self.input
    }

    fn log_probabilities(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let f = self.feature_map.apply(inputs)?;
        let k = self.n_cohorts;
        let mut out = DMatrix::zeros(f.nrows(), k);
        let mut logits = vec![0.0; k];
        for i in 0..f.nrows() {
            let row = f.row(i);
            for s in 1..k {
                logits[s] = self.intercepts[s - 1]
                    + row
                        .iter()
                        .zip(&self.coefficients[s - 1])
                        .map(|(x, b)| x * b)
                        .sum::<f64>();
            }
            let lse = log_sum_exp(&logits);
            for s in 0..k {
                out[(i, s)] = logits[s] - lse;
            }
        }
        Ok(out)
    }
}

struct Design {
    /// Standardized design with a leading intercept column.
    d: DMatrix<f64>,
    means: Vec<f64>,
    scales: Vec<f64>,
}

fn standardize(features: &DMatrix<f64>, names: &[String]) -> Result<Design> {
    let (n, m) = features.shape();
    let mut d = DMatrix::zeros(n, m + 1);
    d.column_mut(0).fill(1.0);
    let mut means = Vec::with_capacity(m);
    let mut scales = Vec::with_capacity(m);
    let mut constant = Vec::new();
    for j in 0..m {
        let col = features.column(j);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if sd <= 1e-12 * mean.abs().max(1.0) {
            constant.push(names[j].clone());
            scales.push(1.0);
        } else {
            scales.push(sd);
        }
        means.push(mean);
        for i in 0..n {
            d[(i, j + 1)] = (col[i] - mean) / scales[j];
        }
    }
    if !constant.is_empty() {
        return Err(Error::RankDeficient { columns: constant });
    }
    check_rank(&d, names)?;
    Ok(Design { d, means, scales })
}

/// Modified Gram-Schmidt over the design columns; any column whose residual
/// after projection onto the earlier ones is numerically zero is reported.
fn check_rank(d: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut collinear = Vec::new();
    for j in 0..d.ncols() {
        let col = d.column(j).into_owned();
        let norm0 = col.norm();
        let mut r = col;
        for q in &basis {
            let c = q.dot(&r);
            r.axpy(-c, q, 1.0);
        }
        let norm = r.norm();
        if norm <= COLLINEAR_TOL * norm0.max(1.0) {
            collinear.push(if j == 0 {
                "(intercept)".to_string()
            } else {
                names[j - 1].clone()
            });
        } else {
            basis.push(r / norm);
        }
    }
    if collinear.is_empty() {
        Ok(())
    } else {
        Err(Error::RankDeficient { columns: collinear })
    }
}

struct Fit {
    beta: DMatrix<f64>,
    converged: bool,
    iterations: usize,
    trace: Vec<f64>,
    hessian: DMatrix<f64>,
}

fn logits(d: &DMatrix<f64>, beta: &DMatrix<f64>) -> DMatrix<f64> {
    d * beta
}

fn penalized_ll(d: &DMatrix<f64>, labels: &[usize], beta: &DMatrix<f64>, ridge: f64) -> f64 {
    let eta = logits(d, beta);
    let k = beta.ncols();
    let mut buf = vec![0.0; k + 1];
    let mut ll = 0.0;
    for (i, &s) in labels.iter().enumerate() {
        buf[0] = 0.0;
        for c in 0..k {
            buf[c + 1] = eta[(i, c)];
        }
        ll += buf[s] - log_sum_exp(&buf);
    }
    let penalty: f64 = beta.rows(1, beta.nrows() - 1).iter().map(|b| b * b).sum();
    ll - 0.5 * ridge * penalty
}

/// Probabilities of the external classes (N × J).
fn class_probabilities(d: &DMatrix<f64>, beta: &DMatrix<f64>) -> DMatrix<f64> {
    let mut eta = logits(d, beta);
    let k = beta.ncols();
    let mut buf = vec![0.0; k + 1];
    for i in 0..eta.nrows() {
        buf[0] = 0.0;
        for c in 0..k {
            buf[c + 1] = eta[(i, c)];
        }
        let lse = log_sum_exp(&buf);
        for c in 0..k {
            eta[(i, c)] = (buf[c + 1] - lse).exp();
        }
    }
    eta
}

/// Negative Hessian of the penalized log-likelihood, parameters ordered
/// class-major (`k * q + j`).
fn neg_hessian(d: &DMatrix<f64>, p: &DMatrix<f64>, ridge: f64) -> DMatrix<f64> {
    let (n, q) = d.shape();
    let k = p.ncols();
    let mut h = DMatrix::zeros(q * k, q * k);
    let mut scaled = DMatrix::zeros(n, q);
    for a in 0..k {
        for b in a..k {
            for i in 0..n {
                let w = if a == b {
                    p[(i, a)] * (1.0 - p[(i, a)])
                } else {
                    -p[(i, a)] * p[(i, b)]
                };
                for j in 0..q {
                    scaled[(i, j)] = d[(i, j)] * w;
                }
            }
            let block = d.transpose() * &scaled;
            h.view_mut((a * q, b * q), (q, q)).copy_from(&block);
            if a != b {
                h.view_mut((b * q, a * q), (q, q))
                    .copy_from(&block.transpose());
            }
        }
        for j in 1..q {
            h[(a * q + j, a * q + j)] += ridge;
        }
    }
    h
}

fn robust_cholesky(h: &DMatrix<f64>) -> Cholesky<f64, Dyn> {
    if let Some(c) = Cholesky::new(h.clone()) {
        return c;
    }
    let scale = h
        .diagonal()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-300);
    let mut jitter = 1e-12 * scale;
    loop {
        let mut hj = h.clone();
        for i in 0..hj.nrows() {
            hj[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(hj) {
            return c;
        }
        jitter *= 10.0;
    }
}

fn newton(d: &DMatrix<f64>, labels: &[usize], k: usize, ridge: f64, cfg: &LogisticConfig) -> Fit {
    let (n, q) = d.shape();
    let mut beta = DMatrix::zeros(q, k);
    // Start intercepts at the marginal log-odds against the anchor.
    let mut counts = vec![0usize; k + 1];
    for &s in labels {
        counts[s] += 1;
    }
    for c in 0..k {
        beta[(0, c)] = (counts[c + 1] as f64 / counts[0] as f64).ln();
    }
    let mut ll = penalized_ll(d, labels, &beta, ridge);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..cfg.max_iter {
        iterations += 1;
        let p = class_probabilities(d, &beta);
        let mut grad = DVector::zeros(q * k);
        for c in 0..k {
            for i in 0..n {
                let resid = (labels[i] == c + 1) as u8 as f64 - p[(i, c)];
                if resid != 0.0 {
                    for j in 0..q {
                        grad[c * q + j] += d[(i, j)] * resid;
                    }
                }
            }
            for j in 1..q {
                grad[c * q + j] -= ridge * beta[(j, c)];
            }
        }
        let h = neg_hessian(d, &p, ridge);
        let step = robust_cholesky(&h).solve(&grad);

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let mut cand = beta.clone();
            for c in 0..k {
                for j in 0..q {
                    cand[(j, c)] += t * step[c * q + j];
                }
            }
            let cand_ll = penalized_ll(d, labels, &cand, ridge);
            if cand_ll.is_finite() && cand_ll >= ll {
                accepted = Some((cand, cand_ll));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, cand_ll)) = accepted else {
            // No ascent direction left at working precision.
            converged = grad.amax() <= 1e-6 * (n as f64);
            break;
        };
        let change = (cand_ll - ll).abs();
        beta = cand;
        let prev = ll;
        ll = cand_ll;
        trace.push(ll);
        if change <= cfg.tol * (prev.abs() + cfg.tol) {
            converged = true;
            break;
        }
    }
    let p = class_probabilities(d, &beta);
    let hessian = neg_hessian(d, &p, ridge);
    Fit {
        beta,
        converged,
        iterations,
        trace,
        hessian,
    }
}

fn separated(beta: &DMatrix<f64>) -> bool {
    beta.rows(1, beta.nrows() - 1)
        .iter()
        .any(|b| !b.is_finite() || b.abs() > SEPARATION_LIMIT)
}

/// Fits θₛ(·) on the chosen input columns of `ds`.
pub fn fit_multinomial_logistic(
    ds: &Dataset,
    input: ModelInput,
    cfg: &LogisticConfig,
) -> Result<LogisticModel> {
    if cfg.ridge < 0.0 || !cfg.ridge.is_finite() {
        return Err(Error::Domain("ridge must be a non-negative number".into()));
    }
    if cfg.tol <= 0.0 || cfg.max_iter == 0 {
        return Err(Error::Domain(
            "tol must be positive and max_iter at least 1".into(),
        ));
    }
    let k = ds.n_cohorts();
    let inputs = input.matrix(ds);
    let feature_map = FeatureMap::resolve(cfg.feature_map, &inputs);
    let feature_names = feature_map.names(&input.names(ds));
    let features = feature_map.apply(&inputs)?;
    let design = standardize(&features, &feature_names)?;
    let labels = ds.labels();

    if k == 1 {
        return Ok(LogisticModel {
            input,
            feature_map,
            feature_names,
            n_cohorts: 1,
            intercepts: vec![],
            coefficients: vec![],
            standard_errors: vec![],
            converged: true,
            iterations: 0,
            separation_warning: false,
            ridge_used: cfg.ridge,
            log_likelihood_trace: vec![0.0],
        });
    }

    let mut ridge = cfg.ridge;
    let mut fit = newton(&design.d, labels, k - 1, ridge, cfg);
    let mut separation_warning = false;
    if separated(&fit.beta) {
        separation_warning = true;
        if ridge < cfg.separation_ridge_floor {
            ridge = cfg.separation_ridge_floor;
            fit = newton(&design.d, labels, k - 1, ridge, cfg);
        }
    }

    let q = design.d.ncols();
    let m = q - 1;
    let cov = robust_cholesky(&fit.hessian).inverse();
    // Map standardized parameters back: slope_j / s_j, and the intercept
    // absorbs the centring.
    let mut transform = DMatrix::zeros(q, q);
    transform[(0, 0)] = 1.0;
    for j in 0..m {
        transform[(0, j + 1)] = -design.means[j] / design.scales[j];
        transform[(j + 1, j + 1)] = 1.0 / design.scales[j];
    }
    let mut intercepts = Vec::with_capacity(k - 1);
    let mut coefficients = Vec::with_capacity(k - 1);
    let mut standard_errors = Vec::with_capacity(k - 1);
    for c in 0..k - 1 {
        let orig = &transform * fit.beta.column(c);
        intercepts.push(orig[0]);
        coefficients.push(orig.rows(1, m).iter().copied().collect());
        let block = cov.view((c * q, c * q), (q, q));
        let cov_orig = &transform * block * transform.transpose();
        standard_errors.push(
            cov_orig
                .diagonal()
                .iter()
                .map(|v| v.max(0.0).sqrt())
                .collect(),
        );
    }

    Ok(LogisticModel {
        input,
        feature_map,
        feature_names,
        n_cohorts: k,
        intercepts,
        coefficients,
        standard_errors,
        converged: fit.converged,
        iterations: fit.iterations,
        separation_warning,
        ridge_used: ridge,
        log_likelihood_trace: fit.trace,
    })
}
