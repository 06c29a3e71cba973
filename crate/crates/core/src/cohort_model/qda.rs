//! Quadratic discriminant analysis: one Gaussian per cohort, posterior via
//! Bayes rule with the sample prevalences as priors.

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use super::{log_sum_exp, CohortClassifier, ModelInput};
use crate::dataset::{cohort_prevalences, Dataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QdaModel {
    input: ModelInput,
    dim: usize,
    reg: f64,
    cohort_names: Vec<String>,
    log_priors: Vec<f64>,
    means: Vec<Vec<f64>>,
    /// Row-major lower Cholesky factor of each cohort covariance.
    chol: Vec<Vec<f64>>,
    log_dets: Vec<f64>,
}

impl QdaModel {
    /// Builds a model from explicit Gaussian parameters.
    pub fn from_parameters(
        input: ModelInput,
        priors: &[f64],
        means: Vec<Vec<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let k = priors.len();
        if means.len() != k || covariances.len() != k || k == 0 {
            return Err(Error::Shape(
                "priors, means and covariances must align".into(),
            ));
        }
        let dim = means[0].len();
        let names: Vec<String> = (0..k).map(|s| s.to_string()).collect();
        let mut chol = Vec::with_capacity(k);
        let mut log_dets = Vec::with_capacity(k);
        for (s, cov) in covariances.into_iter().enumerate() {
            if cov.shape() != (dim, dim) || means[s].len() != dim {
                return Err(Error::Shape(format!(
                    "cohort {s} parameters have wrong shape"
                )));
            }
            let (l, ld) = factor(cov, &names[s])?;
            chol.push(l);
            log_dets.push(ld);
        }
        Ok(Self {
            input,
            dim,
            reg: 0.0,
            cohort_names: names,
            log_priors: priors.iter().map(|p| p.ln()).collect(),
            means,
            chol,
            log_dets,
        })
    }

    pub fn n_cohorts(&self) -> usize {
        self.means.len()
    }

    pub fn input(&self) -> ModelInput {
        self.input
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn reg(&self) -> f64 {
        self.reg
    }

    fn chol_matrix(&self, s: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.chol[s])
    }

    /// log N(x; μₛ, Σₛ) for each row of `inputs`.
    fn log_densities(&self, inputs: &DMatrix<f64>, s: usize) -> Vec<f64> {
        let n = inputs.nrows();
        let l = self.chol_matrix(s);
        let mut centred_t = DMatrix::zeros(self.dim, n);
        for i in 0..n {
            for j in 0..self.dim {
                centred_t[(j, i)] = inputs[(i, j)] - self.means[s][j];
            }
        }
        let v = l
            .solve_lower_triangular(&centred_t)
            .expect("Cholesky factor has a positive diagonal");
        let c = self.dim as f64 * (2.0 * std::f64::consts::PI).ln() + self.log_dets[s];
        (0..n)
            .map(|i| -0.5 * (c + v.column(i).norm_squared()))
            .collect()
    }
}

impl CohortClassifier for QdaModel {
    fn n_cohorts(&self) -> usize {
        self.means.len()
    }

    fn input(&self) -> ModelInput {
        self.input
    }

    fn log_probabilities(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if inputs.ncols() != self.dim {
            return Err(Error::Shape(format!(
                "model expects {} input columns, got {}",
                self.dim,
                inputs.ncols()
            )));
        }
        let k = self.n_cohorts();
        let n = inputs.nrows();
        let mut joint = DMatrix::zeros(n, k);
        for s in 0..k {
            for (i, ld) in self.log_densities(inputs, s).into_iter().enumerate() {
                joint[(i, s)] = self.log_priors[s] + ld;
            }
        }
        let mut buf = vec![0.0; k];
        for i in 0..n {
            for s in 0..k {
                buf[s] = joint[(i, s)];
            }
            let lse = log_sum_exp(&buf);
            for s in 0..k {
                joint[(i, s)] -= lse;
            }
        }
        Ok(joint)
    }
}

fn factor(cov: DMatrix<f64>, cohort: &str) -> Result<(Vec<f64>, f64)> {
    let scale = cov.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let singular = || Error::Singular {
        cohort: cohort.to_string(),
    };
    if scale <= 0.0 || !scale.is_finite() {
        return Err(singular());
    }
    let chol = Cholesky::new(cov).ok_or_else(singular)?;
    let l = chol.l();
    let dim = l.nrows();
    // Pivots this small relative to the largest variance mean the matrix is
    // singular to working precision.
    if l.diagonal().iter().any(|&d| d <= 1e-7 * scale.sqrt()) {
        return Err(singular());
    }
    let log_det = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let mut rows = Vec::with_capacity(dim * dim);
    for i in 0..dim {
        for j in 0..dim {
            rows.push(l[(i, j)]);
        }
    }
    Ok((rows, log_det))
}

/// Per-cohort means and unbiased covariances (plus `reg` on the diagonal).
pub fn fit_qda(ds: &Dataset, input: ModelInput, reg: f64) -> Result<QdaModel> {
    if reg < 0.0 || !reg.is_finite() {
        return Err(Error::Domain(
            "QDA regularization must be non-negative".into(),
        ));
    }
    let x = input.matrix(ds);
    let dim = x.ncols();
    let k = ds.n_cohorts();
    let prev = cohort_prevalences(ds);
    let labels = ds.labels();

    let mut means = vec![vec![0.0; dim]; k];
    for (i, &s) in labels.iter().enumerate() {
        for j in 0..dim {
            means[s][j] += x[(i, j)];
        }
    }
    for s in 0..k {
        if prev.counts[s] <= dim {
            return Err(Error::InsufficientData {
                cohort: ds.cohort_names()[s].clone(),
                count: prev.counts[s],
                dim,
            });
        }
        for m in means[s].iter_mut() {
            *m /= prev.counts[s] as f64;
        }
    }
    let mut covs = vec![DMatrix::<f64>::zeros(dim, dim); k];
    let mut centred = vec![0.0; dim];
    for (i, &s) in labels.iter().enumerate() {
        for j in 0..dim {
            centred[j] = x[(i, j)] - means[s][j];
        }
        let cov = &mut covs[s];
        for a in 0..dim {
            for b in 0..=a {
                cov[(a, b)] += centred[a] * centred[b];
            }
        }
    }
    let mut chol = Vec::with_capacity(k);
    let mut log_dets = Vec::with_capacity(k);
    for (s, mut cov) in covs.into_iter().enumerate() {
        let denom = (prev.counts[s] - 1) as f64;
        for a in 0..dim {
            for b in 0..=a {
                let v = cov[(a, b)] / denom;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
            cov[(a, a)] += reg;
        }
        let (l, ld) = factor(cov, &ds.cohort_names()[s])?;
        chol.push(l);
        log_dets.push(ld);
    }

    Ok(QdaModel {
        input,
        dim,
        reg,
        cohort_names: ds.cohort_names().to_vec(),
        log_priors: prev.pi_hat.iter().map(|p| p.ln()).collect(),
        means,
        chol,
        log_dets,
    })
}
