//! Weighted plug-in estimation of anchor-cohort features.
//!
//! Every feature is a map h applied to a vector of weighted moments
//! λ̂ = N⁻¹ Σᵢ w̃ᵢ Φ(zᵢ). The Φ rows per kind are:
//!
//! | kind | Φ | h |
//! |---|---|---|
//! | mean | Y | t₁ |
//! | variance / sd | Y, Y² | t₂ − t₁² (and its root) |
//! | covariance | Y_a, Y_b, Y_aY_b | t₃ − t₁t₂ |
//! | correlation | Y_a, Y_b, Y_aY_b, Y_a², Y_b² | cov / (sd_a sd_b) |
//! | cdf / median / quantile | 𝕀(Y ≤ c_m) | t_m, or the grid point closest to q |
//! | subgroup mean | Y𝕀(X = b), 𝕀(X = b) | t₁/t₂ |
//! | subgroup difference | the above for two categories | t₁/t₂ − t₃/t₄ |
//!
//! Any non-subgroup kind may additionally be restricted to a subgroup: its
//! Φ rows are multiplied by the subgroup indicator, the indicator itself is
//! appended, and h works on the ratios.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::alignment::WeightSet;
use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subgroup {
    pub covariate: String,
    pub value: String,
}

impl fmt::Display for Subgroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.covariate, self.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Mean {
        outcome: usize,
    },
    Variance {
        outcome: usize,
    },
    Sd {
        outcome: usize,
    },
    Covariance {
        a: usize,
        b: usize,
    },
    Correlation {
        a: usize,
        b: usize,
    },
    CdfAt {
        outcome: usize,
        grid: Vec<f64>,
    },
    /// `grid = None` uses the distinct observed values (exact weighted ECDF).
    Median {
        outcome: usize,
        grid: Option<Vec<f64>>,
    },
    QuantileAt {
        outcome: usize,
        q: f64,
        grid: Option<Vec<f64>>,
    },
    SubgroupMean {
        outcome: usize,
        subgroup: Subgroup,
    },
    SubgroupDifference {
        outcome: usize,
        covariate: String,
        first: String,
        second: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub kind: FeatureKind,
    /// Restricts any non-subgroup kind to `covariate == value`.
    #[serde(default)]
    pub subgroup: Option<Subgroup>,
}

impl From<FeatureKind> for FeatureSpec {
    fn from(kind: FeatureKind) -> Self {
        Self {
            kind,
            subgroup: None,
        }
    }
}

impl FeatureSpec {
    pub fn within(mut self, covariate: &str, value: &str) -> Self {
        self.subgroup = Some(Subgroup {
            covariate: covariate.to_string(),
            value: value.to_string(),
        });
        self
    }

    /// Parses `kind:outcome[,outcome][@args][|covariate=value[,value]]`, e.g.
    /// `mean:lactate`, `cor:fio2,creat|sex=F`, `cdf:y@0,1,2`,
    /// `quantile:y@0.9`, `subdiff:y|sex=F,M`.
    pub fn parse(text: &str, ds: &Dataset) -> Result<Self> {
        let bad = |msg: &str| Error::Spec(format!("'{text}': {msg}"));
        let (head, group) = match text.split_once('|') {
            Some((h, g)) => (h, Some(g)),
            None => (text, None),
        };
        let (kind, rest) = head
            .split_once(':')
            .ok_or_else(|| bad("expected kind:outcome"))?;
        let (targets, args) = match rest.split_once('@') {
            Some((t, a)) => (t, Some(a)),
            None => (rest, None),
        };
        let names: Vec<&str> = targets.split(',').map(str::trim).collect();
        let idx = |k: usize| -> Result<usize> {
            let name = names.get(k).ok_or_else(|| bad("missing outcome name"))?;
            ds.outcome_index(name)
        };
        let numbers = |a: Option<&str>| -> Result<Option<Vec<f64>>> {
            a.map(|s| {
                s.split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|_| bad("bad number")))
                    .collect()
            })
            .transpose()
        };
        let group = group
            .map(|g| {
                let (cov, vals) = g
                    .split_once('=')
                    .ok_or_else(|| bad("expected covariate=value"))?;
                let vals: Vec<String> = vals.split(',').map(|v| v.trim().to_string()).collect();
                Ok::<_, Error>((cov.trim().to_string(), vals))
            })
            .transpose()?;
        let single_group = |g: &Option<(String, Vec<String>)>| -> Result<Option<Subgroup>> {
            match g {
                None => Ok(None),
                Some((c, v)) if v.len() == 1 => Ok(Some(Subgroup {
                    covariate: c.clone(),
                    value: v[0].clone(),
                })),
                Some(_) => Err(bad("expected a single subgroup value")),
            }
        };
        let kind = match kind.trim() {
            "mean" => match single_group(&group)? {
                Some(subgroup) => {
                    return Ok(FeatureKind::SubgroupMean {
                        outcome: idx(0)?,
                        subgroup,
                    }
                    .into())
                }
                None => FeatureKind::Mean { outcome: idx(0)? },
            },
            "var" | "variance" => FeatureKind::Variance { outcome: idx(0)? },
            "sd" => FeatureKind::Sd { outcome: idx(0)? },
            "cov" | "covariance" => FeatureKind::Covariance {
                a: idx(0)?,
                b: idx(1)?,
            },
            "cor" | "correlation" => FeatureKind::Correlation {
                a: idx(0)?,
                b: idx(1)?,
            },
            "cdf" => FeatureKind::CdfAt {
                outcome: idx(0)?,
                grid: numbers(args)?.ok_or_else(|| bad("cdf needs @grid"))?,
            },
            "median" => FeatureKind::Median {
                outcome: idx(0)?,
                grid: numbers(args)?,
            },
            "quantile" => {
                let q = numbers(args)?.ok_or_else(|| bad("quantile needs @q"))?;
                if q.len() != 1 {
                    return Err(bad("quantile takes one level"));
                }
                FeatureKind::QuantileAt {
                    outcome: idx(0)?,
                    q: q[0],
                    grid: None,
                }
            }
            "submean" => {
                let subgroup =
                    single_group(&group)?.ok_or_else(|| bad("submean needs |cov=value"))?;
                return Ok(FeatureKind::SubgroupMean {
                    outcome: idx(0)?,
                    subgroup,
                }
                .into());
            }
            "subdiff" => {
                let (covariate, vals) = group.ok_or_else(|| bad("subdiff needs |cov=a,b"))?;
                if vals.len() != 2 {
                    return Err(bad("subdiff needs exactly two values"));
                }
                return Ok(FeatureKind::SubgroupDifference {
                    outcome: idx(0)?,
                    covariate,
                    first: vals[0].clone(),
                    second: vals[1].clone(),
                }
                .into());
            }
            other => return Err(bad(&format!("unknown feature kind '{other}'"))),
        };
        Ok(FeatureSpec {
            kind,
            subgroup: single_group(&group)?,
        })
    }

    /// Human-readable name using the dataset's outcome names.
    pub fn label(&self, ds: &Dataset) -> String {
        let o = |i: usize| {
            ds.outcome_names()
                .get(i)
                .cloned()
                .unwrap_or_else(|| format!("#{i}"))
        };
        let base = match &self.kind {
            FeatureKind::Mean { outcome } => format!("mean({})", o(*outcome)),
            FeatureKind::Variance { outcome } => format!("var({})", o(*outcome)),
            FeatureKind::Sd { outcome } => format!("sd({})", o(*outcome)),
            FeatureKind::Covariance { a, b } => format!("cov({},{})", o(*a), o(*b)),
            FeatureKind::Correlation { a, b } => format!("cor({},{})", o(*a), o(*b)),
            FeatureKind::CdfAt { outcome, grid } => {
                let g: Vec<String> = grid.iter().map(|v| v.to_string()).collect();
                format!("cdf({})@{}", o(*outcome), g.join(","))
            }
            FeatureKind::Median { outcome, .. } => format!("median({})", o(*outcome)),
            FeatureKind::QuantileAt { outcome, q, .. } => format!("quantile({})@{q}", o(*outcome)),
            FeatureKind::SubgroupMean { outcome, subgroup } => {
                format!("mean({}) | {subgroup}", o(*outcome))
            }
            FeatureKind::SubgroupDifference {
                outcome,
                covariate,
                first,
                second,
            } => format!(
                "mean({}) | {covariate}={first} - {covariate}={second}",
                o(*outcome)
            ),
        };
        match &self.subgroup {
            Some(g) => format!("{base} | {g}"),
            None => base,
        }
    }

    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        let l = ds.n_outcomes();
        let check = |i: usize| {
            if i < l {
                Ok(())
            } else {
                Err(Error::Spec(format!(
                    "outcome index {i} out of range (L = {l})"
                )))
            }
        };
        let check_grid = |g: &[f64]| {
            if g.is_empty() {
                return Err(Error::Spec("grid is empty".into()));
            }
            if g.iter().any(|v| !v.is_finite()) || g.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Spec(
                    "grid must be finite and strictly increasing".into(),
                ));
            }
            Ok(())
        };
        match &self.kind {
            FeatureKind::Mean { outcome }
            | FeatureKind::Variance { outcome }
            | FeatureKind::Sd { outcome } => check(*outcome),
            FeatureKind::Covariance { a, b } | FeatureKind::Correlation { a, b } => {
                check(*a)?;
                check(*b)
            }
            FeatureKind::CdfAt { outcome, grid } => {
                check(*outcome)?;
                check_grid(grid)
            }
            FeatureKind::Median { outcome, grid } => {
                check(*outcome)?;
                grid.as_deref().map_or(Ok(()), check_grid)
            }
            FeatureKind::QuantileAt { outcome, q, grid } => {
                check(*outcome)?;
                if !(*q > 0.0 && *q < 1.0) {
                    return Err(Error::Spec(format!("quantile level {q} outside (0, 1)")));
                }
                grid.as_deref().map_or(Ok(()), check_grid)
            }
            FeatureKind::SubgroupMean { outcome, .. } => check(*outcome),
            FeatureKind::SubgroupDifference { outcome, .. } => check(*outcome),
        }?;
        if self.subgroup.is_some()
            && matches!(
                self.kind,
                FeatureKind::SubgroupMean { .. } | FeatureKind::SubgroupDifference { .. }
            )
        {
            return Err(Error::Spec(
                "subgroup kinds cannot take an extra subgroup restriction".into(),
            ));
        }
        Ok(())
    }

    fn restriction(&self, ds: &Dataset) -> Result<Option<Vec<bool>>> {
        self.subgroup
            .as_ref()
            .map(|g| ds.subgroup_indicator(&g.covariate, &g.value))
            .transpose()
    }
}

/// Result of one feature under one weighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalEstimate {
    pub feature: String,
    pub spec: FeatureSpec,
    pub lambda_hat: Vec<f64>,
    /// One entry, except `cdf_at` which has one per grid point.
    pub values: Vec<f64>,
    pub weight_method: String,
}

impl FunctionalEstimate {
    pub fn value(&self) -> f64 {
        self.values[0]
    }
}

fn column(ds: &Dataset, j: usize) -> Vec<f64> {
    ds.outcomes().column(j).iter().copied().collect()
}

fn indicator(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&b| b as u8 as f64).collect()
}

fn masked(row: Vec<f64>, mask: &[bool]) -> Vec<f64> {
    row.into_iter()
        .zip(mask)
        .map(|(v, &m)| if m { v } else { 0.0 })
        .collect()
}

/// Distinct outcome values, sorted.
fn support(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

fn quantile_grid(kind: &FeatureKind, ds: &Dataset) -> Option<Vec<f64>> {
    match kind {
        FeatureKind::CdfAt { grid, .. } => Some(grid.clone()),
        FeatureKind::Median { outcome, grid } | FeatureKind::QuantileAt { outcome, grid, .. } => {
            Some(
                grid.clone()
                    .unwrap_or_else(|| support(&column(ds, *outcome))),
            )
        }
        _ => None,
    }
}

/// Φₘ(zᵢ) as an M × N matrix.
pub fn evaluate_phi(spec: &FeatureSpec, ds: &Dataset) -> Result<DMatrix<f64>> {
    spec.validate(ds)?;
    let y = |j: usize| column(ds, j);
    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, z)| x * z).collect() };
    let mut rows: Vec<Vec<f64>> = match &spec.kind {
        FeatureKind::Mean { outcome } => vec![y(*outcome)],
        FeatureKind::Variance { outcome } | FeatureKind::Sd { outcome } => {
            let v = y(*outcome);
            let sq = prod(&v, &v);
            vec![v, sq]
        }
        FeatureKind::Covariance { a, b } => {
            let (ya, yb) = (y(*a), y(*b));
            let ab = prod(&ya, &yb);
            vec![ya, yb, ab]
        }
        FeatureKind::Correlation { a, b } => {
            let (ya, yb) = (y(*a), y(*b));
            let ab = prod(&ya, &yb);
            let aa = prod(&ya, &ya);
            let bb = prod(&yb, &yb);
            vec![ya, yb, ab, aa, bb]
        }
        FeatureKind::CdfAt { outcome, .. }
        | FeatureKind::Median { outcome, .. }
        | FeatureKind::QuantileAt { outcome, .. } => {
            let v = y(*outcome);
            quantile_grid(&spec.kind, ds)
                .unwrap()
                .into_iter()
                .map(|c| v.iter().map(|&x| (x <= c) as u8 as f64).collect())
                .collect()
        }
        FeatureKind::SubgroupMean { outcome, subgroup } => {
            let mask = ds.subgroup_indicator(&subgroup.covariate, &subgroup.value)?;
            vec![masked(y(*outcome), &mask), indicator(&mask)]
        }
        FeatureKind::SubgroupDifference {
            outcome,
            covariate,
            first,
            second,
        } => {
            let m1 = ds.subgroup_indicator(covariate, first)?;
            let m2 = ds.subgroup_indicator(covariate, second)?;
            vec![
                masked(y(*outcome), &m1),
                indicator(&m1),
                masked(y(*outcome), &m2),
                indicator(&m2),
            ]
        }
    };
    if let Some(mask) = spec.restriction(ds)? {
        rows = rows.into_iter().map(|r| masked(r, &mask)).collect();
        rows.push(indicator(&mask));
    }
    let n = ds.n();
    Ok(DMatrix::from_fn(rows.len(), n, |m, i| rows[m][i]))
}

/// λ̂ = N⁻¹ Σᵢ w̃ᵢ Φ(zᵢ).
pub fn weighted_lambda(w: &WeightSet, phi: &DMatrix<f64>) -> Result<Vec<f64>> {
    if phi.ncols() != w.len() {
        return Err(Error::Shape(format!(
            "phi has {} columns for {} weights",
            phi.ncols(),
            w.len()
        )));
    }
    let n = w.len() as f64;
    Ok(phi
        .row_iter()
        .map(|row| {
            row.iter()
                .zip(w.weights())
                .map(|(p, wi)| p * wi)
                .sum::<f64>()
                / n
        })
        .collect())
}

/// λ̂ for indicator rows 𝕀(y ≤ c) via a sorted prefix sum; avoids building
/// an M × N matrix for fine grids.
fn indicator_lambda(y: &[f64], w: &[f64], mask: Option<&[bool]>, grid: &[f64]) -> Vec<f64> {
    let n = y.len() as f64;
    let mut order: Vec<usize> = (0..y.len())
        .filter(|&i| mask.is_none_or(|m| m[i]))
        .collect();
    order.sort_by(|&a, &b| y[a].total_cmp(&y[b]));
    let mut prefix = Vec::with_capacity(order.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for &i in &order {
        acc += w[i];
        prefix.push(acc);
    }
    grid.iter()
        .map(|&c| {
            let k = order.partition_point(|&i| y[i] <= c);
            prefix[k] / n
        })
        .collect()
}

fn mass_ratio(t: f64, mass: f64, label: &str) -> Result<f64> {
    if mass > 0.0 {
        Ok(t / mass)
    } else {
        Err(Error::SubgroupSupport(label.to_string()))
    }
}

fn variance_of(t1: f64, t2: f64) -> f64 {
    (t2 - t1 * t1).max(0.0)
}

/// Closest grid point to level `q`; ties go to the smaller grid value.
fn closest_level(grid: &[f64], cdf: &[f64], q: f64) -> f64 {
    let mut best = 0;
    for m in 1..grid.len() {
        if (cdf[m] - q).abs() < (cdf[best] - q).abs() {
            best = m;
        }
    }
    grid[best]
}

/// Evaluates `spec` under the weights `w`.
pub fn estimate_feature(
    spec: &FeatureSpec,
    w: &WeightSet,
    ds: &Dataset,
) -> Result<FunctionalEstimate> {
    spec.validate(ds)?;
    if w.len() != ds.n() {
        return Err(Error::Shape(format!(
            "{} weights for {} subjects",
            w.len(),
            ds.n()
        )));
    }
    let label = spec.label(ds);
    let mask = spec.restriction(ds)?;
    let group_label = spec
        .subgroup
        .as_ref()
        .map(|g| g.to_string())
        .unwrap_or_default();

    let (lambda_hat, values) = if let Some(grid) = quantile_grid(&spec.kind, ds) {
        let outcome = match &spec.kind {
            FeatureKind::CdfAt { outcome, .. }
            | FeatureKind::Median { outcome, .. }
            | FeatureKind::QuantileAt { outcome, .. } => *outcome,
            _ => unreachable!(),
        };
        let y = column(ds, outcome);
        let mut lambda = indicator_lambda(&y, w.weights(), mask.as_deref(), &grid);
        let mass = match &mask {
            Some(m) => {
                let t: f64 = w
                    .weights()
                    .iter()
                    .zip(m)
                    .filter(|(_, &b)| b)
                    .map(|(wi, _)| wi)
                    .sum::<f64>()
                    / ds.n() as f64;
                lambda.push(t);
                t
            }
            None => 1.0,
        };
        let ts = &lambda[..grid.len()];
        let cdf: Vec<f64> = ts
            .iter()
            .map(|&t| mass_ratio(t, mass, &group_label).map(|v| v.clamp(0.0, 1.0)))
            .collect::<Result<_>>()?;
        let values = match &spec.kind {
            FeatureKind::CdfAt { .. } => cdf,
            FeatureKind::Median { .. } => vec![closest_level(&grid, &cdf, 0.5)],
            FeatureKind::QuantileAt { q, .. } => vec![closest_level(&grid, &cdf, *q)],
            _ => unreachable!(),
        };
        (lambda, values)
    } else {
        let phi = evaluate_phi(spec, ds)?;
        let lambda = weighted_lambda(w, &phi)?;
        let t: Vec<f64> = match &mask {
            Some(_) => {
                let mass = *lambda.last().unwrap();
                lambda[..lambda.len() - 1]
                    .iter()
                    .map(|&v| mass_ratio(v, mass, &group_label))
                    .collect::<Result<_>>()?
            }
            None => lambda.clone(),
        };
        let value = match &spec.kind {
            FeatureKind::Mean { .. } => t[0],
            FeatureKind::Variance { .. } => variance_of(t[0], t[1]),
            FeatureKind::Sd { .. } => variance_of(t[0], t[1]).sqrt(),
            FeatureKind::Covariance { .. } => t[2] - t[0] * t[1],
            FeatureKind::Correlation { .. } => {
                let cov = t[2] - t[0] * t[1];
                let va = variance_of(t[0], t[3]);
                let vb = variance_of(t[1], t[4]);
                let tiny = |v: f64, second: f64| v <= 1e-12 * second.abs().max(f64::MIN_POSITIVE);
                if tiny(va, t[3]) || tiny(vb, t[4]) {
                    return Err(Error::DegenerateVariance(format!(
                        "{label}: an outcome has zero weighted variance"
                    )));
                }
                (cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0)
            }
            FeatureKind::SubgroupMean { subgroup, .. } => {
                mass_ratio(t[0], t[1], &subgroup.to_string())?
            }
            FeatureKind::SubgroupDifference {
                covariate,
                first,
                second,
                ..
            } => {
                mass_ratio(t[0], t[1], &format!("{covariate}={first}"))?
                    - mass_ratio(t[2], t[3], &format!("{covariate}={second}"))?
            }
            _ => unreachable!(),
        };
        (lambda, vec![value])
    };

    Ok(FunctionalEstimate {
        feature: label,
        spec: spec.clone(),
        lambda_hat,
        values,
        weight_method: w.method_tag().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(labels: Vec<usize>, y: &[[f64; 2]], sex: &[f64]) -> Dataset {
        let n = labels.len();
        Dataset::new(
            labels,
            vec!["0".into(), "1".into()],
            DMatrix::from_column_slice(n, 1, sex),
            DMatrix::from_fn(n, 2, |i, j| y[i][j]),
            vec!["sex".into()],
            vec!["y1".into(), "y2".into()],
        )
        .unwrap()
    }

    fn ones(n: usize) -> WeightSet {
        WeightSet::new(vec![1.0; n], "naive").unwrap()
    }

    #[test]
    fn phi_rows() {
        let d = ds(
            vec![0, 1, 1],
            &[[1.0, 5.0], [2.0, 6.0], [3.0, 7.0]],
            &[0.0, 1.0, 0.0],
        );
        let phi = evaluate_phi(&FeatureKind::Mean { outcome: 0 }.into(), &d).unwrap();
        assert_eq!(
            phi.row(0).iter().copied().collect::<Vec<_>>(),
            vec![1.0, 2.0, 3.0]
        );
        let phi = evaluate_phi(
            &FeatureKind::CdfAt {
                outcome: 0,
                grid: vec![2.0],
            }
            .into(),
            &d,
        )
        .unwrap();
        assert_eq!(
            phi.row(0).iter().copied().collect::<Vec<_>>(),
            vec![1.0, 1.0, 0.0]
        );
        let phi = evaluate_phi(&FeatureKind::Covariance { a: 0, b: 1 }.into(), &d).unwrap();
        assert_eq!(phi.nrows(), 3);
        assert_eq!(phi[(2, 1)], 12.0);
    }

    #[test]
    fn lambda_hand_example() {
        let w = WeightSet::new(vec![0.5, 1.5], "t").unwrap();
        let phi = DMatrix::from_row_slice(1, 2, &[2.0, 4.0]);
        assert_eq!(weighted_lambda(&w, &phi).unwrap(), vec![3.5]);
    }

    #[test]
    fn sd_from_moments() {
        // λ̂ = (1, 2) → √(2 − 1) = 1: y ∈ {0, 2} equally weighted.
        let d = ds(vec![0, 1], &[[0.0, 0.0], [2.0, 0.0]], &[0.0, 1.0]);
        let e = estimate_feature(&FeatureKind::Sd { outcome: 0 }.into(), &ones(2), &d).unwrap();
        assert_eq!(e.lambda_hat, vec![1.0, 2.0]);
        assert_eq!(e.value(), 1.0);
    }

    #[test]
    fn duplicated_columns_have_unit_correlation() {
        let y: Vec<[f64; 2]> = (0..9)
            .map(|i| [(i as f64).sin(), (i as f64).sin()])
            .collect();
        let d = ds((0..9).map(|i| (i % 2) as usize).collect(), &y, &[0.0; 9]);
        let w =
            WeightSet::new((0..9).map(|i| 0.2 + 1.6 * (i as f64) / 8.0).collect(), "t").unwrap();
        let e = estimate_feature(&FeatureKind::Correlation { a: 0, b: 1 }.into(), &w, &d).unwrap();
        assert!((e.value() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn median_and_quantile_ties() {
        let d = ds(
            vec![0, 0, 1, 1],
            &[[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 0.0]],
            &[0.0; 4],
        );
        // cdf = .25, .5, .75, 1
        let e = estimate_feature(
            &FeatureKind::Median {
                outcome: 0,
                grid: None,
            }
            .into(),
            &ones(4),
            &d,
        )
        .unwrap();
        assert_eq!(e.value(), 2.0);
        // q = 0.625 is equidistant from 0.5 and 0.75: take the smaller value.
        let e = estimate_feature(
            &FeatureKind::QuantileAt {
                outcome: 0,
                q: 0.625,
                grid: None,
            }
            .into(),
            &ones(4),
            &d,
        )
        .unwrap();
        assert_eq!(e.value(), 2.0);
    }

    #[test]
    fn fast_cdf_path_matches_phi() {
        let y: Vec<[f64; 2]> = (0..20).map(|i| [((i * 37) % 11) as f64, 0.0]).collect();
        let d = ds(
            (0..20).map(|i| (i % 3 == 0) as usize).collect(),
            &y,
            &[0.0; 20],
        );
        let w = WeightSet::new(
            (0..20)
                .map(|i| if i % 2 == 0 { 0.5 } else { 1.5 })
                .collect(),
            "t",
        )
        .unwrap();
        let spec: FeatureSpec = FeatureKind::CdfAt {
            outcome: 0,
            grid: vec![-1.0, 0.0, 2.5, 5.0, 10.0, 11.0],
        }
        .into();
        let fast = estimate_feature(&spec, &w, &d).unwrap();
        let slow = weighted_lambda(&w, &evaluate_phi(&spec, &d).unwrap()).unwrap();
        for (a, b) in fast.lambda_hat.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(fast.values.windows(2).all(|v| v[0] <= v[1]));
    }

    #[test]
    fn subgroup_mean_and_difference() {
        let d = ds(
            vec![0, 0, 1, 1],
            &[[1.0, 0.0], [3.0, 0.0], [5.0, 0.0], [9.0, 0.0]],
            &[0.0, 1.0, 0.0, 1.0],
        );
        let spec = FeatureSpec::parse("mean:y1|sex=1", &d).unwrap();
        assert_eq!(estimate_feature(&spec, &ones(4), &d).unwrap().value(), 6.0);
        let spec = FeatureSpec::parse("subdiff:y1|sex=1,0", &d).unwrap();
        assert_eq!(estimate_feature(&spec, &ones(4), &d).unwrap().value(), 3.0);

        let anchor_only = WeightSet::new(vec![2.0, 2.0, 0.0, 0.0], "anchor_only").unwrap();
        let spec = FeatureSpec::parse("mean:y1|sex=1", &d).unwrap();
        assert_eq!(
            estimate_feature(&spec, &anchor_only, &d).unwrap().value(),
            3.0
        );

        let zero_male = WeightSet::new(vec![2.0, 0.0, 2.0, 0.0], "t").unwrap();
        assert!(matches!(
            estimate_feature(&spec, &zero_male, &d),
            Err(Error::SubgroupSupport(_))
        ));
        assert!(matches!(
            FeatureSpec::parse("mean:y1|sex=7", &d).and_then(|s| estimate_feature(
                &s,
                &ones(4),
                &d
            )),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn restricted_correlation() {
        let d = ds(
            vec![0, 0, 0, 1, 1, 1],
            &[
                [1.0, 2.0],
                [2.0, 4.1],
                [3.0, 5.9],
                [1.0, -1.0],
                [2.0, -2.0],
                [5.0, 0.0],
            ],
            &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0],
        );
        let spec = FeatureSpec::parse("cor:y1,y2|sex=0", &d).unwrap();
        let e = estimate_feature(&spec, &ones(6), &d).unwrap();
        let (xa, xb) = ([1.0, 2.0, 3.0], [2.0, 4.1, 5.9]);
        let ma = 2.0;
        let mb = (2.0 + 4.1 + 5.9) / 3.0;
        let cov: f64 = xa.iter().zip(&xb).map(|(a, b)| (a - ma) * (b - mb)).sum();
        let va: f64 = xa.iter().map(|a| (a - ma) * (a - ma)).sum();
        let vb: f64 = xb.iter().map(|b| (b - mb) * (b - mb)).sum();
        assert!((e.value() - cov / (va * vb).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_correlation() {
        let d = ds(
            vec![0, 1, 1],
            &[[1.0, 2.0], [1.0, 3.0], [1.0, 4.0]],
            &[0.0; 3],
        );
        assert!(matches!(
            estimate_feature(
                &FeatureKind::Correlation { a: 0, b: 1 }.into(),
                &ones(3),
                &d
            ),
            Err(Error::DegenerateVariance(_))
        ));
    }

    #[test]
    fn parse_and_label() {
        let d = ds(vec![0, 1], &[[1.0, 2.0], [1.0, 3.0]], &[0.0, 1.0]);
        let s = FeatureSpec::parse("cdf:y2@1,2.5", &d).unwrap();
        assert_eq!(s.label(&d), "cdf(y2)@1,2.5");
        assert!(FeatureSpec::parse("cdf:y2@2,1", &d)
            .and_then(|s| evaluate_phi(&s, &d))
            .is_err());
        assert!(FeatureSpec::parse("bogus:y1", &d).is_err());
        assert!(FeatureSpec::parse("mean:y9", &d).is_err());
        let s = FeatureSpec::parse("cor:y1,y2|sex=1", &d).unwrap();
        assert_eq!(s.label(&d), "cor(y1,y2) | sex=1");
    }
}
