//! Alignment factors, cohort and composite effective sample sizes, the
//! ESS-maximizing alignment proportions, and normalized subject weights.
//!
//! The sample quantities follow the weighting algorithm step by step:
//!
//! 1. ψ̂ᵢ = (π̂_{sᵢ}/π̂₀)·exp(−η̂_{sᵢ}(zᵢ))
//! 2. Q̂⁽ˢ⁾ = Nπ̂₀²/ḡₛ with ḡₛ = N⁻¹ Σᵢ exp(−2η̂_{sᵢ}(zᵢ))·𝕀(sᵢ = s)
//! 3. γ̂ₛ ∝ Q̂⁽ˢ⁾ (or a prespecified γ)
//! 4. ŵᵢ = (γ̂_{sᵢ}/π̂_{sᵢ})·ψ̂ᵢ, normalized to Σ w̃ᵢ = N
//! 5. composite ESS N²/Σ w̃ᵢ²
//!
//! The harmonic closed form (Σ γₛ²/Q⁽ˢ⁾ · π̂ₛ/πₛ)⁻¹ is provided alongside so
//! the empirical composite ESS can be cross-checked.

use serde::{Deserialize, Serialize};

use crate::cohort_model::EtaMatrix;
use crate::dataset::PrevalenceVector;
use crate::error::{Error, Result};

/// Tolerance on Σγ = 1.
const SIMPLEX_TOL: f64 = 1e-12;

/// ψ̂ for every subject. Anchor subjects carry exactly 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentFactors {
    psi: Vec<f64>,
}

impl AlignmentFactors {
    pub fn values(&self) -> &[f64] {
        &self.psi
    }
}

/// A point on the unit simplex indexing an anchor-aligned pseudopopulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentProportions {
    gamma: Vec<f64>,
}

impl AlignmentProportions {
    pub fn new(gamma: Vec<f64>) -> Result<Self> {
        if gamma.is_empty() {
            return Err(Error::Domain(
                "alignment proportions cannot be empty".into(),
            ));
        }
        if gamma.iter().any(|g| !g.is_finite() || *g < 0.0) {
            return Err(Error::Domain(
                "alignment proportions must be non-negative".into(),
            ));
        }
        let total: f64 = gamma.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL * gamma.len() as f64 {
            return Err(Error::Domain(format!(
                "alignment proportions sum to {total}, not 1"
            )));
        }
        Ok(Self { gamma })
    }

    pub fn values(&self) -> &[f64] {
        &self.gamma
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }
}

/// Normalized subject weights, Σ w̃ᵢ = N.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    weights: Vec<f64>,
    gamma: Option<AlignmentProportions>,
    method_tag: String,
}

impl WeightSet {
    /// Wraps weights that already satisfy Σ w = N.
    pub fn new(weights: Vec<f64>, method_tag: &str) -> Result<Self> {
        let n = weights.len() as f64;
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::DegenerateWeights(
                "weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - n).abs() > 1e-8 * n {
            return Err(Error::DegenerateWeights(format!(
                "weights sum to {total}, expected {n}"
            )));
        }
        Ok(Self {
            weights,
            gamma: None,
            method_tag: method_tag.to_string(),
        })
    }

    pub fn with_gamma(mut self, gamma: AlignmentProportions) -> Self {
        self.gamma = Some(gamma);
        self
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn gamma(&self) -> Option<&AlignmentProportions> {
        self.gamma.as_ref()
    }

    pub fn method_tag(&self) -> &str {
        &self.method_tag
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

fn check_dims(eta: &EtaMatrix, labels: &[usize], prev: &PrevalenceVector) -> Result<()> {
    if eta.n() != labels.len() {
        return Err(Error::Shape(format!(
            "eta has {} rows for {} subjects",
            eta.n(),
            labels.len()
        )));
    }
    if eta.n_cohorts() != prev.len() {
        return Err(Error::Shape(format!(
            "eta has {} cohort columns, prevalences have {}",
            eta.n_cohorts(),
            prev.len()
        )));
    }
    if let Some(&s) = labels.iter().find(|&&s| s >= prev.len()) {
        return Err(Error::Shape(format!("label {s} out of range")));
    }
    Ok(())
}

pub fn alignment_factors(
    eta: &EtaMatrix,
    labels: &[usize],
    prev: &PrevalenceVector,
) -> Result<AlignmentFactors> {
    check_dims(eta, labels, prev)?;
    let pi0 = prev.pi_hat[0];
    let psi = labels
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            if s == 0 {
                return Ok(1.0);
            }
            let e = eta.get(i, s);
            let v = prev.pi_hat[s] / pi0 * (-e).exp();
            if v.is_finite() && v > 0.0 {
                Ok(v)
            } else {
                Err(Error::NonFinite(format!(
                    "alignment factor for subject {i} is {v} (eta = {e})"
                )))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AlignmentFactors { psi })
}

/// Q̂⁽ˢ⁾ for every cohort; the anchor entry is N₀.
pub fn cohort_ess(eta: &EtaMatrix, labels: &[usize], prev: &PrevalenceVector) -> Result<Vec<f64>> {
    check_dims(eta, labels, prev)?;
    let k = prev.len();
    let n = labels.len() as f64;
    let mut g = vec![0.0; k];
    let mut seen = vec![0usize; k];
    for (i, &s) in labels.iter().enumerate() {
        g[s] += (-2.0 * eta.get(i, s)).exp();
        seen[s] += 1;
    }
    if let Some(s) = seen.iter().position(|&c| c == 0) {
        return Err(Error::Support(format!("cohort {s} has no subjects")));
    }
    let pi0 = prev.pi_hat[0];
    (0..k)
        .map(|s| {
            if s == 0 {
                // η₀ ≡ 0, so ḡ₀ = π̂₀ and Q̂⁽⁰⁾ reduces to N₀.
                return Ok(seen[0] as f64);
            }
            let gbar = g[s] / n;
            let q = n * pi0 * pi0 / gbar;
            if q.is_finite() && q > 0.0 {
                Ok(q)
            } else {
                Err(Error::NonFinite(format!("cohort {s} ESS is {q}")))
            }
        })
        .collect()
}

/// γ̂ₛ = Q̂⁽ˢ⁾ / Σᵣ Q̂⁽ʳ⁾.
pub fn translate_proportions(cohort_ess: &[f64]) -> Result<AlignmentProportions> {
    if cohort_ess.is_empty() {
        return Err(Error::Domain("no cohort ESS values".into()));
    }
    if let Some(q) = cohort_ess.iter().find(|q| !(q.is_finite() && **q > 0.0)) {
        return Err(Error::Domain(format!(
            "cohort ESS must be positive, got {q}"
        )));
    }
    let total: f64 = cohort_ess.iter().sum();
    AlignmentProportions::new(cohort_ess.iter().map(|q| q / total).collect())
}

/// Raw alignment weights ŵᵢ = (γ_{sᵢ}/π̂_{sᵢ})·ψ̂ᵢ.
pub fn alignment_weights(
    gamma: &AlignmentProportions,
    prev: &PrevalenceVector,
    psi: &AlignmentFactors,
    labels: &[usize],
) -> Result<Vec<f64>> {
    if gamma.len() != prev.len() {
        return Err(Error::Shape("gamma and prevalence lengths differ".into()));
    }
    if psi.values().len() != labels.len() {
        return Err(Error::Shape(
            "alignment factors and labels differ in length".into(),
        ));
    }
    labels
        .iter()
        .zip(psi.values())
        .map(|(&s, &p)| {
            if s >= prev.len() {
                return Err(Error::Shape(format!("label {s} out of range")));
            }
            Ok(gamma.values()[s] / prev.pi_hat[s] * p)
        })
        .collect()
}

/// w̃ᵢ = N·rawᵢ / Σ raw.
pub fn normalize_weights(raw: &[f64], method_tag: &str) -> Result<WeightSet> {
    if raw.is_empty() {
        return Err(Error::DegenerateWeights("no weights".into()));
    }
    if raw.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::DegenerateWeights(
            "raw weights must be finite and non-negative".into(),
        ));
    }
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateWeights("all raw weights are zero".into()));
    }
    let n = raw.len() as f64;
    WeightSet::new(raw.iter().map(|w| n * w / total).collect(), method_tag)
}

/// N² / Σ w̃ᵢ² (written as (Σw̃)²/Σw̃² so it is exact for Σw̃ = N).
pub fn composite_ess(w: &WeightSet) -> f64 {
    let s: f64 = w.weights().iter().sum();
    let s2: f64 = w.weights().iter().map(|v| v * v).sum();
    s * s / s2
}

/// (Σₛ γₛ²/Q⁽ˢ⁾ · π̂ₛ/πₛ)⁻¹. With `true_prevalence = None` the ratio π̂ₛ/πₛ
/// is taken as 1, the only option outside simulation.
pub fn closed_form_composite_ess(
    gamma: &AlignmentProportions,
    cohort_ess: &[f64],
    prev: &PrevalenceVector,
    true_prevalence: Option<&[f64]>,
) -> Result<f64> {
    if gamma.len() != cohort_ess.len() || gamma.len() != prev.len() {
        return Err(Error::Shape(
            "gamma, cohort ESS and prevalences must align".into(),
        ));
    }
    if let Some(pi) = true_prevalence {
        if pi.len() != prev.len() || pi.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::Domain(
                "true prevalences must be positive and aligned".into(),
            ));
        }
    }
    let mut total = 0.0;
    for (s, (&g, &q)) in gamma.values().iter().zip(cohort_ess).enumerate() {
        if g == 0.0 {
            continue;
        }
        if !(q > 0.0) {
            return Err(Error::Domain(format!(
                "cohort {s} has gamma {g} but ESS {q}"
            )));
        }
        let ratio = true_prevalence.map_or(1.0, |pi| prev.pi_hat[s] / pi[s]);
        total += g * g / q * ratio;
    }
    Ok(1.0 / total)
}

/// Caps raw weights at their `quantile` order statistic.
pub fn cap_weights(raw: &[f64], quantile: f64) -> Result<Vec<f64>> {
    if !(quantile > 0.0 && quantile <= 1.0) {
        return Err(Error::Domain(format!(
            "cap quantile {quantile} outside (0, 1]"
        )));
    }
    let mut sorted = raw.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = ((quantile * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    let cap = sorted[idx];
    Ok(raw.iter().map(|w| w.min(cap)).collect())
}

/// How γ is chosen.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GammaChoice {
    /// γ̂ₛ ∝ Q̂⁽ˢ⁾, maximizing composite ESS.
    #[default]
    Translate,
    Prespecified {
        gamma: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub gamma: GammaChoice,
    /// Upper quantile cap on raw weights; `None` keeps them untouched.
    pub cap_quantile: Option<f64>,
    /// Empirical vs closed-form ESS ratio that triggers a warning.
    pub discrepancy_ratio: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            gamma: GammaChoice::Translate,
            cap_quantile: None,
            discrepancy_ratio: 1.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortEss {
    pub label: String,
    pub count: usize,
    pub ess: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssReport {
    pub n: usize,
    pub cohorts: Vec<CohortEss>,
    pub composite_ess_empirical: f64,
    pub composite_ess_closed_form: f64,
    pub sum_cohort_ess: f64,
    pub ess_percent_of_n: f64,
    pub warnings: Vec<String>,
    /// Which prevalence plug-in the closed form used.
    pub prevalence_plug_in: String,
}

impl EssReport {
    pub fn cohort_ess(&self) -> Vec<f64> {
        self.cohorts.iter().map(|c| c.ess).collect()
    }

    pub fn gamma(&self) -> Vec<f64> {
        self.cohorts.iter().map(|c| c.gamma).collect()
    }
}

/// Everything the alignment step produces for one dataset.
#[derive(Debug, Clone)]
pub struct Alignment {
    pub factors: AlignmentFactors,
    pub cohort_ess: Vec<f64>,
    pub gamma: AlignmentProportions,
    pub weights: WeightSet,
    pub report: EssReport,
}

/// Runs the full alignment step on fitted log ratios.
pub fn align(
    eta: &EtaMatrix,
    labels: &[usize],
    prev: &PrevalenceVector,
    cohort_names: &[String],
    cfg: &AlignmentConfig,
) -> Result<Alignment> {
    let factors = alignment_factors(eta, labels, prev)?;
    let q = cohort_ess(eta, labels, prev)?;
    let (gamma, tag) = match &cfg.gamma {
        GammaChoice::Translate => (translate_proportions(&q)?, "translate"),
        GammaChoice::Prespecified { gamma } => {
            if gamma.len() != prev.len() {
                return Err(Error::Shape(format!(
                    "prespecified gamma has {} entries for {} cohorts",
                    gamma.len(),
                    prev.len()
                )));
            }
            (AlignmentProportions::new(gamma.clone())?, "prespecified")
        }
    };
    let mut raw = alignment_weights(&gamma, prev, &factors, labels)?;
    if let Some(qtl) = cfg.cap_quantile {
        raw = cap_weights(&raw, qtl)?;
    }
    let weights = normalize_weights(&raw, tag)?.with_gamma(gamma.clone());
    let empirical = composite_ess(&weights);
    let closed = closed_form_composite_ess(&gamma, &q, prev, None)?;
    let mut warnings = Vec::new();
    let ratio = (empirical / closed).max(closed / empirical);
    if ratio > cfg.discrepancy_ratio {
        warnings.push(format!(
            "empirical composite ESS {empirical:.1} and closed form {closed:.1} differ by a factor {ratio:.2}; the cohort model may be misfit"
        ));
    }
    let n = labels.len();
    let report = EssReport {
        n,
        cohorts: (0..prev.len())
            .map(|s| CohortEss {
                label: cohort_names
                    .get(s)
                    .cloned()
                    .unwrap_or_else(|| s.to_string()),
                count: prev.counts[s],
                ess: q[s],
                gamma: gamma.values()[s],
            })
            .collect(),
        composite_ess_empirical: empirical,
        composite_ess_closed_form: closed,
        sum_cohort_ess: q.iter().sum(),
        ess_percent_of_n: 100.0 * empirical / n as f64,
        warnings,
        prevalence_plug_in: "true prevalences taken equal to sample prevalences".into(),
    };
    Ok(Alignment {
        factors,
        cohort_ess: q,
        gamma,
        weights,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn prev(counts: &[usize]) -> PrevalenceVector {
        PrevalenceVector::from_counts(counts.to_vec()).unwrap()
    }

    fn eta(rows: &[[f64; 2]]) -> EtaMatrix {
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        EtaMatrix::from_matrix(DMatrix::from_row_slice(rows.len(), 2, &flat)).unwrap()
    }

    #[test]
    fn factors_follow_bayes_inversion() {
        // π̂ = (0.1, 0.9)
        let p = prev(&[1, 9]);
        let mut rows = vec![[0.0, 0.3]];
        rows.extend(std::iter::repeat_n([0.0, 9f64.ln()], 8));
        rows.push([0.0, 1.5f64.ln()]);
        let labels: Vec<usize> = (0..10).map(|i| (i > 0) as usize).collect();
        let f = alignment_factors(&eta(&rows), &labels, &p).unwrap();
        assert_eq!(f.values()[0], 1.0);
        assert!((f.values()[1] - 1.0).abs() < 1e-12);
        assert!((f.values()[9] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn cohort_ess_hand_example() {
        // N = 4, π̂ = (0.5, 0.5); exp(−2η) of the external subjects are 1 and 9.
        let p = prev(&[2, 2]);
        let e = eta(&[
            [0.0, 0.7],
            [0.0, -2.0],
            [0.0, 0.0],
            [0.0, -(9f64.ln()) / 2.0],
        ]);
        let q = cohort_ess(&e, &[0, 0, 1, 1], &p).unwrap();
        assert_eq!(q[0], 2.0);
        assert!((q[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn identical_cohorts_have_full_ess() {
        let p = prev(&[3, 5]);
        let c = (5.0f64 / 3.0).ln();
        let e = eta(&[[0.0, c]; 8]);
        let labels = [0, 0, 0, 1, 1, 1, 1, 1];
        let q = cohort_ess(&e, &labels, &p).unwrap();
        assert!((q[1] - 5.0).abs() < 1e-12);
        let a = align(&e, &labels, &p, &[], &AlignmentConfig::default()).unwrap();
        assert!(a.weights.weights().iter().all(|w| (w - 1.0).abs() < 1e-12));
        assert!((a.gamma.values()[0] - 3.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn proportions() {
        let g = translate_proportions(&[50.0, 450.0, 100.0]).unwrap();
        let expect = [1.0 / 12.0, 0.75, 1.0 / 6.0];
        for (a, b) in g.values().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(translate_proportions(&[7.0]).unwrap().values(), &[1.0]);
        assert!(matches!(
            translate_proportions(&[1.0, 0.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn raw_weight_arithmetic() {
        let p = prev(&[1, 9]);
        let g = AlignmentProportions::new(vec![0.25, 0.75]).unwrap();
        let psi = AlignmentFactors {
            psi: vec![1.0, 6.0],
        };
        let raw = alignment_weights(&g, &p, &psi, &[0, 1]).unwrap();
        assert!((raw[1] - 5.0).abs() < 1e-12);

        let g = AlignmentProportions::new(vec![0.1, 0.9]).unwrap();
        let raw = alignment_weights(&g, &p, &psi, &[0, 1]).unwrap();
        assert!((raw[0] - 1.0).abs() < 1e-12);

        let g = AlignmentProportions::new(vec![1.0, 0.0]).unwrap();
        let raw = alignment_weights(&g, &p, &psi, &[0, 1]).unwrap();
        assert_eq!(raw[1], 0.0);
    }

    #[test]
    fn normalization() {
        assert_eq!(
            normalize_weights(&[2.0, 2.0, 2.0], "t").unwrap().weights(),
            &[1.0, 1.0, 1.0]
        );
        assert_eq!(
            normalize_weights(&[1.0, 3.0], "t").unwrap().weights(),
            &[0.5, 1.5]
        );
        assert_eq!(
            normalize_weights(&[0.0, 5.0], "t").unwrap().weights(),
            &[0.0, 2.0]
        );
        assert!(matches!(
            normalize_weights(&[0.0, 0.0], "t"),
            Err(Error::DegenerateWeights(_))
        ));
    }

    #[test]
    fn composite_ess_values() {
        let w = WeightSet::new(vec![1.0; 100], "naive").unwrap();
        assert!((composite_ess(&w) - 100.0).abs() < 1e-12);
        let w = WeightSet::new(vec![2.0, 2.0, 0.0, 0.0], "x").unwrap();
        assert!((composite_ess(&w) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn closed_form_values() {
        let p1 = prev(&[40]);
        let g = AlignmentProportions::new(vec![1.0]).unwrap();
        assert!((closed_form_composite_ess(&g, &[40.0], &p1, None).unwrap() - 40.0).abs() < 1e-12);

        let p = prev(&[100, 700, 200]);
        let q = [50.0, 450.0, 100.0];
        let g = translate_proportions(&q).unwrap();
        assert!((closed_form_composite_ess(&g, &q, &p, None).unwrap() - 600.0).abs() < 1e-9);
        let g = AlignmentProportions::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert!((closed_form_composite_ess(&g, &q, &p, None).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn cap_limits_extremes() {
        let raw: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let capped = cap_weights(&raw, 0.9).unwrap();
        assert_eq!(capped[99], 90.0);
        assert_eq!(capped[10], 11.0);
    }
}
