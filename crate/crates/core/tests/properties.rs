use anchorweight::alignment::{
    alignment_factors, alignment_weights, closed_form_composite_ess, cohort_ess, composite_ess,
    normalize_weights, translate_proportions, AlignmentProportions,
};
use anchorweight::cohort_model::EtaMatrix;
use anchorweight::dataset::{load_dataset, Dataset, PrevalenceVector};
use anchorweight::functionals::{estimate_feature, FeatureKind};
use nalgebra::DMatrix;
use proptest::prelude::*;

/// Labels cycling through every cohort first so none is empty, then free.
fn labelled(k: usize, extra: Vec<usize>) -> Vec<usize> {
    (0..k).chain(extra.into_iter().map(|s| s % k)).collect()
}

fn eta_for(labels: &[usize], k: usize, raw: &[f64]) -> EtaMatrix {
    let n = labels.len();
    EtaMatrix::from_matrix(DMatrix::from_fn(n, k, |i, s| {
        if s == 0 {
            0.0
        } else {
            raw[(i * k + s) % raw.len()]
        }
    }))
    .unwrap()
}

fn counts(labels: &[usize], k: usize) -> PrevalenceVector {
    let mut c = vec![0; k];
    for &s in labels {
        c[s] += 1;
    }
    PrevalenceVector::from_counts(c).unwrap()
}

proptest! {
    #[test]
    fn closed_form_at_optimum_is_total_cohort_ess(
        k in 2usize..5,
        extra in prop::collection::vec(0usize..8, 10..200),
        raw in prop::collection::vec(-3.0f64..3.0, 1..40),
    ) {
        let labels = labelled(k, extra);
        let prev = counts(&labels, k);
        let q = cohort_ess(&eta_for(&labels, k, &raw), &labels, &prev).unwrap();
        prop_assert_eq!(q[0], prev.counts[0] as f64);
        let gamma = translate_proportions(&q).unwrap();
        let total: f64 = q.iter().sum();
        let cf = closed_form_composite_ess(&gamma, &q, &prev, None).unwrap();
        prop_assert!((cf - total).abs() <= 1e-9 * total);
    }

    #[test]
    fn no_proportion_beats_the_optimum(
        k in 2usize..5,
        extra in prop::collection::vec(0usize..8, 10..200),
        raw in prop::collection::vec(-3.0f64..3.0, 1..40),
        alt in prop::collection::vec(0.0f64..1.0, 4),
    ) {
        let labels = labelled(k, extra);
        let prev = counts(&labels, k);
        let q = cohort_ess(&eta_for(&labels, k, &raw), &labels, &prev).unwrap();
        let best = closed_form_composite_ess(&translate_proportions(&q).unwrap(), &q, &prev, None).unwrap();
        let mut g: Vec<f64> = alt[..k].iter().map(|v| v + 1e-3).collect();
        let s: f64 = g.iter().sum();
        g.iter_mut().for_each(|v| *v /= s);
        let other = closed_form_composite_ess(&AlignmentProportions::new(g).unwrap(), &q, &prev, None).unwrap();
        prop_assert!(other <= best * (1.0 + 1e-12));
    }

    #[test]
    fn normalized_weights_sum_to_n(raw in prop::collection::vec(1e-6f64..1e3, 1..300), scale in 1e-3f64..1e3) {
        let n = raw.len() as f64;
        let w = normalize_weights(&raw, "t").unwrap();
        let sum: f64 = w.weights().iter().sum();
        prop_assert!((sum - n).abs() <= 1e-9 * n);
        let ess = composite_ess(&w);
        prop_assert!(ess >= 1.0 - 1e-9 && ess <= n * (1.0 + 1e-12));
        let scaled: Vec<f64> = raw.iter().map(|v| v * scale).collect();
        let w2 = normalize_weights(&scaled, "t").unwrap();
        for (a, b) in w.weights().iter().zip(w2.weights()) {
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        }
    }

    #[test]
    fn translate_weights_are_positive_and_anchor_flat(
        k in 2usize..4,
        extra in prop::collection::vec(0usize..6, 10..100),
        raw in prop::collection::vec(-2.0f64..2.0, 1..30),
    ) {
        let labels = labelled(k, extra);
        let prev = counts(&labels, k);
        let eta = eta_for(&labels, k, &raw);
        let gamma = translate_proportions(&cohort_ess(&eta, &labels, &prev).unwrap()).unwrap();
        let psi = alignment_factors(&eta, &labels, &prev).unwrap();
        let w = normalize_weights(&alignment_weights(&gamma, &prev, &psi, &labels).unwrap(), "t").unwrap();
        let anchor: Vec<f64> = labels.iter().zip(w.weights()).filter(|(s, _)| **s == 0).map(|(_, v)| *v).collect();
        prop_assert!(w.weights().iter().all(|v| *v > 0.0));
        prop_assert!(anchor.iter().all(|v| (v - anchor[0]).abs() <= 1e-12 * anchor[0]));
    }

    #[test]
    fn weighted_mean_is_affine_equivariant_and_bounded(
        y in prop::collection::vec(-100.0f64..100.0, 3..80),
        raw in prop::collection::vec(1e-3f64..10.0, 80),
        a in -5.0f64..5.0,
        b in 0.1f64..5.0,
    ) {
        let n = y.len();
        let w = normalize_weights(&raw[..n], "t").unwrap();
        let make = |f: &dyn Fn(f64) -> f64| {
            Dataset::new(
                vec![0; n],
                vec!["0".into()],
                DMatrix::zeros(n, 1),
                DMatrix::from_iterator(n, 1, y.iter().map(|v| f(*v))),
                vec!["x".into()],
                vec!["y".into()],
            )
            .unwrap()
        };
        let ds = make(&|v| v);
        let moved = make(&|v| a + b * v);
        let mean = FeatureKind::Mean { outcome: 0 }.into();
        let sd = FeatureKind::Sd { outcome: 0 }.into();
        let m = estimate_feature(&mean, &w, &ds).unwrap().value();
        let m2 = estimate_feature(&mean, &w, &moved).unwrap().value();
        let s = estimate_feature(&sd, &w, &ds).unwrap().value();
        let s2 = estimate_feature(&sd, &w, &moved).unwrap().value();
        let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m >= lo - 1e-9 && m <= hi + 1e-9);
        prop_assert!((m2 - (a + b * m)).abs() <= 1e-8 * (1.0 + m2.abs()));
        prop_assert!((s2 - b * s).abs() <= 1e-7 * (1.0 + s2.abs()));
    }

    #[test]
    fn delimited_round_trip(
        rows in prop::collection::vec((0usize..3, -1e6f64..1e6, 0usize..2, -1e3f64..1e3), 3..60),
    ) {
        let mut lines = vec!["cohort,x,grp,y".to_string()];
        let names = ["0", "site_b", "site c"];
        for (i, (s, x, g, y)) in rows.iter().enumerate() {
            let s = if i < 3 { i } else { *s };
            lines.push(format!("{},{x},{},{y}", names[s], ["m", "f"][*g]));
        }
        let text = lines.join("\n");
        let schema = anchorweight::dataset::Schema::new("cohort", &["x", "grp"], &["y"])
            .with_categorical(&["grp"]);
        let ds = load_dataset(text.as_bytes(), &schema).unwrap().dataset;
        let mut buf = Vec::new();
        ds.write_delimited(&mut buf, b',', "cohort").unwrap();
        let back = load_dataset(buf.as_slice(), &ds.schema("cohort")).unwrap().dataset;
        prop_assert_eq!(ds, back);
    }
}
