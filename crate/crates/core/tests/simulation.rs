use anchorweight::pipeline::Method;
use anchorweight::simulation::{
    closed_form_truths, generate_dataset, oracle_truths, run_study, ScenarioConfig, StudyConfig,
    VarianceConvention,
};

#[test]
fn anchor_count_is_binomial() {
    let cfg = ScenarioConfig::dissimilar_y(5000);
    for seed in 0..5 {
        let n0 = generate_dataset(&cfg, seed).unwrap().cohort_counts()[0] as f64;
        let sd = (5000.0f64 * 0.05 * 0.95).sqrt();
        assert!((n0 - 250.0).abs() < 4.0 * sd, "N0 = {n0}");
    }
}

#[test]
fn no_covariate_shift_without_phi_x() {
    let ds = generate_dataset(&ScenarioConfig::dissimilar_y(20_000), 1).unwrap();
    let ext: Vec<f64> = (0..ds.n())
        .filter(|&i| ds.labels()[i] == 1)
        .map(|i| ds.covariates()[(i, 3)])
        .collect();
    let m = ext.iter().sum::<f64>() / ext.len() as f64;
    let se = (0.1f64 / ext.len() as f64).sqrt();
    assert!(m.abs() < 4.0 * se, "external x4 mean {m}");
}

#[test]
fn closed_form_matches_reference_values() {
    let cfg = ScenarioConfig::dissimilar_xy(2).with_reference_x2();
    let t = closed_form_truths(&cfg);
    assert!((t.cov_y1_y2 - 146.0 / 600.0).abs() < 1e-12);
    assert!((t.sd_y2 - (371.0f64 / 600.0).sqrt()).abs() < 1e-12);
}

#[test]
fn oracles_agree_under_both_conventions() {
    for conv in [VarianceConvention::Variance, VarianceConvention::Sd] {
        for base in [
            ScenarioConfig::dissimilar_y(2),
            ScenarioConfig::dissimilar_xy(2).calibrated(),
        ] {
            let mut cfg = base;
            cfg.variance_convention = conv;
            let o = oracle_truths(&cfg, 1_000_000, 9).unwrap();
            assert!(o.agree, "{conv:?}: {:?}", o.z_scores);
        }
    }
}

#[test]
fn smallest_study_is_well_formed() {
    let study = StudyConfig::new(vec![ScenarioConfig::dissimilar_y(800).calibrated()], 2, 3);
    let res = run_study(&study).unwrap();
    assert_eq!(res.cells.len(), 3 * 3);
    for c in &res.cells {
        assert!(c.abs_bias.is_finite() && c.rmse.is_finite());
        assert!(c.abs_bias_se.is_finite() && c.rmse_se.is_finite());
        assert!(c.rmse + 1e-15 >= c.bias.abs());
    }
}

#[test]
fn study_rejects_single_replicate() {
    let study = StudyConfig::new(vec![ScenarioConfig::dissimilar_y(500)], 1, 0);
    assert!(run_study(&study).is_err());
}

#[test]
fn study_is_deterministic() {
    let study = StudyConfig::new(vec![ScenarioConfig::dissimilar_xy(1000).calibrated()], 5, 8);
    assert_eq!(run_study(&study).unwrap(), run_study(&study).unwrap());
}

#[test]
fn naive_reference_example() {
    let mut study = StudyConfig::new(vec![ScenarioConfig::dissimilar_y(5000).calibrated()], 20, 4);
    study.methods = vec![Method::Naive];
    let res = run_study(&study).unwrap();
    let c = res.cell("dissimilar_y", Method::Naive, "mean(y1)").unwrap();
    assert!((c.abs_bias - 0.45).abs() < 0.05, "{}", c.abs_bias);
}

#[test]
fn translate_error_shrinks_with_n() {
    let run = |n| {
        let mut study =
            StudyConfig::new(vec![ScenarioConfig::dissimilar_y(n).calibrated()], 100, 12);
        study.methods = vec![Method::Translate];
        run_study(&study).unwrap()
    };
    let (small, large) = (run(5000), run(10_000));
    for f in ["mean(y1)", "sd(y2)", "cov(y1,y2)"] {
        let a = small
            .cell("dissimilar_y", Method::Translate, f)
            .unwrap()
            .rmse;
        let b = large
            .cell("dissimilar_y", Method::Translate, f)
            .unwrap()
            .rmse;
        assert!(b < a, "{f}: {a} -> {b}");
    }
}

#[test]
fn rendered_table_has_every_cell() {
    let study = StudyConfig::new(
        vec![
            ScenarioConfig::dissimilar_y(600).calibrated(),
            ScenarioConfig::dissimilar_xy(600).calibrated(),
        ],
        3,
        5,
    );
    let res = run_study(&study).unwrap();
    let table = res.render_table(',', 2);
    assert!(!table.contains("NA"));
    assert_eq!(table.matches("abs_bias").count(), 2);
    assert_eq!(table.matches("rmse").count(), 2);
}
