use anchorweight::cohort_model::ModelConfig;
use anchorweight::dataset::Dataset;
use anchorweight::functionals::{FeatureKind, FeatureSpec};
use anchorweight::pipeline::{Method, PipelineConfig};
use anchorweight::resampling::{bootstrap_pipeline, paired_difference, BootstrapConfig};
use anchorweight::simulation::{generate_dataset, ScenarioConfig};
use nalgebra::DMatrix;

fn mean_y1() -> Vec<FeatureSpec> {
    vec![FeatureKind::Mean { outcome: 0 }.into()]
}

#[test]
fn translate_mean_se_is_small_on_simulated_data() {
    let ds = generate_dataset(&ScenarioConfig::dissimilar_y(5000).calibrated(), 1).unwrap();
    let out = bootstrap_pipeline(
        &ds,
        &[PipelineConfig::new(Method::Translate, ModelConfig::qda())],
        &mean_y1(),
        &BootstrapConfig::new(500, 11),
    )
    .unwrap();
    let r = out.get("translate:mean(y1)").unwrap();
    assert_eq!(r.replicates(), 500);
    assert!(r.se > 0.0 && r.se <= 0.1, "se {}", r.se);
    assert!(r.ci_low <= r.point_estimate && r.point_estimate <= r.ci_high);
}

#[test]
fn identical_seed_gives_identical_replicates() {
    let ds = generate_dataset(&ScenarioConfig::dissimilar_xy(1500).calibrated(), 2).unwrap();
    let cfgs = [
        PipelineConfig::new(Method::Translate, ModelConfig::logistic()),
        PipelineConfig::new(Method::Importance, ModelConfig::logistic()),
    ];
    let run = |threads| {
        let mut c = BootstrapConfig::new(40, 21);
        c.threads = Some(threads);
        bootstrap_pipeline(&ds, &cfgs, &mean_y1(), &c).unwrap()
    };
    let a = run(1);
    assert_eq!(a, run(1));
    assert_eq!(a, run(6));
}

#[test]
fn ess_difference_is_paired() {
    let ds = generate_dataset(&ScenarioConfig::dissimilar_xy(2000).calibrated(), 3).unwrap();
    let cfgs = [
        PipelineConfig::new(Method::Translate, ModelConfig::qda()),
        PipelineConfig::new(Method::Importance, ModelConfig::qda()),
    ];
    let out = bootstrap_pipeline(&ds, &cfgs, &[], &BootstrapConfig::new(50, 4)).unwrap();
    let t = out.get("translate:ess").unwrap();
    let i = out.get("importance:ess").unwrap();
    let d = paired_difference(t, i).unwrap();
    for r in 0..50 {
        assert_eq!(
            d.replicate_values[r],
            t.replicate_values[r] - i.replicate_values[r]
        );
    }
    assert!(d.replicate_values.iter().all(|&v| v > 0.0));
    assert!(d.significant());
    let (lo, med, hi) = d.range_summary();
    assert!(lo <= med && med <= hi);
}

#[test]
fn fixed_model_path_differs_from_refit() {
    let ds = generate_dataset(&ScenarioConfig::dissimilar_y(1000).calibrated(), 5).unwrap();
    let cfgs = [PipelineConfig::new(Method::Translate, ModelConfig::qda())];
    let mut c = BootstrapConfig::new(20, 6);
    let refit = bootstrap_pipeline(&ds, &cfgs, &mean_y1(), &c).unwrap();
    c.refit = false;
    let fixed = bootstrap_pipeline(&ds, &cfgs, &mean_y1(), &c).unwrap();
    assert_eq!(
        refit.results[0].point_estimate,
        fixed.results[0].point_estimate
    );
    assert_ne!(
        refit.results[0].replicate_values,
        fixed.results[0].replicate_values
    );
}

#[test]
fn tiny_anchor_forces_redraws() {
    // Two anchor subjects out of 40: pooled resamples often lose the anchor.
    let n = 40;
    let labels: Vec<usize> = (0..n).map(|i| usize::from(i >= 2)).collect();
    let ds = Dataset::new(
        labels,
        vec!["0".into(), "1".into()],
        DMatrix::from_fn(n, 1, |i, _| i as f64),
        DMatrix::from_fn(n, 1, |i, _| (i % 5) as f64),
        vec!["x".into()],
        vec!["y".into()],
    )
    .unwrap();
    let out = bootstrap_pipeline(
        &ds,
        &[PipelineConfig::new(
            Method::AnchorOnly,
            ModelConfig::logistic(),
        )],
        &mean_y1(),
        &BootstrapConfig::new(50, 7),
    )
    .unwrap();
    assert!(out.redraws > 5, "redraws {}", out.redraws);
    assert!(!out.warnings.is_empty());
    assert_eq!(out.results[0].redraws, out.redraws);
}
