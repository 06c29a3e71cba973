use std::fs::File;
use std::path::PathBuf;

use anchorweight::dataset::{load_dataset, Dataset, MissingPolicy, Schema};
use anchorweight::functionals::{estimate_feature, FeatureKind, FeatureSpec};
use anchorweight::resampling::{
    bootstrap_pipeline, feature_value_names, paired_difference, BootstrapConfig, BootstrapResult,
};
use anchorweight::simulation::{oracle_truths, run_study, ScenarioConfig, StudyConfig};
use anchorweight::{compute_weights, AlignmentConfig, Method, ModelConfig, PipelineConfig};
use serde::Serialize;

use crate::config::{
    file_features, file_list, merge_common, merge_data, Common, Data, EstimateArgs, FileConfig,
    SimulateArgs, WeightsArgs,
};
use crate::output::{aligned, config_header, delimited, sig, with_suffix, Outputs};

type CmdResult<T = ()> = Result<T, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn parse_model(name: Option<&str>, default: ModelConfig) -> CmdResult<ModelConfig> {
    match name.map(|s| s.trim().to_ascii_lowercase()) {
        None => Ok(default),
        Some(s) if s == "logistic" => Ok(ModelConfig::logistic()),
        Some(s) if s == "qda" => Ok(ModelConfig::qda()),
        Some(s) => Err(format!("unknown model '{s}' (expected logistic or qda)")),
    }
}

fn parse_methods(names: &[String], default: &[Method]) -> CmdResult<Vec<Method>> {
    if names.is_empty() {
        return Ok(default.to_vec());
    }
    let mut out: Vec<Method> = Vec::new();
    for n in names {
        let m: Method = n.parse().map_err(err)?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    Ok(out)
}

fn alignment_config(cap: Option<f64>) -> AlignmentConfig {
    AlignmentConfig {
        cap_quantile: cap,
        ..AlignmentConfig::default()
    }
}

fn load(data: &Data) -> CmdResult<(Dataset, Vec<usize>)> {
    let missing = match data.missing.as_str() {
        "drop" => MissingPolicy::Drop,
        "fail" => MissingPolicy::Fail,
        other => {
            return Err(format!(
                "unknown missing policy '{other}' (expected drop or fail)"
            ))
        }
    };
    let schema = Schema {
        label_column: data.label_col.clone(),
        anchor_label: data.anchor.clone(),
        covariates: data.covariates.clone(),
        categorical: data.categorical.clone(),
        outcomes: data.outcomes.clone(),
        missing,
        delimiter: None,
    };
    let file = File::open(&data.input)
        .map_err(|e| format!("cannot open {}: {e}", data.input.display()))?;
    let loaded = load_dataset(file, &schema).map_err(err)?;
    let total = loaded.dataset.n() + loaded.dropped_rows.len();
    let kept = (1..=total)
        .filter(|r| loaded.dropped_rows.binary_search(r).is_err())
        .collect();
    Ok((loaded.dataset, kept))
}

fn report_threads(threads: Option<usize>) -> CmdResult {
    if let Some(t) = threads {
        if t == 0 {
            return Err("--threads must be positive".into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(err)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct WeightsRun<'a> {
    command: &'static str,
    data: &'a Data,
    method: Method,
    model: &'a ModelConfig,
    alignment: &'a AlignmentConfig,
    bootstrap: usize,
    seed: u64,
    alpha: f64,
}

pub fn weights(args: WeightsArgs) -> CmdResult {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let report_path = args.report.or_else(|| file.report.clone());
    let common = merge_common(args.common, &file);
    let data = merge_data(args.data, &file)?;
    report_threads(common.threads)?;
    let methods = parse_methods(&common.methods, &[Method::Translate])?;
    if methods.len() != 1 {
        return Err("weights takes exactly one --method".into());
    }
    let method = methods[0];
    let model = parse_model(common.model.as_deref(), ModelConfig::logistic())?;
    let alignment = alignment_config(data.cap_quantile);
    let out = common.out.clone().ok_or("missing required option --out")?;
    let report_path = report_path.unwrap_or_else(|| with_suffix(&out, ".ess.json"));

    let (ds, rows) = load(&data)?;
    let pc = PipelineConfig {
        method,
        model: model.clone(),
        alignment: alignment.clone(),
    };
    let w = compute_weights(&ds, &pc).map_err(err)?;

    let run = WeightsRun {
        command: "weights",
        data: &data,
        method,
        model: &model,
        alignment: &alignment,
        bootstrap: common.bootstrap,
        seed: common.seed,
        alpha: common.alpha,
    };
    let mut text = config_header(&run);
    let weight_rows: Vec<Vec<String>> =
        std::iter::once(["index", "label", "weight"].map(String::from).to_vec())
            .chain(w.weights.weights().iter().enumerate().map(|(i, wt)| {
                vec![
                    rows[i].to_string(),
                    ds.cohort_names()[ds.labels()[i]].clone(),
                    format!("{wt:?}"),
                ]
            }))
            .collect();
    text.push_str(&delimited(&weight_rows, ','));

    let ess_boot = if common.bootstrap > 0 {
        let cfg = boot_config(&common, false, true);
        let out = bootstrap_pipeline(&ds, std::slice::from_ref(&pc), &[], &cfg).map_err(err)?;
        Some(out)
    } else {
        None
    };
    let (config_json, config_hash) = crate::output::config_fingerprint(&run);
    let report = serde_json::json!({
        "config_sha256": config_hash,
        "config": serde_json::from_str::<serde_json::Value>(&config_json).map_err(err)?,
        "dataset": ds.summary(),
        "method": method,
        "composite_ess": w.composite_ess,
        "ess_percent_of_n": 100.0 * w.composite_ess / ds.n() as f64,
        "alignment": w.report,
        "bootstrap": ess_boot,
    });

    let mut outputs = Outputs::default();
    outputs.add(out.clone(), text);
    outputs.add(
        report_path.clone(),
        serde_json::to_string_pretty(&report).map_err(err)? + "\n",
    );
    outputs.commit()?;

    let n = ds.n() as f64;
    let mut table = vec![vec![
        "cohort".to_string(),
        "count".into(),
        "ess".into(),
        "gamma".into(),
    ]];
    if let Some(rep) = &w.report {
        for c in &rep.cohorts {
            table.push(vec![
                c.label.clone(),
                c.count.to_string(),
                sig(c.ess, common.precision),
                sig(c.gamma, common.precision),
            ]);
        }
    }
    print!("{}", aligned(&table));
    println!(
        "method {method}  composite ESS {} ({}% of N = {})  seed {}",
        sig(w.composite_ess, common.precision),
        sig(100.0 * w.composite_ess / n, 3),
        ds.n(),
        common.seed
    );
    if let Some(rep) = &w.report {
        for warning in &rep.warnings {
            eprintln!("warning: {warning}");
        }
    }
    println!("wrote {} and {}", out.display(), report_path.display());
    Ok(())
}

fn boot_config(common: &Common, stratified: bool, refit: bool) -> BootstrapConfig {
    BootstrapConfig {
        replicates: common.bootstrap,
        seed: common.seed,
        alpha: common.alpha,
        stratified,
        refit,
        threads: None,
    }
}

/// Expands `cor:*` / `cov:*` into every outcome pair.
fn expand_features(texts: &[String], ds: &Dataset) -> CmdResult<Vec<FeatureSpec>> {
    let mut out = Vec::new();
    for t in texts {
        let (head, group) = match t.split_once('|') {
            Some((h, g)) => (h, Some(g)),
            None => (t.as_str(), None),
        };
        let pairwise = match head.trim() {
            "cor:*" | "correlation:*" => Some("cor"),
            "cov:*" | "covariance:*" => Some("cov"),
            _ => None,
        };
        match pairwise {
            Some(kind) => {
                let names = ds.outcome_names();
                for a in 0..names.len() {
                    for b in a + 1..names.len() {
                        let mut text = format!("{kind}:{},{}", names[a], names[b]);
                        if let Some(g) = group {
                            text = format!("{text}|{g}");
                        }
                        out.push(FeatureSpec::parse(&text, ds).map_err(err)?);
                    }
                }
            }
            None => out.push(FeatureSpec::parse(t, ds).map_err(err)?),
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct EstimateRun<'a> {
    command: &'static str,
    data: &'a Data,
    methods: &'a [Method],
    model: &'a ModelConfig,
    alignment: &'a AlignmentConfig,
    features: &'a [String],
    by: &'a Option<String>,
    bootstrap: usize,
    seed: u64,
    alpha: f64,
    stratified: bool,
    refit: bool,
}

#[derive(Debug, Clone, Serialize)]
struct EstimateRow {
    feature: String,
    method: Method,
    estimate: f64,
    se: Option<f64>,
    ci_low: Option<f64>,
    ci_high: Option<f64>,
    significant: Option<bool>,
    /// (min, median, max) of replicate values, for difference rows.
    #[serde(skip_serializing_if = "Option::is_none")]
    replicate_range: Option<(f64, f64, f64)>,
}

impl EstimateRow {
    fn point(feature: String, method: Method, estimate: f64) -> Self {
        Self {
            feature,
            method,
            estimate,
            se: None,
            ci_low: None,
            ci_high: None,
            significant: None,
            replicate_range: None,
        }
    }

    fn from_boot(feature: String, method: Method, r: &BootstrapResult, difference: bool) -> Self {
        Self {
            feature,
            method,
            estimate: r.point_estimate,
            se: Some(r.se),
            ci_low: Some(r.ci_low),
            ci_high: Some(r.ci_high),
            significant: difference.then(|| r.significant()),
            replicate_range: difference.then(|| r.range_summary()),
        }
    }
}

/// Point values for one method in bootstrap layout: features, then ESS.
fn point_values(
    ds: &Dataset,
    pc: &PipelineConfig,
    features: &[FeatureSpec],
) -> CmdResult<Vec<f64>> {
    let w = compute_weights(ds, pc).map_err(err)?;
    let mut out = Vec::new();
    for f in features {
        out.extend(estimate_feature(f, &w.weights, ds).map_err(err)?.values);
    }
    out.push(w.composite_ess);
    Ok(out)
}

pub fn estimate(args: EstimateArgs) -> CmdResult {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let feature_texts = if args.feature.is_empty() {
        file_features(&file.feature).unwrap_or_default()
    } else {
        args.feature
    };
    let by = args.by.or_else(|| file.by.clone());
    let stratified = args.stratified || file.stratified.unwrap_or(false);
    let refit = !(args.fixed_model || file.fixed_model.unwrap_or(false));
    let common = merge_common(args.common, &file);
    let data = merge_data(args.data, &file)?;
    report_threads(common.threads)?;
    if feature_texts.is_empty() {
        return Err("at least one --feature is required".into());
    }
    let methods = parse_methods(&common.methods, &[Method::Translate])?;
    let model = parse_model(common.model.as_deref(), ModelConfig::logistic())?;
    let alignment = alignment_config(data.cap_quantile);
    let out = common.out.clone().ok_or("missing required option --out")?;
    if common.bootstrap == 1 {
        return Err("--bootstrap must be 0 or at least 2".into());
    }

    let (ds, _) = load(&data)?;
    let base = expand_features(&feature_texts, &ds)?;

    // Per-level copies of every unrestricted feature.
    let mut features = base.clone();
    let mut contrasts: Vec<(usize, usize, usize, String)> = Vec::new();
    if let Some(cov) = &by {
        let levels = ds.levels_of(cov).map_err(err)?;
        for (bi, f) in base
            .iter()
            .enumerate()
            .filter(|(_, f)| f.subgroup.is_none())
        {
            if matches!(
                f.kind,
                FeatureKind::SubgroupMean { .. } | FeatureKind::SubgroupDifference { .. }
            ) {
                continue;
            }
            let first = features.len();
            for l in &levels {
                features.push(f.clone().within(cov, l));
            }
            for (k, l) in levels.iter().enumerate().skip(1) {
                contrasts.push((
                    first + k,
                    first,
                    bi,
                    format!("{cov}={l} - {cov}={}", levels[0]),
                ));
            }
        }
    }
    let value_names: Vec<Vec<String>> = features
        .iter()
        .map(|f| feature_value_names(f, &ds))
        .collect();
    let offsets: Vec<usize> = value_names
        .iter()
        .scan(0, |acc, v| {
            let o = *acc;
            *acc += v.len();
            Some(o)
        })
        .collect();
    let width: usize = value_names.iter().map(Vec::len).sum::<usize>() + 1;
    let is_difference = |f: &FeatureSpec| matches!(f.kind, FeatureKind::SubgroupDifference { .. });

    let configs: Vec<PipelineConfig> = methods
        .iter()
        .map(|&m| PipelineConfig {
            method: m,
            model: model.clone(),
            alignment: alignment.clone(),
        })
        .collect();

    let mut rows: Vec<EstimateRow> = Vec::new();
    let mut warnings = Vec::new();
    let boot = if common.bootstrap >= 2 {
        let cfg = boot_config(&common, stratified, refit);
        Some(bootstrap_pipeline(&ds, &configs, &features, &cfg).map_err(err)?)
    } else {
        None
    };

    for (mi, pc) in configs.iter().enumerate() {
        let m = pc.method;
        let base_q = mi * width;
        match &boot {
            Some(b) => {
                warnings.extend(b.warnings.iter().cloned());
                for (fi, f) in features.iter().enumerate() {
                    for (k, name) in value_names[fi].iter().enumerate() {
                        let r = &b.results[base_q + offsets[fi] + k];
                        rows.push(EstimateRow::from_boot(name.clone(), m, r, is_difference(f)));
                    }
                }
                for (a, z, bi, label) in &contrasts {
                    for (k, base_name) in value_names[*bi].iter().enumerate() {
                        let ra = &b.results[base_q + offsets[*a] + k];
                        let rz = &b.results[base_q + offsets[*z] + k];
                        let d = paired_difference(ra, rz).map_err(err)?;
                        let name = format!("{base_name} [{label}]");
                        rows.push(EstimateRow::from_boot(name, m, &d, true));
                    }
                }
                rows.push(EstimateRow::from_boot(
                    "ess".into(),
                    m,
                    &b.results[base_q + width - 1],
                    false,
                ));
            }
            None => {
                let v = point_values(&ds, pc, &features)?;
                for (fi, _) in features.iter().enumerate() {
                    for (k, name) in value_names[fi].iter().enumerate() {
                        rows.push(EstimateRow::point(name.clone(), m, v[offsets[fi] + k]));
                    }
                }
                for (a, z, bi, label) in &contrasts {
                    for (k, base_name) in value_names[*bi].iter().enumerate() {
                        let name = format!("{base_name} [{label}]");
                        rows.push(EstimateRow::point(
                            name,
                            m,
                            v[offsets[*a] + k] - v[offsets[*z] + k],
                        ));
                    }
                }
                rows.push(EstimateRow::point("ess".into(), m, v[width - 1]));
            }
        }
    }
    // Composite ESS of the alignment method against every other method.
    if let (Some(b), Some(ti)) = (&boot, methods.iter().position(|&m| m == Method::Translate)) {
        for (mi, &m) in methods.iter().enumerate() {
            if mi == ti {
                continue;
            }
            let d = paired_difference(
                &b.results[ti * width + width - 1],
                &b.results[mi * width + width - 1],
            )
            .map_err(err)?;
            rows.push(EstimateRow::from_boot(
                format!("ess - {m}:ess"),
                Method::Translate,
                &d,
                true,
            ));
        }
    }
    warnings.sort();
    warnings.dedup();

    let run = EstimateRun {
        command: "estimate",
        data: &data,
        methods: &methods,
        model: &model,
        alignment: &alignment,
        features: &feature_texts,
        by: &by,
        bootstrap: common.bootstrap,
        seed: common.seed,
        alpha: common.alpha,
        stratified,
        refit,
    };
    let header = [
        "feature",
        "method",
        "estimate",
        "se",
        "ci_low",
        "ci_high",
        "significant",
    ];
    let opt = |v: Option<f64>, f: &dyn Fn(f64) -> String| v.map(f).unwrap_or_else(|| "NA".into());
    let render = |f: &dyn Fn(f64) -> String| -> Vec<Vec<String>> {
        std::iter::once(header.iter().map(|s| s.to_string()).collect())
            .chain(rows.iter().map(|r| {
                vec![
                    r.feature.clone(),
                    r.method.to_string(),
                    f(r.estimate),
                    opt(r.se, f),
                    opt(r.ci_low, f),
                    opt(r.ci_high, f),
                    r.significant
                        .map(|s| s.to_string())
                        .unwrap_or_else(|| "NA".into()),
                ]
            }))
            .collect()
    };
    let full = |v: f64| format!("{v:?}");
    let short = |v: f64| sig(v, common.precision);

    let mut table = config_header(&run);
    table.push_str(&delimited(&render(&full), common.delimiter));
    let (config_json, config_hash) = crate::output::config_fingerprint(&run);
    let json = serde_json::json!({
        "config_sha256": config_hash,
        "config": serde_json::from_str::<serde_json::Value>(&config_json).map_err(err)?,
        "dataset": ds.summary(),
        "rows": rows,
        "warnings": warnings,
        "redraws": boot.as_ref().map(|b| b.redraws),
    });
    let json_path: PathBuf = with_suffix(&out, ".json");
    let mut outputs = Outputs::default();
    outputs.add(out.clone(), table);
    outputs.add(
        json_path.clone(),
        serde_json::to_string_pretty(&json).map_err(err)? + "\n",
    );
    outputs.commit()?;

    print!("{}", aligned(&render(&short)));
    println!(
        "seed {}  bootstrap {}  alpha {}",
        common.seed, common.bootstrap, common.alpha
    );
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    println!("wrote {} and {}", out.display(), json_path.display());
    Ok(())
}

#[derive(Serialize)]
struct SimulateRun<'a> {
    command: &'static str,
    study: &'a StudyConfig,
    preset: &'a str,
    mc_size: usize,
}

pub fn simulate(args: SimulateArgs) -> CmdResult {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let scenarios = args
        .scenario
        .or_else(|| file_list(&file.scenario))
        .unwrap_or_else(|| vec!["dissimilar_y".into(), "dissimilar_xy".into()]);
    let sizes = args
        .n
        .or_else(|| file.n.clone())
        .unwrap_or_else(|| vec![5000]);
    let replicates = args.replicates.or(file.replicates).unwrap_or(100);
    let preset = args
        .preset
        .or_else(|| file.preset.clone())
        .unwrap_or_else(|| "default".into());
    let mc_size = args.mc_size.or(file.mc_size).unwrap_or(1_000_000);
    let common = merge_common(args.common, &file);
    report_threads(common.threads)?;
    let methods = parse_methods(
        &common.methods,
        &[Method::Naive, Method::Importance, Method::Translate],
    )?;
    let model = parse_model(common.model.as_deref(), ModelConfig::qda())?;
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("simulation"));

    let mut cfgs = Vec::new();
    for s in &scenarios {
        for &n in &sizes {
            let mut c = ScenarioConfig::by_name(s, n).map_err(err)?;
            c = match preset.as_str() {
                "default" => c,
                "calibrated" => c.calibrated(),
                other => {
                    return Err(format!(
                        "unknown preset '{other}' (expected default or calibrated)"
                    ))
                }
            };
            if sizes.len() > 1 {
                c.name = format!("{}_n{n}", c.name);
            }
            cfgs.push(c);
        }
    }
    let mut study = StudyConfig::new(cfgs, replicates, common.seed);
    study.methods = methods;
    study.model = model;

    let result = run_study(&study).map_err(err)?;
    let oracles = study
        .scenarios
        .iter()
        .map(|c| {
            oracle_truths(c, mc_size, common.seed)
                .map(|o| serde_json::json!({"scenario": c.name, "oracle": o}))
                .map_err(err)
        })
        .collect::<CmdResult<Vec<_>>>()?;

    let run = SimulateRun {
        command: "simulate",
        study: &study,
        preset: &preset,
        mc_size,
    };
    let (config_json, config_hash) = crate::output::config_fingerprint(&run);
    let config_value: serde_json::Value = serde_json::from_str(&config_json).map_err(err)?;
    let mut table = config_header(&run);
    table.push_str(
        &result.render_table(common.delimiter, common.precision.saturating_sub(1).max(1)),
    );
    let json = serde_json::json!({
        "config_sha256": config_hash,
        "config": config_value,
        "cells": result.cells,
        "ess": result.ess,
        "failures": result.failures,
        "records": result.records,
    });
    let oracle_json = serde_json::json!({
        "config_sha256": config_hash,
        "config": config_value,
        "truths": oracles,
    });
    let table_path = with_suffix(&out, ".table.txt");
    let json_path = with_suffix(&out, ".json");
    let oracle_path = with_suffix(&out, ".oracle.json");
    let mut outputs = Outputs::default();
    outputs.add(table_path.clone(), table);
    outputs.add(
        json_path.clone(),
        serde_json::to_string_pretty(&json).map_err(err)? + "\n",
    );
    outputs.add(
        oracle_path.clone(),
        serde_json::to_string_pretty(&oracle_json).map_err(err)? + "\n",
    );
    outputs.commit()?;

    println!(
        "seed {}  replicates {replicates}  preset {preset}",
        common.seed
    );
    print!(
        "{}",
        result.render_table('\t', common.precision.saturating_sub(1).max(1))
    );
    for f in &result.failures {
        if f.failed > 0 {
            eprintln!(
                "warning: scenario {} excluded {} failed replicates",
                f.scenario, f.failed
            );
        }
    }
    for o in &oracles {
        if o["oracle"]["agree"] == serde_json::Value::Bool(false) {
            eprintln!(
                "warning: closed-form and Monte Carlo truths disagree for {}",
                o["scenario"]
            );
        }
    }
    println!(
        "wrote {}, {} and {}",
        table_path.display(),
        json_path.display(),
        oracle_path.display()
    );
    Ok(())
}
