use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use anchorweight::rng::stream_rng;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_anchorweight"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Data rows of a tabular output, skipping `#` lines and the header.
fn rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    let body: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    csv::Reader::from_reader(body.as_bytes())
        .records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}

/// Three sites drawn from one population; `sex` is unrelated to everything.
fn write_exchangeable(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let mut rng = stream_rng(seed, 0);
    let mut text = String::from("site,age,sex,y1,y2,y3,y4\n");
    for i in 0..n {
        let site = ["A", "B", "C"][i % 3];
        let sex = if rng.random::<bool>() { "F" } else { "M" };
        let age: f64 = 50.0 + 10.0 * normal(&mut rng);
        let z: Vec<f64> = (0..4).map(|_| normal(&mut rng)).collect();
        let y1 = 0.02 * age + z[0];
        text.push_str(&format!(
            "{site},{age},{sex},{y1},{},{},{}\n",
            y1 + z[1],
            z[2],
            0.5 * z[2] + z[3]
        ));
    }
    let p = dir.join("exchangeable.csv");
    fs::write(&p, text).unwrap();
    p
}

/// Anchor `0` and one external cohort shifted in the covariate and outcome.
fn write_shifted(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let mut rng = stream_rng(seed, 0);
    let mut text = String::from("cohort,x,y\n");
    for i in 0..n {
        let s = usize::from(i % 5 != 0);
        let x = 0.5 * s as f64 + normal(&mut rng);
        let y = x + 0.7 * s as f64 + normal(&mut rng);
        text.push_str(&format!("{s},{x},{y}\n"));
    }
    let p = dir.join("shifted.csv");
    fs::write(&p, text).unwrap();
    p
}

fn report(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn exchangeable_cohorts_get_flat_weights() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_exchangeable(dir.path(), 3000, 1);
    let out = dir.path().join("w.csv");
    ok(&[
        "weights",
        "--input",
        s(&data),
        "--label-col",
        "site",
        "--anchor",
        "A",
        "--covariates",
        "age,sex",
        "--categorical",
        "sex",
        "--outcomes",
        "y1,y2",
        "--out",
        s(&out),
    ]);
    let w: Vec<f64> = rows(&out).iter().map(|r| r[2].parse().unwrap()).collect();
    assert_eq!(w.len(), 3000);
    let mean_dev = w.iter().map(|v| (v - 1.0).abs()).sum::<f64>() / w.len() as f64;
    assert!(mean_dev < 0.1, "mean |w - 1| {mean_dev}");
    let r = report(&dir.path().join("w.csv.ess.json"));
    let ess = r["composite_ess"].as_f64().unwrap();
    assert!(ess > 0.95 * 3000.0, "ess {ess}");
}

#[test]
fn shifted_cohort_ess_beats_anchor_and_gamma_sums_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_shifted(dir.path(), 4000, 2);
    let out = dir.path().join("w.csv");
    let stdout = ok(&[
        "weights",
        "--input",
        s(&data),
        "--label-col",
        "cohort",
        "--covariates",
        "x",
        "--outcomes",
        "y",
        "--out",
        s(&out),
        "--seed",
        "5",
    ]);
    assert!(stdout.contains("composite ESS"));
    let r = report(&dir.path().join("w.csv.ess.json"));
    let ess = r["composite_ess"].as_f64().unwrap();
    assert!(ess > 800.0, "ess {ess} vs N0 = 800");
    let gamma: f64 = r["alignment"]["cohorts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["gamma"].as_f64().unwrap())
        .sum();
    assert!((gamma - 1.0).abs() < 1e-12);
    let header = fs::read_to_string(&out).unwrap();
    assert!(header.starts_with("# config_sha256: "));
}

#[test]
fn missing_label_column_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_shifted(dir.path(), 100, 3);
    let out = dir.path().join("w.csv");
    let o = run(&[
        "weights",
        "--input",
        s(&data),
        "--label-col",
        "nope",
        "--covariates",
        "x",
        "--outcomes",
        "y",
        "--out",
        s(&out),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));
    assert!(!out.exists());
    assert!(!dir.path().join("w.csv.ess.json").exists());
}

#[test]
fn mean_and_subgroup_means_for_every_method() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_exchangeable(dir.path(), 900, 4);
    let out = dir.path().join("e.csv");
    ok(&[
        "estimate",
        "--input",
        s(&data),
        "--label-col",
        "site",
        "--anchor",
        "A",
        "--covariates",
        "age,sex",
        "--categorical",
        "sex",
        "--outcomes",
        "y1,y2",
        "--method",
        "translate,naive,anchor_only",
        "--feature",
        "mean:y1",
        "--feature",
        "mean:y1|sex=F",
        "--feature",
        "mean:y1|sex=M",
        "--out",
        s(&out),
    ]);
    let r = rows(&out);
    for m in ["translate", "naive", "anchor_only"] {
        let n = r
            .iter()
            .filter(|row| row[1] == m && row[0] != "ess")
            .count();
        assert_eq!(n, 3, "{m}");
    }
    assert!(dir.path().join("e.csv.json").exists());
}

#[test]
fn tiny_bootstrap_reports_finite_uncertainty() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_shifted(dir.path(), 600, 5);
    let out = dir.path().join("e.csv");
    ok(&[
        "estimate",
        "--input",
        s(&data),
        "--label-col",
        "cohort",
        "--covariates",
        "x",
        "--outcomes",
        "y",
        "--feature",
        "mean:y",
        "--feature",
        "sd:y",
        "--bootstrap",
        "2",
        "--out",
        s(&out),
    ]);
    for row in rows(&out) {
        for v in &row[2..6] {
            assert!(v.parse::<f64>().unwrap().is_finite(), "{row:?}");
        }
    }
}

#[test]
fn correlations_by_subgroup_with_differences() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_exchangeable(dir.path(), 1200, 6);
    let out = dir.path().join("e.csv");
    ok(&[
        "estimate",
        "--input",
        s(&data),
        "--label-col",
        "site",
        "--anchor",
        "A",
        "--covariates",
        "age,sex",
        "--categorical",
        "sex",
        "--outcomes",
        "y1,y2,y3,y4",
        "--feature",
        "cor:*",
        "--by",
        "sex",
        "--bootstrap",
        "20",
        "--out",
        s(&out),
    ]);
    let r = rows(&out);
    let diffs: Vec<_> = r.iter().filter(|row| row[0].contains(" - ")).collect();
    let within: Vec<_> = r
        .iter()
        .filter(|row| row[0].contains("sex=") && !row[0].contains(" - "))
        .collect();
    assert_eq!(within.len(), 12, "{r:?}");
    assert_eq!(diffs.len(), 6);
    assert!(diffs
        .iter()
        .all(|row| row[6] == "true" || row[6] == "false"));
}

#[test]
fn simulation_is_finite_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let go = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "simulate",
            "--replicates",
            "10",
            "--n",
            "1000",
            "--mc-size",
            "20000",
            "--seed",
            "9",
            "--out",
            s(&out),
        ]);
        out
    };
    let a = go("a");
    let b = go("b");
    let table = fs::read_to_string(dir.path().join("a.table.txt")).unwrap();
    assert!(!table.contains("NaN") && !table.contains("inf"));
    for suffix in [".table.txt", ".json", ".oracle.json"] {
        let read = |p: &Path| fs::read(format!("{}{suffix}", p.display())).unwrap();
        assert_eq!(read(&a), read(&b), "{suffix}");
    }
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_shifted(dir.path(), 500, 7);
    let cfg = dir.path().join("run.toml");
    let out = dir.path().join("e.csv");
    fs::write(
        &cfg,
        format!(
            "input = {:?}\nlabel_col = \"cohort\"\ncovariates = \"x\"\noutcomes = [\"y\"]\n\
             feature = \"mean:y\"\nmethod = \"naive\"\nseed = 3\nout = {:?}\n",
            s(&data),
            s(&out)
        ),
    )
    .unwrap();
    ok(&["estimate", "--config", s(&cfg), "--method", "anchor_only"]);
    let r = rows(&out);
    assert!(r.iter().all(|row| row[1] == "anchor_only"));
    let header = fs::read_to_string(&out).unwrap();
    assert!(header.contains("\"seed\":3"));

    fs::write(dir.path().join("bad.toml"), "bootstrapp = 5\n").unwrap();
    let o = run(&["estimate", "--config", s(&dir.path().join("bad.toml"))]);
    assert!(!o.status.success());
}

#[test]
fn wide_multi_cohort_shape() {
    let (n, j, p, l) = (6966, 3, 46, 4);
    let dir = tempfile::tempdir().unwrap();
    let mut rng = stream_rng(10, 0);
    let mut text = String::from("cohort");
    for k in 0..p {
        text.push_str(&format!(",x{k}"));
    }
    for k in 0..l {
        text.push_str(&format!(",y{k}"));
    }
    text.push('\n');
    for _ in 0..n {
        let c = rng.random_range(0..j);
        text.push_str(&format!("c{c}"));
        let mut sum = 0.0;
        for k in 0..p {
            let v = normal(&mut rng);
            let v = v + if k < 3 { 0.2 * c as f64 } else { 0.0 };
            sum += v;
            text.push_str(&format!(",{v}"));
        }
        for _ in 0..l {
            let e = normal(&mut rng);
            text.push_str(&format!(",{}", 0.1 * sum + e));
        }
        text.push('\n');
    }
    let data = dir.path().join("wide.csv");
    fs::write(&data, text).unwrap();
    let covs: Vec<String> = (0..p).map(|k| format!("x{k}")).collect();
    let outs: Vec<String> = (0..l).map(|k| format!("y{k}")).collect();
    let out = dir.path().join("w.csv");
    ok(&[
        "weights",
        "--input",
        s(&data),
        "--label-col",
        "cohort",
        "--anchor",
        "c0",
        "--covariates",
        &covs.join(","),
        "--outcomes",
        &outs.join(","),
        "--out",
        s(&out),
    ]);
    assert_eq!(rows(&out).len(), n);
    let r = report(&dir.path().join("w.csv.ess.json"));
    assert_eq!(r["alignment"]["cohorts"].as_array().unwrap().len(), j);
    let ess = r["composite_ess"].as_f64().unwrap();
    assert!(ess > 0.0 && ess <= n as f64);
}
