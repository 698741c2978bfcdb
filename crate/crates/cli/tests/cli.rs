use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use genmetric::classify::{KnnClassifier, KnnConfig, Predictor, TieRule};
use genmetric::dataset::{load_csv, CsvOptions, ScaleParams};
use genmetric::generative::{fit_gaussian_models, DEFAULT_LAMBDA_COV};
use genmetric::global_metric::uniform_combination;
use genmetric::local_metric::{compute_all_local_metrics, DEFAULT_EPS_REL};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_genmetric"));
    c.env_remove("GENMETRIC_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn iris() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/data/iris.csv")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, body).unwrap();
    p
}

fn iris_config(methods: &str, repeats: usize) -> String {
    format!(
        r#"{{"version": 1, "dataset": {{"csv": {{"path": "{}"}}}}, "preprocess": {{"scale": true}}, "methods": {methods}, "split": {{"n_repeats": {repeats}, "base_seed": 7}}}}"#,
        iris().display()
    )
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn without_timings(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("timings");
    v
}

fn benchmark(cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["benchmark", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn minimal_config_writes_one_method() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &iris_config(r#"["euclidean"]"#, 1));
    let out = tmp.path().join("out");
    let o = benchmark(&cfg, &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    assert_eq!(r["methods"].as_array().unwrap().len(), 1);
    assert!(out.join("report.csv").exists());
    assert!(out.join("table.txt").exists());
}

#[test]
fn reruns_and_thread_counts_give_identical_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &iris_config(r#"["euclidean", "m_uni", "m_kde", "cluster_uni"]"#, 3));
    let outs: Vec<PathBuf> = (0..3).map(|i| tmp.path().join(format!("out{i}"))).collect();
    assert!(benchmark(&cfg, &outs[0], &["--threads", "1"]).status.success());
    assert!(benchmark(&cfg, &outs[1], &["--threads", "1"]).status.success());
    assert!(benchmark(&cfg, &outs[2], &["--threads", "3"]).status.success());
    let strip = |v: Value| {
        let mut v = without_timings(v);
        v["config"].as_object_mut().unwrap().remove("output_dir");
        v
    };
    let base = strip(report(&outs[0]));
    assert_eq!(base, strip(report(&outs[1])));
    assert_eq!(base, strip(report(&outs[2])));
    assert_eq!(
        std::fs::read(outs[0].join("report.csv")).unwrap(),
        std::fs::read(outs[2].join("report.csv")).unwrap()
    );
}

#[test]
fn thirty_split_iris_table_and_stderr() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &iris_config(r#"["euclidean", "m_uni"]"#, 30));
    let out = tmp.path().join("out");
    let o = benchmark(&cfg, &out, &[]);
    assert!(o.status.success());
    let r = report(&out);
    for m in r["methods"].as_array().unwrap() {
        let vals: Vec<f64> = m["per_split"].as_array().unwrap().iter().map(|s| s["value"].as_f64().unwrap()).collect();
        assert_eq!(vals.len(), 30);
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((m["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
        assert!((m["std_err"].as_f64().unwrap() - sd / n.sqrt()).abs() < 1e-12);
    }
    let table = std::fs::read_to_string(out.join("table.txt")).unwrap();
    for name in ["euclidean", "m_uni"] {
        let line = table.lines().find(|l| l.starts_with(name)).unwrap();
        let cell = line.split("error %").nth(1).unwrap().trim();
        let (a, b) = cell.split_once(" ± ").unwrap();
        for part in [a, b] {
            assert_eq!(part.split_once('.').unwrap().1.len(), 2, "{cell}");
            part.parse::<f64>().unwrap();
        }
    }
}

#[test]
fn fit_metric_then_classify_matches_in_process() {
    let tmp = tempfile::tempdir().unwrap();
    let metric = tmp.path().join("metric.json");
    let preds = tmp.path().join("pred.csv");
    let data = iris();
    let o = run(&["fit-metric", "--data", data.to_str().unwrap(), "--scale", "--out", metric.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&[
        "classify",
        "--metric",
        metric.to_str().unwrap(),
        "--train",
        data.to_str().unwrap(),
        "--k",
        "5",
        "--out",
        preds.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let ds = load_csv(&data, &CsvOptions::default()).unwrap();
    let scaled = ScaleParams::fit(ds.features()).apply(&ds).unwrap();
    let ms = fit_gaussian_models(&scaled, DEFAULT_LAMBDA_COV).unwrap();
    let locals = compute_all_local_metrics(&scaled, &ms, DEFAULT_EPS_REL).unwrap();
    let uni = uniform_combination(&locals).unwrap();
    let clf = KnnClassifier::new(
        &scaled,
        &KnnConfig {
            k: 5,
            metric: uni.clone(),
            tie_rule: TieRule::default(),
        },
    )
    .unwrap();
    let expect: Vec<String> = clf
        .predict_batch(scaled.features())
        .into_iter()
        .map(|p| scaled.class_values()[p].clone())
        .collect();

    let saved: Value = serde_json::from_str(&std::fs::read_to_string(&metric).unwrap()).unwrap();
    let rows = saved["metric"]["matrix"].as_array().unwrap();
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.as_array().unwrap().iter().enumerate() {
            assert_eq!(v.as_f64().unwrap(), uni.matrix()[(i, j)]);
        }
    }
    let mut rdr = csv::Reader::from_path(&preds).unwrap();
    let got: Vec<String> = rdr.records().map(|r| r.unwrap()[1].to_string()).collect();
    assert_eq!(got, expect);
}

#[test]
fn embed_three_points_on_a_line() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("line.csv");
    std::fs::write(&data, "x,label\n0,0\n1,0\n2,1\n").unwrap();
    let out = tmp.path().join("coords.csv");
    let o = run(&[
        "embed",
        "--data",
        data.to_str().unwrap(),
        "--neighbors",
        "2",
        "--dim",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(&out).unwrap();
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), ["id", "x1", "label"]);
    let coords: Vec<f64> = rdr.records().map(|r| r.unwrap()[1].parse().unwrap()).collect();
    assert_eq!(coords.len(), 3);
    let mut d = vec![
        (coords[0] - coords[1]).abs(),
        (coords[1] - coords[2]).abs(),
        (coords[0] - coords[2]).abs(),
    ];
    d.sort_by(f64::total_cmp);
    for (got, want) in d.iter().zip([1.0, 1.0, 2.0]) {
        assert!((got - want).abs() < 1e-9, "{d:?}");
    }
}

#[test]
fn rank_averages_over_datasets() {
    let tmp = tempfile::tempdir().unwrap();
    let mk = |name: &str, a: f64, b: f64| {
        let p = tmp.path().join(format!("{name}.json"));
        let body = format!(
            r#"{{"dataset": {{"name": "{name}"}}, "methods": [{{"name": "B", "measure": "error", "mean": {b}}}, {{"name": "A", "measure": "error", "mean": {a}}}]}}"#
        );
        std::fs::write(&p, body).unwrap();
        p
    };
    let r1 = mk("one", 0.05, 0.08);
    let r2 = mk("two", 0.10, 0.12);
    let out = tmp.path().join("rank.json");
    let o = run(&["rank", r1.to_str().unwrap(), r2.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let rank_of = |m: &str| {
        table["ranks"]
            .as_array()
            .unwrap()
            .iter()
            .find(|r| r["method"] == m)
            .unwrap()["average_rank"]
            .as_f64()
            .unwrap()
    };
    assert_eq!(rank_of("A"), 1.0);
    assert_eq!(rank_of("B"), 2.0);
}

#[test]
fn invalid_configs_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cases = [
        iris_config(r#"["euclidean"]"#, 0),
        iris_config(r#"["lmnn"]"#, 1),
        iris_config(r#"["euclidean"]"#, 1).replacen("\"version\": 1", "\"version\": 1, \"colour\": 3", 1),
        r#"{"version": 1, "dataset": {"csv": {"path": "missing.csv"}}, "methods": ["euclidean"]}"#.to_string(),
    ];
    for body in cases {
        let cfg = write_config(tmp.path(), &body);
        let o = benchmark(&cfg, &out, &[]);
        assert_eq!(o.status.code(), Some(2), "{body}");
    }
}

#[test]
fn all_methods_failing_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &iris_config(r#"[{"mkl_metric": {"regions": 1000}}]"#, 2));
    let out = tmp.path().join("out");
    let o = benchmark(&cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(1));
    let r = report(&out);
    assert_eq!(r["methods"][0]["failures"], 2);
    assert!(r["methods"][0]["mean"].is_null());
}

#[test]
fn cluster_writes_assignments() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("clusters.csv");
    let data = iris();
    let o = run(&["cluster", "--data", data.to_str().unwrap(), "--scale", "--seed", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(&out).unwrap();
    let labels: Vec<usize> = rdr.records().map(|r| r.unwrap()[5].parse().unwrap()).collect();
    assert_eq!(labels.len(), 150);
    assert!(labels.iter().all(|&l| l < 3));
}
