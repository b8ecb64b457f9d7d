use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mlnet::evaluate::{replicate_summary, MetricReport};
use mlnet::inference::VariationalPosterior;
use mlnet::io::{fit_from_json, fit_to_json, read_json, SeriesMeta, TruthDoc};
use mlnet::model::{check_stationarity, sigmoid};
use mlnet::{FitResult, Mat};
use serde_json::Value;

fn mlnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlnet"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    o
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap()
}

/// CSV body without the `#` preamble.
fn csv_body(p: &Path) -> Vec<String> {
    read(p)
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_owned)
        .collect()
}

fn small_sim(dir: &Path, out: &str, extra: &[&str]) {
    let mut args = vec![
        "simulate",
        "--setting",
        "1",
        "--n",
        "5",
        "--t",
        "6",
        "--seed",
        "3",
        "--out",
        out,
    ];
    args.extend_from_slice(extra);
    ok(mlnet(dir, &args));
}

const QUICK: [&str; 4] = ["--max-em-iters", "8", "--em-rel-tol", "1e-3"];

#[test]
fn simulate_preset_dimensions_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(mlnet(
        d,
        &[
            "simulate",
            "--mechanism",
            "tssdmn",
            "--setting",
            "1",
            "--variant",
            "0",
            "--seed",
            "7",
            "--out",
            "a",
        ],
    ));
    let meta: SeriesMeta = read_json(&d.join("a/observations.json")).unwrap();
    assert_eq!((meta.n, meta.k, meta.t), (10, 2, 30));
    let manifest: Value = read_json(&d.join("a/manifest.json")).unwrap();
    assert_eq!(manifest["format_version"], 1);
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["sim_config"]["n"], 10);

    let files = [
        "observations.csv",
        "observations.json",
        "truth.json",
        "manifest.json",
    ];
    let first: Vec<Vec<u8>> = files
        .iter()
        .map(|f| fs::read(d.join("a").join(f)).unwrap())
        .collect();
    ok(mlnet(
        d,
        &[
            "simulate",
            "--mechanism",
            "tssdmn",
            "--setting",
            "1",
            "--variant",
            "0",
            "--seed",
            "7",
            "--out",
            "a",
        ],
    ));
    for (f, bytes) in files.iter().zip(first) {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), bytes, "{f}");
    }
    let bad = mlnet(d, &["simulate", "--mechanism", "nope"]);
    assert_eq!(code(&bad), 1);
    assert!(stderr(&bad).contains("mechanism"));
}

#[test]
fn simulate_replicates_get_derived_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_sim(d, "s", &["--replicates", "3", "--holdout", "1"]);
    let seeds: Vec<u64> = (0..3)
        .map(|r| {
            read_json::<Value>(&d.join(format!("s/rep-{r:03}/manifest.json"))).unwrap()["seed"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert!(seeds[0] != seeds[1] && seeds[1] != seeds[2]);
    let hold: SeriesMeta = read_json(&d.join("s/rep-001/holdout.json")).unwrap();
    assert_eq!(hold.t, 1);
    let truth: TruthDoc = read_json(&d.join("s/rep-001/truth.json")).unwrap();
    assert_eq!(truth.gamma.len(), 6);
}

#[test]
fn fit_outputs_and_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_sim(d, "s", &[]);
    let mut args = vec![
        "fit", "--data", "s", "--m", "3", "--seed", "1", "--out", "f1",
    ];
    args.extend_from_slice(&QUICK);
    let o = mlnet(d, &args);
    assert!(matches!(code(&o), 0 | 4), "{}", stderr(&o));
    assert!(stderr(&o).contains("AIC"));
    let fit: Value = read_json(&d.join("f1/fit.json")).unwrap();
    assert_eq!(fit["format_version"], 1);
    assert_eq!(fit["config"]["m"], 3);
    assert!(fit["aic"].as_f64().unwrap().is_finite());
    assert_eq!(csv_body(&d.join("f1/elbo.csv"))[0], "iteration,elbo");

    let first = read(&d.join("f1/fit.json"));
    mlnet(d, &args);
    assert_eq!(read(&d.join("f1/fit.json")), first);

    let capped = mlnet(
        d,
        &[
            "fit",
            "--data",
            "s",
            "--m",
            "2",
            "--max-em-iters",
            "1",
            "--out",
            "f3",
        ],
    );
    assert_eq!(code(&capped), 4);
    let done = mlnet(
        d,
        &[
            "fit",
            "--data",
            "s",
            "--m",
            "1",
            "--em-rel-tol",
            "0.5",
            "--em-patience",
            "1",
            "--out",
            "f4",
        ],
    );
    assert_eq!(code(&done), 0, "{}", stderr(&done));

    assert_eq!(code(&mlnet(d, &["fit", "--data", "s", "--m", "0"])), 1);
    assert_eq!(code(&mlnet(d, &["fit", "--m", "2"])), 1);
    assert_eq!(code(&mlnet(d, &["fit", "--data", "missing.csv"])), 2);
}

#[test]
fn malformed_input_reports_row() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("e.csv"), "t,i,j,k\n1,1,2,1\n1,9,1,1\n").unwrap();
    fs::write(
        d.join("e.json"),
        r#"{"format_version": 1, "n": 3, "K": 1, "T": 2}"#,
    )
    .unwrap();
    let o = mlnet(d, &["fit", "--data", "e.csv", "--m", "1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("row 2"), "{}", stderr(&o));
}

#[test]
fn config_file_with_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_sim(d, "s", &[]);
    fs::write(
        d.join("cfg.json"),
        r#"{"data": "s", "m": 2, "max_em_iters": 2, "out": "f"}"#,
    )
    .unwrap();
    mlnet(d, &["fit", "--config", "cfg.json", "--m", "1"]);
    let fit: Value = read_json(&d.join("f/fit.json")).unwrap();
    assert_eq!(fit["m"], 1);
    assert_eq!(fit["config"]["max_em_iters"], 2);
    fs::write(d.join("bad.json"), r#"{"nodes": 3}"#).unwrap();
    assert_eq!(code(&mlnet(d, &["fit", "--config", "bad.json"])), 1);
}

#[test]
fn select_dim_curve_format() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_sim(d, "s", &[]);
    let mut args = vec!["select-dim", "--data", "s", "--m-max", "1", "--out", "sel"];
    args.extend_from_slice(&QUICK);
    mlnet(d, &args);
    let rows = csv_body(&d.join("sel/aic.csv"));
    assert_eq!(rows[0], "m,aic");
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("1,"));
    let sel: Value = read_json(&d.join("sel/selection.json")).unwrap();
    assert_eq!(sel["best_m"], 1);

    let mut args = vec!["select-dim", "--data", "s", "--m-max", "3", "--out", "sel3"];
    args.extend_from_slice(&QUICK);
    mlnet(d, &args);
    assert_eq!(csv_body(&d.join("sel3/aic.csv")).len(), 4);
    let sel: Value = read_json(&d.join("sel3/selection.json")).unwrap();
    let best = sel["best_m"].as_u64().unwrap();
    let fit: Value = read_json(&d.join("sel3/fit.json")).unwrap();
    assert_eq!(fit["m"].as_u64().unwrap(), best);
}

/// A fit document whose parameters and posterior means are the generating ones.
fn oracle_fit(truth: &TruthDoc) -> FitResult {
    let t = truth.to_truth().unwrap();
    let params = t.model_params().unwrap().clone();
    let cores = t.latent.unwrap().cores;
    let horizon = cores.len() - 1;
    FitResult {
        stationarity: check_stationarity(&params).unwrap(),
        posterior: VariationalPosterior {
            means: cores,
            vars: vec![1e-6; horizon + 1],
        },
        elbo_trace: vec![],
        aic: 0.0,
        iterations: 0,
        converged: true,
        final_elbo: 0.0,
        observation_bound: 0.0,
        m: params.m(),
        stages: vec![],
        dynamics_skipped: false,
        params,
    }
}

#[test]
fn evaluate_oracle_and_without_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_sim(d, "s", &["--sigma2", "1e-12", "--omega2", "1e-12"]);
    let truth: TruthDoc = read_json(&d.join("s/truth.json")).unwrap();
    fs::create_dir_all(d.join("oracle")).unwrap();
    fs::write(
        d.join("oracle/fit.json"),
        fit_to_json(&oracle_fit(&truth), Value::Null).unwrap(),
    )
    .unwrap();

    ok(mlnet(
        d,
        &["evaluate", "--fit", "oracle", "--data", "s", "--out", "ev"],
    ));
    let m: Value = read_json(&d.join("ev/metrics.json")).unwrap();
    assert!(m["report"]["mse"]["mean"].as_f64().unwrap() < 0.1);
    assert!(m["report"]["mape"]["mean"].as_f64().unwrap() < 1e-12);

    fs::create_dir_all(d.join("bare")).unwrap();
    fs::copy(
        d.join("s/observations.csv"),
        d.join("bare/observations.csv"),
    )
    .unwrap();
    fs::copy(
        d.join("s/observations.json"),
        d.join("bare/observations.json"),
    )
    .unwrap();
    ok(mlnet(
        d,
        &[
            "evaluate", "--fit", "oracle", "--data", "bare", "--out", "ev2",
        ],
    ));
    let m: Value = read_json(&d.join("ev2/metrics.json")).unwrap();
    let report = m["report"].as_object().unwrap();
    assert!(
        report.contains_key("auc") && !report.contains_key("mse") && !report.contains_key("mape")
    );
    assert!(!m["notes"].as_array().unwrap().is_empty());
    let names: Vec<String> = csv_body(&d.join("ev2/metrics.csv"))
        .iter()
        .map(|l| l.split(',').next().unwrap().to_owned())
        .collect();
    assert!(!names.contains(&"mse".to_string()));
}

#[test]
fn evaluate_aggregates_replicates() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_sim(d, "s", &["--replicates", "3"]);
    let mut args = vec!["fit", "--data", "s", "--m", "2", "--out", "f"];
    args.extend_from_slice(&QUICK);
    mlnet(d, &args);
    ok(mlnet(
        d,
        &["evaluate", "--fit", "f", "--data", "s", "--out", "ev"],
    ));
    let m: Value = read_json(&d.join("ev/metrics.json")).unwrap();
    let reps: Vec<MetricReport> = m["replicates"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| serde_json::from_value(r["report"].clone()).unwrap())
        .collect();
    assert_eq!(reps.len(), 3);
    let summary: MetricReport = serde_json::from_value(m["report"].clone()).unwrap();
    assert_eq!(summary, replicate_summary(&reps).unwrap());
    assert_eq!(summary.replicates, 3);
    assert_eq!(
        csv_body(&d.join("ev/replicates.csv"))[0],
        "replicate,metric,value"
    );
}

#[test]
fn predict_with_holdout_and_zero_transitions() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_sim(d, "s", &["--holdout", "1"]);
    let mut args = vec!["fit", "--data", "s", "--m", "2", "--out", "f"];
    args.extend_from_slice(&QUICK);
    mlnet(d, &args);
    ok(mlnet(
        d,
        &["predict", "--fit", "f", "--holdout", "s", "--out", "p"],
    ));
    let p: Value = read_json(&d.join("p/prediction.json")).unwrap();
    let layers = p["per_layer_auc"].as_array().unwrap();
    assert_eq!(layers.len(), 2);
    assert!(layers
        .iter()
        .all(|a| (0.0..=1.0).contains(&a.as_f64().unwrap())));
    assert_eq!(csv_body(&d.join("p/prediction_auc.csv")).len(), 3);
    assert_eq!(p["step"], 7);

    let mut f = fit_from_json(&read(&d.join("f/fit.json"))).unwrap();
    f.params.a1 = Mat::zeros(2, 2);
    fs::create_dir_all(d.join("z")).unwrap();
    fs::write(d.join("z/fit.json"), fit_to_json(&f, Value::Null).unwrap()).unwrap();
    ok(mlnet(d, &["predict", "--fit", "z", "--out", "pz"]));
    let p: Value = read_json(&d.join("pz/prediction.json")).unwrap();
    let probs: Vec<f64> = serde_json::from_value(p["probabilities"]["data"].clone()).unwrap();
    let bias = mlnet::io::ArrayDoc::from_tensor(&f.params.b).data;
    for (got, b) in probs.iter().zip(bias) {
        assert!((got - sigmoid(b)).abs() < 1e-15);
    }
    assert_eq!(code(&mlnet(d, &["predict", "--fit", "nowhere"])), 2);
}

#[test]
fn ingest_normalizes_edge_lists() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("ev.csv"), "t,i,j,k\n2,1,3,2\n2,1,3,2\n1,2,2,1\n").unwrap();
    fs::write(
        d.join("ev.json"),
        r#"{"format_version": 1, "n": 3, "K": 2, "T": 2}"#,
    )
    .unwrap();
    ok(mlnet(d, &["ingest", "--edges", "ev.csv", "--out", "ing"]));
    assert_eq!(
        csv_body(&d.join("ing/observations.csv")),
        ["t,i,j,k", "1,2,2,1", "2,1,3,2"]
    );
    let meta: SeriesMeta = read_json(&d.join("ing/observations.json")).unwrap();
    assert_eq!((meta.n, meta.k, meta.t), (3, 2, 2));

    fs::write(d.join("bad.csv"), "t,i,j,k\n1,1,1,3\n").unwrap();
    let o = mlnet(
        d,
        &[
            "ingest", "--edges", "bad.csv", "--meta", "ev.json", "--out", "x",
        ],
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("row 1"));
}
