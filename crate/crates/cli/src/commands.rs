use std::fs;
use std::path::{Path, PathBuf};

use mlnet::evaluate::{
    align_factors, auc, mse, per_layer_auc, replicate_summary, Estimate, MetricReport, TieRule,
};
use mlnet::inference::{finish_selection, fit, predict_next, FitResult, Selection};
use mlnet::io::{
    csv_table, fit_from_json, fit_to_json, ingest_edges, ingest_edges_with, metric_rows, read_json,
    save_observations, sidecar_path, write_json, ArrayDoc, TruthDoc, FORMAT_VERSION, METRIC_HEADER,
};
use mlnet::model::log_odds;
use mlnet::simulate::{derive_seed, generate, GroundTruth, TruthParams};
use mlnet::{Error, ObservationSeries, Result, Tensor3};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::{
    tie_rule, EvaluateArgs, FitArgs, IngestArgs, PredictArgs, SelectArgs, SimulateArgs,
};

pub const OBSERVATIONS: &str = "observations.csv";
pub const HOLDOUT: &str = "holdout.csv";
pub const TRUTH: &str = "truth.json";
pub const FIT: &str = "fit.json";
const DEFAULT_OUT: &str = "mlnet-out";

/// How a command finished when it did not fail outright.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Done,
    NotConverged,
}

impl Status {
    fn worst(statuses: impl IntoIterator<Item = Status>) -> Status {
        if statuses.into_iter().any(|s| s == Status::NotConverged) {
            Status::NotConverged
        } else {
            Status::Done
        }
    }
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    v.as_ref()
        .ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

fn out_dir(out: &Option<PathBuf>) -> PathBuf {
    out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", p.display()),
        ))
    })
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", p.display()),
        ))
    })
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", p.display()),
        ))
    })
}

fn rep_label(r: usize) -> String {
    format!("rep-{r:03}")
}

/// Sorted `rep-*` subdirectories of `p`, if `p` is a directory that has any.
fn replicate_dirs(p: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !p.is_dir() {
        return Ok(Vec::new());
    }
    let mut reps = Vec::new();
    for entry in fs::read_dir(p)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with("rep-") && entry.path().is_dir() {
            reps.push((name, entry.path()));
        }
    }
    reps.sort();
    Ok(reps)
}

/// `p` itself, or `p/name` when `p` is a directory.
fn locate(p: &Path, name: &str) -> PathBuf {
    if p.is_dir() {
        p.join(name)
    } else {
        p.to_path_buf()
    }
}

/// One independent piece of work: where to read, where to write, which seed.
#[derive(Clone, Debug)]
struct Unit {
    label: Option<String>,
    input: PathBuf,
    out: PathBuf,
    seed: u64,
}

impl Unit {
    fn config(&self, base: &Value) -> Value {
        let mut c = base.clone();
        if let Value::Object(map) = &mut c {
            map.insert("seed".into(), self.seed.into());
            if let Some(l) = &self.label {
                map.insert("replicate".into(), l.clone().into());
            }
            map.insert("input".into(), self.input.display().to_string().into());
        }
        c
    }

    fn tag(&self) -> String {
        self.label
            .as_ref()
            .map(|l| format!("[{l}] "))
            .unwrap_or_default()
    }
}

/// Expands `--data`/`--replicates` into units. A directory of `rep-*`
/// directories yields one unit per replicate; otherwise `replicates > 1`
/// repeats the single input with derived seeds.
fn units(data: &Path, file: &str, out: &Path, seed: u64, replicates: usize) -> Result<Vec<Unit>> {
    if replicates == 0 {
        return Err(Error::Config("--replicates must be >= 1".into()));
    }
    let reps = replicate_dirs(data)?;
    if !reps.is_empty() {
        if replicates > 1 {
            return Err(Error::Config(format!(
                "{} already holds replicate directories; drop --replicates",
                data.display()
            )));
        }
        return Ok(reps
            .into_iter()
            .enumerate()
            .map(|(r, (label, dir))| Unit {
                out: out.join(&label),
                input: dir.join(file),
                label: Some(label),
                seed: derive_seed(seed, r as u64),
            })
            .collect());
    }
    let input = locate(data, file);
    if replicates == 1 {
        return Ok(vec![Unit {
            label: None,
            input,
            out: out.to_path_buf(),
            seed,
        }]);
    }
    Ok((0..replicates)
        .map(|r| Unit {
            label: Some(rep_label(r)),
            input: input.clone(),
            out: out.join(rep_label(r)),
            seed: derive_seed(seed, r as u64),
        })
        .collect())
}

fn collect<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

#[derive(Serialize)]
struct Manifest<'a> {
    format_version: u32,
    command: &'static str,
    seed: u64,
    config: &'a Value,
    sim_config: &'a mlnet::SimConfig,
    files: Vec<String>,
}

fn truncate_truth(mut truth: GroundTruth, t: usize) -> GroundTruth {
    truth.gamma.truncate(t);
    if let Some(z) = &mut truth.latent {
        z.cores.truncate(t + 1);
    }
    truth
}

pub fn simulate(args: &SimulateArgs, config: &Value) -> Result<Status> {
    let base = args.sim_config()?;
    let holdout = args.holdout.unwrap_or(0);
    let reps = args.replicates.unwrap_or(1);
    if reps == 0 {
        return Err(Error::Config("--replicates must be >= 1".into()));
    }
    let out = out_dir(&args.out);
    let results: Vec<Result<()>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let (dir, seed) = if reps == 1 {
                (out.clone(), base.seed)
            } else {
                (out.join(rep_label(r)), derive_seed(base.seed, r as u64))
            };
            create_dir(&dir)?;
            let cfg = base.clone().with_seed(seed);
            let mut gen = cfg.clone();
            gen.t += holdout;
            let (x, truth) = generate(&gen)?;
            let (train, rest) = x.split_at(cfg.t);
            let truth = truncate_truth(truth, cfg.t);
            let mut resolved = config.clone();
            if let Value::Object(map) = &mut resolved {
                map.insert("seed".into(), seed.into());
            }
            let cfg_json = json!({ "run": resolved, "sim_config": cfg });
            let mut files = vec![
                OBSERVATIONS.to_string(),
                "observations.json".into(),
                TRUTH.into(),
            ];
            save_observations(&train, &dir.join(OBSERVATIONS), cfg_json.clone())?;
            if holdout > 0 {
                save_observations(&rest, &dir.join(HOLDOUT), cfg_json.clone())?;
                files.extend([HOLDOUT.to_string(), "holdout.json".into()]);
            }
            write_json(&dir.join(TRUTH), &TruthDoc::new(&truth, cfg_json))?;
            files.push("manifest.json".into());
            let manifest = Manifest {
                format_version: FORMAT_VERSION,
                command: "simulate",
                seed,
                config: &resolved,
                sim_config: &cfg,
                files,
            };
            write_json(&dir.join("manifest.json"), &manifest)?;
            eprintln!(
                "{}: n = {}, K = {}, T = {}, {} edges, seed {seed}",
                dir.display(),
                cfg.n,
                cfg.k,
                cfg.t,
                train.edge_count()
            );
            Ok(())
        })
        .collect();
    collect(results)?;
    Ok(Status::Done)
}

fn write_fit_outputs(dir: &Path, f: &FitResult, config: &Value) -> Result<()> {
    write_text(&dir.join(FIT), &(fit_to_json(f, config.clone())? + "\n"))?;
    let rows: Vec<Vec<String>> = f
        .elbo_trace
        .iter()
        .enumerate()
        .map(|(i, v)| vec![(i + 1).to_string(), v.to_string()])
        .collect();
    write_text(
        &dir.join("elbo.csv"),
        &csv_table(config, &["iteration", "elbo"], &rows)?,
    )?;
    if !f.stages.is_empty() {
        let rows: Vec<Vec<String>> = f
            .stages
            .iter()
            .map(|s| {
                let stage = serde_json::to_value(s.stage)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_owned))
                    .unwrap_or_default();
                vec![s.iteration.to_string(), stage, s.elbo.to_string()]
            })
            .collect();
        write_text(
            &dir.join("stages.csv"),
            &csv_table(config, &["iteration", "stage", "elbo"], &rows)?,
        )?;
    }
    Ok(())
}

fn report_fit(tag: &str, f: &FitResult) {
    eprintln!(
        "{tag}m = {}: {} EM iterations{}, ELBO {:.6}, AIC {:.3}",
        f.m,
        f.iterations,
        if f.converged {
            ""
        } else {
            " (iteration cap reached)"
        },
        f.final_elbo,
        f.aic
    );
    if let Some(w) = f.stationarity_warning() {
        eprintln!("{tag}warning: {w}");
    }
}

fn load_series(path: &Path) -> Result<ObservationSeries> {
    ingest_edges(path)
}

pub fn fit_cmd(args: &FitArgs, config: &Value) -> Result<Status> {
    let data = required(&args.data, "data")?;
    let m = args.m.unwrap_or(mlnet::simulate::PRESET_DEFAULT_M);
    args.opt.fit_options(m, 0)?;
    let units = units(
        data,
        OBSERVATIONS,
        &out_dir(&args.out),
        args.seed.unwrap_or(0),
        args.replicates.unwrap_or(1),
    )?;
    let results: Vec<Result<Status>> = units
        .par_iter()
        .map(|u| {
            let x = load_series(&u.input)?;
            let opts = args.opt.fit_options(m, u.seed)?;
            let f = fit(&x, &opts)?;
            create_dir(&u.out)?;
            write_fit_outputs(&u.out, &f, &u.config(config))?;
            report_fit(&u.tag(), &f);
            Ok(if f.converged {
                Status::Done
            } else {
                Status::NotConverged
            })
        })
        .collect();
    Ok(Status::worst(collect(results)?))
}

fn write_selection(dir: &Path, sel: &Selection, config: &Value) -> Result<()> {
    let rows: Vec<Vec<String>> = sel
        .aic_curve
        .iter()
        .enumerate()
        .map(|(i, a)| {
            vec![
                (i + 1).to_string(),
                a.map(|v| v.to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    write_text(
        &dir.join("aic.csv"),
        &csv_table(config, &["m", "aic"], &rows)?,
    )?;
    let failures: Vec<Value> = sel
        .fits
        .iter()
        .enumerate()
        .filter_map(|(i, f)| {
            f.as_ref()
                .err()
                .map(|e| json!({"m": i + 1, "error": e.to_string()}))
        })
        .collect();
    let doc = json!({
        "format_version": FORMAT_VERSION,
        "config": config,
        "best_m": sel.best_m,
        "aic_curve": sel.aic_curve,
        "failures": failures,
    });
    write_json(&dir.join("selection.json"), &doc)?;
    write_fit_outputs(dir, sel.best_fit(), config)
}

pub fn select_dim(args: &SelectArgs, config: &Value) -> Result<Status> {
    let data = required(&args.data, "data")?;
    let m_max = args.m_max.unwrap_or(5);
    if m_max < 1 {
        return Err(Error::Config("--m-max must be >= 1".into()));
    }
    args.opt.fit_options(1, 0)?;
    let units = units(
        data,
        OBSERVATIONS,
        &out_dir(&args.out),
        args.seed.unwrap_or(0),
        args.replicates.unwrap_or(1),
    )?;
    let results: Vec<Result<Status>> = units
        .par_iter()
        .map(|u| {
            let x = load_series(&u.input)?;
            let fits: Vec<Result<FitResult>> = (1..=m_max)
                .into_par_iter()
                .map(|m| args.opt.fit_options(m, u.seed).and_then(|o| fit(&x, &o)))
                .collect();
            let sel = finish_selection(fits)?;
            create_dir(&u.out)?;
            write_selection(&u.out, &sel, &u.config(config))?;
            let curve: Vec<String> = sel
                .aic_curve
                .iter()
                .map(|a| {
                    a.map(|v| format!("{v:.1}"))
                        .unwrap_or_else(|| "failed".into())
                })
                .collect();
            eprintln!(
                "{}AIC by m = 1..{m_max}: [{}], chosen m = {}",
                u.tag(),
                curve.join(", "),
                sel.best_m
            );
            Ok(if sel.best_fit().converged {
                Status::Done
            } else {
                Status::NotConverged
            })
        })
        .collect();
    Ok(Status::worst(collect(results)?))
}

/// Inputs for scoring one replicate.
struct EvalInputs {
    label: Option<String>,
    fit: PathBuf,
    data: PathBuf,
    truth: Option<PathBuf>,
}

fn truth_near(explicit: Option<&Path>, data_file: &Path, label: Option<&str>) -> Option<PathBuf> {
    match explicit {
        Some(p) => {
            let base = match label {
                Some(l) if p.join(l).is_dir() => p.join(l),
                _ => p.to_path_buf(),
            };
            Some(locate(&base, TRUTH))
        }
        None => {
            let guess = data_file.parent().map(|d| d.join(TRUTH))?;
            guess.is_file().then_some(guess)
        }
    }
}

fn eval_inputs(args: &EvaluateArgs) -> Result<Vec<EvalInputs>> {
    let fit = required(&args.fit, "fit")?;
    let data = required(&args.data, "data")?;
    let reps = replicate_dirs(fit)?;
    if reps.is_empty() {
        let data_file = locate(data, OBSERVATIONS);
        let truth = truth_near(args.truth.as_deref(), &data_file, None);
        return Ok(vec![EvalInputs {
            label: None,
            fit: locate(fit, FIT),
            data: data_file,
            truth,
        }]);
    }
    reps.into_iter()
        .map(|(label, dir)| {
            let data_dir = data.join(&label);
            if !data_dir.is_dir() {
                return Err(Error::Config(format!(
                    "{} has no replicate directory {label}",
                    data.display()
                )));
            }
            let data_file = data_dir.join(OBSERVATIONS);
            let truth = truth_near(args.truth.as_deref(), &data_file, Some(&label));
            Ok(EvalInputs {
                fit: dir.join(FIT),
                data: data_file,
                truth,
                label: Some(label),
            })
        })
        .collect()
}

fn load_fit(path: &Path) -> Result<FitResult> {
    fit_from_json(&read_text(path)?).map_err(|e| match e {
        Error::Json(j) => Error::Parse(format!("{}: {j}", path.display())),
        other => other,
    })
}

fn load_truth(path: &Path) -> Result<GroundTruth> {
    read_json::<TruthDoc>(path)?.to_truth()
}

/// Scores one fit; returns the report and notes about omitted metrics.
fn score(inputs: &EvalInputs, ties: TieRule) -> Result<(MetricReport, Vec<String>)> {
    let f = load_fit(&inputs.fit)?;
    let x = load_series(&inputs.data)?;
    if f.posterior.horizon() != x.len() {
        return Err(Error::Shape(format!(
            "fit covers T = {} but {} has T = {}",
            f.posterior.horizon(),
            inputs.data.display(),
            x.len()
        )));
    }
    let gamma: Vec<Tensor3> = f.posterior.means[1..]
        .iter()
        .map(|z| log_odds(&f.params, z))
        .collect::<Result<_>>()?;
    let overall = auc(&gamma, &x, ties)?;
    let layers = per_layer_auc(&gamma, &x, ties)?;
    let mut notes = Vec::new();
    let (mut mse_value, mut mape) = (None, None);
    match &inputs.truth {
        None => notes.push("no ground truth supplied: MSE and factor MAPE omitted".to_string()),
        Some(path) => {
            let truth = load_truth(path)?;
            mse_value = Some(mse(&gamma, &truth.gamma)?);
            match &truth.params {
                TruthParams::Tssdmn(p) if p.m() == f.m => {
                    mape = Some(align_factors(&f.params.c1, &p.c1)?.mape)
                }
                TruthParams::Tssdmn(p) => notes.push(format!(
                    "factor MAPE omitted: fitted m = {} but true m = {}",
                    f.m,
                    p.m()
                )),
                _ => notes.push(format!(
                    "factor MAPE omitted: ground truth comes from the {} generator",
                    truth.mechanism
                )),
            }
        }
    }
    Ok((
        MetricReport::single(mse_value, overall, layers, mape),
        notes,
    ))
}

fn write_metrics(
    dir: &Path,
    report: &MetricReport,
    per_rep: &[(Option<String>, MetricReport)],
    notes: &[String],
    config: &Value,
) -> Result<()> {
    create_dir(dir)?;
    let replicates: Vec<Value> = per_rep
        .iter()
        .map(|(l, r)| json!({"replicate": l, "report": r}))
        .collect();
    let doc = json!({
        "format_version": FORMAT_VERSION,
        "config": config,
        "report": report,
        "replicates": replicates,
        "notes": notes,
    });
    write_json(&dir.join("metrics.json"), &doc)?;
    write_text(
        &dir.join("metrics.csv"),
        &csv_table(config, &METRIC_HEADER, &metric_rows(report))?,
    )?;
    if per_rep.len() > 1 {
        let mut rows = Vec::new();
        for (label, r) in per_rep {
            for row in metric_rows(r) {
                rows.push(vec![
                    label.clone().unwrap_or_default(),
                    row[0].clone(),
                    row[1].clone(),
                ]);
            }
        }
        write_text(
            &dir.join("replicates.csv"),
            &csv_table(config, &["replicate", "metric", "value"], &rows)?,
        )?;
    }
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs, config: &Value) -> Result<Status> {
    let ties = tie_rule(args.ties.as_deref())?;
    let inputs = eval_inputs(args)?;
    let scored = collect(inputs.par_iter().map(|i| score(i, ties)).collect())?;
    let mut notes: Vec<String> = Vec::new();
    let mut per_rep = Vec::new();
    for (i, (report, n)) in inputs.iter().zip(scored) {
        for note in n {
            let tagged = match &i.label {
                Some(l) => format!("{l}: {note}"),
                None => note,
            };
            notes.push(tagged);
        }
        per_rep.push((i.label.clone(), report));
    }
    let reports: Vec<MetricReport> = per_rep.iter().map(|(_, r)| r.clone()).collect();
    let summary = if reports.len() == 1 {
        reports[0].clone()
    } else {
        replicate_summary(&reports)?
    };
    write_metrics(&out_dir(&args.out), &summary, &per_rep, &notes, config)?;
    for row in metric_rows(&summary) {
        eprintln!("{}: {}", row[0], row[3]);
    }
    for n in &notes {
        eprintln!("note: {n}");
    }
    Ok(Status::Done)
}

pub fn predict(args: &PredictArgs, config: &Value) -> Result<Status> {
    let ties = tie_rule(args.ties.as_deref())?;
    let fit_path = required(&args.fit, "fit")?;
    let out = out_dir(&args.out);
    let reps = replicate_dirs(fit_path)?;
    let jobs: Vec<(Option<String>, PathBuf, Option<PathBuf>, PathBuf)> = if reps.is_empty() {
        vec![(
            None,
            locate(fit_path, FIT),
            args.holdout.as_ref().map(|h| locate(h, HOLDOUT)),
            out.clone(),
        )]
    } else {
        reps.into_iter()
            .map(|(label, dir)| {
                let holdout = args
                    .holdout
                    .as_ref()
                    .map(|h| locate(&h.join(&label), HOLDOUT));
                (
                    Some(label.clone()),
                    dir.join(FIT),
                    holdout,
                    out.join(&label),
                )
            })
            .collect()
    };
    let results: Vec<Result<Option<Vec<f64>>>> = jobs
        .par_iter()
        .map(|(label, fit_file, holdout, dir)| {
            let f = load_fit(fit_file)?;
            let probs = predict_next(&f)?;
            let mut cfg = config.clone();
            if let (Value::Object(map), Some(l)) = (&mut cfg, label) {
                map.insert("replicate".into(), l.clone().into());
            }
            let mut doc = json!({
                "format_version": FORMAT_VERSION,
                "config": cfg,
                "step": f.posterior.horizon() + 1,
                "probabilities": ArrayDoc::from_tensor(&probs),
            });
            let mut layers = None;
            if let Some(h) = holdout {
                let x = load_series(h)?;
                if x.is_empty() {
                    return Err(Error::Shape(format!("{} holds no time steps", h.display())));
                }
                let (first, _) = x.split_at(1);
                let aucs = per_layer_auc(std::slice::from_ref(&probs), &first, ties)?;
                doc["per_layer_auc"] = json!(aucs);
                doc["auc"] = json!(auc(std::slice::from_ref(&probs), &first, ties)?);
                layers = Some(aucs);
            }
            create_dir(dir)?;
            write_json(&dir.join("prediction.json"), &doc)?;
            if let Some(aucs) = &layers {
                let rows: Vec<Vec<String>> = aucs
                    .iter()
                    .enumerate()
                    .map(|(k, a)| vec![(k + 1).to_string(), a.to_string()])
                    .collect();
                write_text(
                    &dir.join("prediction_auc.csv"),
                    &csv_table(&cfg, &["layer", "auc"], &rows)?,
                )?;
                let tag = label
                    .as_ref()
                    .map(|l| format!("[{l}] "))
                    .unwrap_or_default();
                let shown: Vec<String> = aucs.iter().map(|a| format!("{a:.3}")).collect();
                eprintln!("{tag}per-layer AUC at T + 1: [{}]", shown.join(", "));
            }
            Ok(layers)
        })
        .collect();
    let layers = collect(results)?;
    if layers.len() > 1 && layers.iter().all(Option::is_some) {
        let all: Vec<Vec<f64>> = layers.into_iter().flatten().collect();
        let k = all[0].len();
        let mut rows = Vec::new();
        for l in 0..k {
            let e = Estimate::from_values(&all.iter().map(|v| v[l]).collect::<Vec<_>>())?;
            rows.push(vec![
                (l + 1).to_string(),
                e.mean.to_string(),
                e.se.to_string(),
                format!("{e:.3}"),
            ]);
        }
        create_dir(&out)?;
        write_text(
            &out.join("prediction_auc.csv"),
            &csv_table(config, &["layer", "mean", "se", "formatted"], &rows)?,
        )?;
        for r in &rows {
            eprintln!("layer {}: AUC {}", r[0], r[3]);
        }
    }
    Ok(Status::Done)
}

pub fn ingest(args: &IngestArgs, config: &Value) -> Result<Status> {
    let edges = required(&args.edges, "edges")?;
    let meta = args.meta.clone().unwrap_or_else(|| sidecar_path(edges));
    let x = ingest_edges_with(edges, &meta)?;
    let out = out_dir(&args.out);
    create_dir(&out)?;
    save_observations(&x, &out.join(OBSERVATIONS), config.clone())?;
    let density = x.edge_count() as f64 / (x.n() * x.n() * x.k() * x.len().max(1)) as f64;
    eprintln!(
        "{}: n = {}, K = {}, T = {}, {} edges (density {density:.4})",
        out.join(OBSERVATIONS).display(),
        x.n(),
        x.k(),
        x.len(),
        x.edge_count()
    );
    Ok(Status::Done)
}
