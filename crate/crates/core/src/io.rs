//! File formats.
//!
//! Structured data is JSON, tabular data CSV. Arrays are stored as
//! `{"dims": [...], "data": [...]}` with `data` in row-major order (last index
//! fastest), whatever the in-memory layout. Floats are written with the
//! shortest decimal that round-trips, so every `f64` survives a save/load
//! cycle bit for bit. Node, layer and time indices in edge files are 1-based.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::evaluate::MetricReport;
use crate::inference::{FitResult, StageRecord, VariationalPosterior};
use crate::model::{LatentTrajectory, ModelParams, ObservationSeries, StationarityReport};
use crate::simulate::{GroundTruth, Mechanism, TruthParams};
use crate::tensor::{Mat, Tensor3};

/// Version stamped into every file this crate writes.
pub const FORMAT_VERSION: u32 = 1;

pub const ARRAY_LAYOUT: &str = "row-major";

fn check_version(found: u32, what: &str) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::Parse(format!(
            "{what} has format_version {found}, this build reads {FORMAT_VERSION}"
        )));
    }
    Ok(())
}

/// A dense array with explicit dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayDoc {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl ArrayDoc {
    fn check(&self, rank: usize, name: &str) -> Result<()> {
        if self.dims.len() != rank {
            return Err(Error::Parse(format!(
                "{name}: expected {rank} dims, found {:?}",
                self.dims
            )));
        }
        let want: usize = self.dims.iter().product();
        if self.data.len() != want {
            return Err(Error::Parse(format!(
                "{name}: dims {:?} need {want} values, found {}",
                self.dims,
                self.data.len()
            )));
        }
        Ok(())
    }

    pub fn from_mat(m: &Mat) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn to_mat(&self, name: &str) -> Result<Mat> {
        self.check(2, name)?;
        Mat::new(self.dims[0], self.dims[1], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor3) -> Self {
        let [d1, d2, d3] = t.dims();
        let mut data = Vec::with_capacity(t.len());
        for i in 0..d1 {
            for j in 0..d2 {
                for k in 0..d3 {
                    data.push(t.get(i, j, k));
                }
            }
        }
        Self {
            dims: vec![d1, d2, d3],
            data,
        }
    }

    pub fn to_tensor(&self, name: &str) -> Result<Tensor3> {
        self.check(3, name)?;
        let [d2, d3] = [self.dims[1], self.dims[2]];
        Ok(Tensor3::from_fn([self.dims[0], d2, d3], |i, j, k| {
            self.data[(i * d2 + j) * d3 + k]
        }))
    }
}

fn tensors_to_docs(ts: &[Tensor3]) -> Vec<ArrayDoc> {
    ts.iter().map(ArrayDoc::from_tensor).collect()
}

fn docs_to_tensors(docs: &[ArrayDoc], name: &str) -> Result<Vec<Tensor3>> {
    docs.iter()
        .enumerate()
        .map(|(t, d)| d.to_tensor(&format!("{name}[{t}]")))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsDoc {
    pub layout: String,
    pub n: usize,
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub c1: ArrayDoc,
    pub c2: ArrayDoc,
    pub a1: ArrayDoc,
    pub a2: ArrayDoc,
    pub a3: ArrayDoc,
    pub b: ArrayDoc,
    pub u0: ArrayDoc,
    pub sigma2: f64,
    pub omega2: f64,
}

impl ParamsDoc {
    pub fn from_params(p: &ModelParams) -> Self {
        Self {
            layout: ARRAY_LAYOUT.into(),
            n: p.n(),
            m: p.m(),
            k: p.k(),
            c1: ArrayDoc::from_mat(&p.c1),
            c2: ArrayDoc::from_mat(&p.c2),
            a1: ArrayDoc::from_mat(&p.a1),
            a2: ArrayDoc::from_mat(&p.a2),
            a3: ArrayDoc::from_mat(&p.a3),
            b: ArrayDoc::from_tensor(&p.b),
            u0: ArrayDoc::from_tensor(&p.u0),
            sigma2: p.sigma2,
            omega2: p.omega2,
        }
    }

    pub fn to_params(&self) -> Result<ModelParams> {
        if self.layout != ARRAY_LAYOUT {
            return Err(Error::Parse(format!(
                "unsupported array layout '{}'",
                self.layout
            )));
        }
        let p = ModelParams {
            c1: self.c1.to_mat("c1")?,
            c2: self.c2.to_mat("c2")?,
            a1: self.a1.to_mat("a1")?,
            a2: self.a2.to_mat("a2")?,
            a3: self.a3.to_mat("a3")?,
            b: self.b.to_tensor("b")?,
            u0: self.u0.to_tensor("u0")?,
            sigma2: self.sigma2,
            omega2: self.omega2,
        };
        p.validate_structure()?;
        if (p.n(), p.m(), p.k()) != (self.n, self.m, self.k) {
            return Err(Error::Parse(format!(
                "declared (n, m, K) = ({}, {}, {}) disagree with the arrays ({}, {}, {})",
                self.n,
                self.m,
                self.k,
                p.n(),
                p.m(),
                p.k()
            )));
        }
        Ok(p)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    format_version: u32,
    #[serde(flatten)]
    params: ParamsDoc,
}

pub fn params_to_json(p: &ModelParams) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ParamsFile {
        format_version: FORMAT_VERSION,
        params: ParamsDoc::from_params(p),
    })?)
}

pub fn params_from_json(s: &str) -> Result<ModelParams> {
    let f: ParamsFile = serde_json::from_str(s)?;
    check_version(f.format_version, "parameter file")?;
    f.params.to_params()
}

/// Like [`params_from_json`] but also requires positive variances, as fitting does.
pub fn fit_params_from_json(s: &str) -> Result<ModelParams> {
    let p = params_from_json(s)?;
    p.validate()?;
    Ok(p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDoc {
    pub means: Vec<ArrayDoc>,
    pub vars: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationarityDoc {
    pub radii: [f64; 3],
    pub stationary: bool,
}

/// On-disk form of a [`FitResult`], with the run configuration that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitDoc {
    pub format_version: u32,
    #[serde(default)]
    pub config: Value,
    pub m: usize,
    pub params: ParamsDoc,
    pub posterior: PosteriorDoc,
    pub elbo_trace: Vec<f64>,
    pub aic: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_elbo: f64,
    pub observation_bound: f64,
    pub stationarity: StationarityDoc,
    pub dynamics_skipped: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stages: Vec<StageRecord>,
}

impl FitDoc {
    pub fn new(fit: &FitResult, config: Value) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config,
            m: fit.m,
            params: ParamsDoc::from_params(&fit.params),
            posterior: PosteriorDoc {
                means: tensors_to_docs(&fit.posterior.means),
                vars: fit.posterior.vars.clone(),
            },
            elbo_trace: fit.elbo_trace.clone(),
            aic: fit.aic,
            iterations: fit.iterations,
            converged: fit.converged,
            final_elbo: fit.final_elbo,
            observation_bound: fit.observation_bound,
            stationarity: StationarityDoc {
                radii: fit.stationarity.radii,
                stationary: fit.stationarity.stationary,
            },
            dynamics_skipped: fit.dynamics_skipped,
            stages: fit.stages.clone(),
        }
    }

    pub fn to_fit(&self) -> Result<FitResult> {
        check_version(self.format_version, "fit result")?;
        let params = self.params.to_params()?;
        params.validate()?;
        let posterior = VariationalPosterior {
            means: docs_to_tensors(&self.posterior.means, "posterior.means")?,
            vars: self.posterior.vars.clone(),
        };
        posterior.validate(params.core_dims(), posterior.horizon())?;
        if params.m() != self.m {
            return Err(Error::Parse(format!(
                "fit declares m = {} but parameters have m = {}",
                self.m,
                params.m()
            )));
        }
        Ok(FitResult {
            params,
            posterior,
            elbo_trace: self.elbo_trace.clone(),
            aic: self.aic,
            iterations: self.iterations,
            converged: self.converged,
            final_elbo: self.final_elbo,
            observation_bound: self.observation_bound,
            m: self.m,
            stages: self.stages.clone(),
            stationarity: StationarityReport {
                radii: self.stationarity.radii,
                stationary: self.stationarity.stationary,
            },
            dynamics_skipped: self.dynamics_skipped,
        })
    }
}

pub fn fit_to_json(fit: &FitResult, config: Value) -> Result<String> {
    Ok(serde_json::to_string_pretty(&FitDoc::new(fit, config))?)
}

pub fn fit_from_json(s: &str) -> Result<FitResult> {
    serde_json::from_str::<FitDoc>(s)?.to_fit()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TruthParamsDoc {
    Tssdmn { params: ParamsDoc },
    Edmn { lambda: ArrayDoc },
    Bdmn { length_scale: f64, amplitude: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthDoc {
    pub format_version: u32,
    #[serde(default)]
    pub config: Value,
    pub mechanism: Mechanism,
    pub params: TruthParamsDoc,
    /// Log-odds tensors for `t = 1..=T`.
    pub gamma: Vec<ArrayDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<Vec<ArrayDoc>>,
}

impl TruthDoc {
    pub fn new(truth: &GroundTruth, config: Value) -> Self {
        let params = match &truth.params {
            TruthParams::Tssdmn(p) => TruthParamsDoc::Tssdmn {
                params: ParamsDoc::from_params(p),
            },
            TruthParams::Edmn { lambda } => TruthParamsDoc::Edmn {
                lambda: ArrayDoc::from_mat(lambda),
            },
            TruthParams::Bdmn {
                length_scale,
                amplitude,
            } => TruthParamsDoc::Bdmn {
                length_scale: *length_scale,
                amplitude: *amplitude,
            },
        };
        Self {
            format_version: FORMAT_VERSION,
            config,
            mechanism: truth.mechanism,
            params,
            gamma: tensors_to_docs(&truth.gamma),
            latent: truth.latent.as_ref().map(|z| tensors_to_docs(&z.cores)),
        }
    }

    pub fn to_truth(&self) -> Result<GroundTruth> {
        check_version(self.format_version, "ground truth")?;
        let params = match &self.params {
            TruthParamsDoc::Tssdmn { params } => TruthParams::Tssdmn(params.to_params()?),
            TruthParamsDoc::Edmn { lambda } => TruthParams::Edmn {
                lambda: lambda.to_mat("lambda")?,
            },
            TruthParamsDoc::Bdmn {
                length_scale,
                amplitude,
            } => TruthParams::Bdmn {
                length_scale: *length_scale,
                amplitude: *amplitude,
            },
        };
        let latent = match &self.latent {
            Some(docs) => Some(LatentTrajectory {
                cores: docs_to_tensors(docs, "latent")?,
            }),
            None => None,
        };
        Ok(GroundTruth {
            mechanism: self.mechanism,
            params,
            gamma: docs_to_tensors(&self.gamma, "gamma")?,
            latent,
        })
    }
}

/// Sidecar of an edge list: the dense dimensions it expands to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesMeta {
    pub format_version: u32,
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub config: Value,
}

impl SeriesMeta {
    pub fn of(x: &ObservationSeries, config: Value) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            n: x.n(),
            k: x.k(),
            t: x.len(),
            config,
        }
    }
}

/// `edges.csv` → `edges.json`.
pub fn sidecar_path(edges: &Path) -> PathBuf {
    edges.with_extension("json")
}

/// Writes one `t,i,j,k` row per present edge, ordered by `t`, then `i`, `j`, `k`.
pub fn write_edges<W: Write>(x: &ObservationSeries, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "i", "j", "k"]).map_err(csv_err)?;
    let [n, _, k] = x.dims();
    for (t, xt) in x.tensors().iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                for l in 0..k {
                    if xt.get(i, j, l) == 1.0 {
                        out.serialize((t + 1, i + 1, j + 1, l + 1))
                            .map_err(csv_err)?;
                    }
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Parse(format!("{other:?}")),
    }
}

/// Expands an edge list into a dense binary series. Repeated rows collapse to
/// a single edge. Errors name the 1-based data row (header excluded).
pub fn read_edges<R: Read>(r: R, meta: &SeriesMeta) -> Result<ObservationSeries> {
    let (n, k, horizon) = (meta.n, meta.k, meta.t);
    let mut tensors = vec![Tensor3::zeros([n, n, k]); horizon];
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(r);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse(format!("edge file header: {e}")))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols != ["t", "i", "j", "k"] {
        return Err(Error::Parse(format!(
            "edge file header must be t,i,j,k, found {}",
            cols.join(",")
        )));
    }
    for (row, rec) in rdr.records().enumerate() {
        let row = row + 1;
        let rec = rec.map_err(|e| Error::Parse(format!("row {row}: {e}")))?;
        let mut idx = [0usize; 4];
        for (c, (name, limit)) in [("t", horizon), ("i", n), ("j", n), ("k", k)]
            .into_iter()
            .enumerate()
        {
            let raw = rec
                .get(c)
                .ok_or_else(|| Error::Parse(format!("row {row}: missing column {name}")))?;
            let v: usize = raw.parse().map_err(|_| {
                Error::Parse(format!("row {row}: {name} = '{raw}' is not an index"))
            })?;
            if v < 1 || v > limit {
                return Err(Error::Parse(format!(
                    "row {row}: {name} = {v} outside 1..={limit}"
                )));
            }
            idx[c] = v - 1;
        }
        tensors[idx[0]].set(idx[1], idx[2], idx[3], 1.0);
    }
    ObservationSeries::new(n, k, tensors)
}

/// Reads `path` and its sidecar (see [`sidecar_path`]).
pub fn ingest_edges(path: &Path) -> Result<ObservationSeries> {
    ingest_edges_with(path, &sidecar_path(path))
}

pub fn ingest_edges_with(path: &Path, meta_path: &Path) -> Result<ObservationSeries> {
    let meta: SeriesMeta = read_json(meta_path)?;
    check_version(meta.format_version, "edge sidecar")?;
    let f = File::open(path).map_err(|e| with_path(e, path))?;
    read_edges(BufReader::new(f), &meta)
}

/// Writes `path` (edge list) and its sidecar.
pub fn save_observations(x: &ObservationSeries, path: &Path, config: Value) -> Result<()> {
    let f = File::create(path).map_err(|e| with_path(e, path))?;
    write_edges(x, BufWriter::new(f))?;
    write_json(&sidecar_path(path), &SeriesMeta::of(x, config))
}

fn with_path(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).map_err(|e| with_path(e, path))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| with_path(e, path))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| {
        Error::Parse(format!(
            "{}: line {}, column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })
}

/// Header comment for CSV outputs: `# format_version=1 config={...}`.
pub fn csv_preamble(config: &Value) -> String {
    format!("# format_version={FORMAT_VERSION} config={config}\n")
}

/// CSV text with a preamble, a header row and the given records.
pub fn csv_table(config: &Value, header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(header).map_err(csv_err)?;
    for r in rows {
        out.write_record(r).map_err(csv_err)?;
    }
    let body = out.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(csv_preamble(config) + &String::from_utf8(body).expect("csv output is utf-8"))
}

/// Reads a CSV written by [`csv_table`], skipping `#` comment lines.
pub fn read_csv_table<R: Read>(r: R) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let header = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        rows.push(rec.map_err(csv_err)?.iter().map(str::to_owned).collect());
    }
    Ok((header, rows))
}

/// One row per metric in the `mean(±se)` layout: `metric,mean,se,formatted`.
pub fn metric_rows(report: &MetricReport) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    let mut push = |name: String, e: &crate::evaluate::Estimate| {
        rows.push(vec![
            name,
            e.mean.to_string(),
            e.se.to_string(),
            e.to_string(),
        ]);
    };
    if let Some(e) = &report.mse {
        push("mse".into(), e);
    }
    push("auc".into(), &report.auc);
    for (k, e) in report.per_layer_auc.iter().enumerate() {
        push(format!("auc_layer_{}", k + 1), e);
    }
    if let Some(e) = &report.mape {
        push("mape".into(), e);
    }
    rows
}

pub const METRIC_HEADER: [&str; 4] = ["metric", "mean", "se", "formatted"];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{fit, FitOptions};
    use crate::model::tests::random_params;
    use crate::simulate::{generate, SimConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tensor_docs_are_row_major() {
        let t = Tensor3::from_fn([2, 3, 2], |i, j, k| (100 * i + 10 * j + k) as f64);
        let d = ArrayDoc::from_tensor(&t);
        assert_eq!(&d.data[..4], &[0.0, 1.0, 10.0, 11.0]);
        assert_eq!(d.data[6], 100.0);
        assert_eq!(d.to_tensor("t").unwrap(), t);
        let bad = ArrayDoc {
            dims: vec![2, 2, 2],
            data: vec![0.0; 7],
        };
        assert!(matches!(bad.to_tensor("x"), Err(Error::Parse(_))));
    }

    proptest! {
        #[test]
        fn params_round_trip_bit_exact(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = random_params(&mut rng, 3, 2, 2);
            p.sigma2 = 0.1 + f64::EPSILON * 3.0;
            p.c2.as_mut_slice()[0] = 1e-310;
            p.b.as_mut_slice()[1] = -123_456.789_012_345_67;
            let s = params_to_json(&p).unwrap();
            let q = params_from_json(&s).unwrap();
            let bits = |p: &ModelParams| -> Vec<u64> {
                [p.c1.as_slice(), p.c2.as_slice(), p.a1.as_slice(), p.a2.as_slice(), p.a3.as_slice(), p.b.as_slice(), p.u0.as_slice(), &[p.sigma2, p.omega2]]
                    .concat().into_iter().map(f64::to_bits).collect()
            };
            prop_assert_eq!(bits(&p), bits(&q));
        }

        #[test]
        fn edges_round_trip(seed in 0u64..100) {
            let cfg = SimConfig::new(4, 2, 3, 2, 0.01, Mechanism::Tssdmn, seed);
            let (x, _) = generate(&cfg).unwrap();
            let mut buf = Vec::new();
            write_edges(&x, &mut buf).unwrap();
            let rows = String::from_utf8(buf.clone()).unwrap().lines().count() - 1;
            prop_assert_eq!(rows, x.edge_count());
            let y = read_edges(buf.as_slice(), &SeriesMeta::of(&x, Value::Null)).unwrap();
            prop_assert_eq!(x, y);
        }
    }

    #[test]
    fn params_json_names_arrays_and_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(&mut rng, 2, 1, 1);
        let v: Value = serde_json::from_str(&params_to_json(&p).unwrap()).unwrap();
        assert_eq!(v["format_version"], FORMAT_VERSION);
        assert_eq!(v["layout"], "row-major");
        assert_eq!(v["b"]["dims"], serde_json::json!([2, 2, 1]));
        let mut bad = v.clone();
        bad["format_version"] = 99.into();
        assert!(matches!(
            params_from_json(&bad.to_string()),
            Err(Error::Parse(_))
        ));
    }

    fn meta(n: usize, k: usize, t: usize) -> SeriesMeta {
        SeriesMeta {
            format_version: FORMAT_VERSION,
            n,
            k,
            t,
            config: Value::Null,
        }
    }

    #[test]
    fn empty_edge_file_is_all_zero() {
        let x = read_edges("t,i,j,k\n".as_bytes(), &meta(3, 2, 2)).unwrap();
        assert_eq!(x, ObservationSeries::zeros(3, 2, 2));
    }

    #[test]
    fn duplicate_rows_collapse() {
        let once = read_edges("t,i,j,k\n1,2,3,1\n".as_bytes(), &meta(3, 2, 2)).unwrap();
        let twice = read_edges("t,i,j,k\n1,2,3,1\n1,2,3,1\n".as_bytes(), &meta(3, 2, 2)).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once.edge_count(), 1);
        assert_eq!(once.at(1).get(1, 2, 0), 1.0);
    }

    #[test]
    fn bad_rows_report_row_number() {
        let cases = [
            ("t,i,j,k\n1,1,1,1\n1,4,1,1\n", "row 2"),
            ("t,i,j,k\n3,1,1,1\n", "row 1"),
            ("t,i,j,k\n1,1,1,0\n", "row 1"),
            ("t,i,j,k\n1,x,1,1\n", "row 1"),
            ("t,i,j\n1,1,1\n", "header"),
        ];
        for (text, want) in cases {
            let err = read_edges(text.as_bytes(), &meta(3, 2, 2)).unwrap_err();
            assert!(
                matches!(&err, Error::Parse(m) if m.contains(want)),
                "{text:?}: {err}"
            );
        }
    }

    #[test]
    fn files_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SimConfig::new(5, 2, 4, 2, 0.01, Mechanism::Tssdmn, 3);
        let (x, truth) = generate(&cfg).unwrap();
        let path = dir.path().join("obs.csv");
        save_observations(&x, &path, serde_json::to_value(&cfg).unwrap()).unwrap();
        assert_eq!(ingest_edges(&path).unwrap(), x);

        let tpath = dir.path().join("truth.json");
        write_json(&tpath, &TruthDoc::new(&truth, Value::Null)).unwrap();
        assert_eq!(
            read_json::<TruthDoc>(&tpath).unwrap().to_truth().unwrap(),
            truth
        );

        for mech in [Mechanism::Edmn, Mechanism::Bdmn] {
            let (_, truth) = generate(&cfg.clone().with_mechanism(mech)).unwrap();
            let doc = TruthDoc::new(&truth, Value::Null);
            let back: TruthDoc =
                serde_json::from_str(&serde_json::to_string(&doc).unwrap()).unwrap();
            assert_eq!(back.to_truth().unwrap(), truth);
        }

        let missing = ingest_edges(&dir.path().join("nope.csv")).unwrap_err();
        assert!(matches!(missing, Error::Io(_)));
    }

    #[test]
    fn fit_result_round_trips() {
        let cfg = SimConfig::new(4, 1, 5, 2, 0.01, Mechanism::Tssdmn, 8);
        let (x, _) = generate(&cfg).unwrap();
        let f = fit(
            &x,
            &FitOptions {
                m: 2,
                max_em_iters: 3,
                record_stages: true,
                ..FitOptions::default()
            },
        )
        .unwrap();
        let s = fit_to_json(&f, serde_json::json!({"m": 2})).unwrap();
        let g = fit_from_json(&s).unwrap();
        assert_eq!(g.params, f.params);
        assert_eq!(g.posterior, f.posterior);
        assert_eq!(g.elbo_trace, f.elbo_trace);
        assert_eq!(g.aic.to_bits(), f.aic.to_bits());
        assert_eq!(g.stages, f.stages);
        assert_eq!(fit_to_json(&g, serde_json::json!({"m": 2})).unwrap(), s);
    }

    #[test]
    fn csv_tables_carry_preamble() {
        let cfg = serde_json::json!({"seed": 4});
        let text = csv_table(&cfg, &["m", "aic"], &[vec!["1".into(), "10.5".into()]]).unwrap();
        assert!(text.starts_with("# format_version=1 config={\"seed\":4}\n"));
        let (h, rows) = read_csv_table(text.as_bytes()).unwrap();
        assert_eq!(h, ["m", "aic"]);
        assert_eq!(rows, vec![vec!["1".to_string(), "10.5".to_string()]]);

        let r = MetricReport::single(None, 0.75, vec![0.7, 0.8], None);
        let names: Vec<String> = metric_rows(&r).into_iter().map(|r| r[0].clone()).collect();
        assert_eq!(names, ["auc", "auc_layer_1", "auc_layer_2"]);
    }
}
