//! Browser bindings: simulate a network, fit it, and sweep the latent dimension.
//!
//! Every entry point takes a JSON request and returns a JSON string. The
//! `*_json` functions hold the logic and run natively; the exported wrappers
//! only convert errors into JS exceptions.

use mlnet::evaluate::{auc, TieRule};
use mlnet::inference::select_m;
use mlnet::model::{edge_prob, log_odds};
use mlnet::simulate::{generate, preset};
use mlnet::{fit, FitOptions, ObservationSeries, SimConfig, Tensor3};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

/// Upper bounds that keep a fit responsive in a browser tab.
const MAX_NODES: usize = 30;
const MAX_EM_ITERS: usize = 200;
const MAX_M: usize = 6;

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Request {
    pub setting: u32,
    pub variant: usize,
    pub seed: u64,
    pub n: Option<usize>,
    #[serde(rename = "T")]
    pub t: Option<usize>,
    pub m: usize,
    pub m_max: usize,
    pub max_em_iters: usize,
}

impl Default for Request {
    fn default() -> Self {
        Self {
            setting: 1,
            variant: 0,
            seed: 1,
            n: None,
            t: None,
            m: 3,
            m_max: 4,
            max_em_iters: 30,
        }
    }
}

impl Request {
    fn parse(json: &str) -> Result<Self, String> {
        let r: Request = if json.trim().is_empty() {
            Request::default()
        } else {
            serde_json::from_str(json).map_err(|e| e.to_string())?
        };
        if r.max_em_iters == 0 || r.max_em_iters > MAX_EM_ITERS {
            return Err(format!("max_em_iters must be in 1..={MAX_EM_ITERS}"));
        }
        if r.m == 0 || r.m > MAX_M || r.m_max == 0 || r.m_max > MAX_M {
            return Err(format!("m and m_max must be in 1..={MAX_M}"));
        }
        Ok(r)
    }

    fn sim_config(&self) -> Result<SimConfig, String> {
        let mut c = preset(self.setting, self.variant).map_err(|e| e.to_string())?;
        c.seed = self.seed;
        if let Some(n) = self.n {
            c.n = n;
        }
        if let Some(t) = self.t {
            c.t = t;
        }
        if c.n > MAX_NODES {
            return Err(format!("n must be at most {MAX_NODES}"));
        }
        c.validate().map_err(|e| e.to_string())?;
        Ok(c)
    }

    fn options(&self, m: usize) -> FitOptions {
        FitOptions {
            max_em_iters: self.max_em_iters,
            ..FitOptions::default()
        }
        .with_m(m)
        .with_seed(self.seed)
    }

    fn observations(&self) -> Result<(ObservationSeries, Vec<Tensor3>), String> {
        let (x, truth) = generate(&self.sim_config()?).map_err(|e| e.to_string())?;
        Ok((x, truth.gamma))
    }
}

/// One `n x n` slice per layer and time step, rows outermost.
#[derive(Debug, Serialize)]
pub struct Heatmaps {
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "T")]
    pub t: usize,
    /// `adjacency[t][k][i][j]`
    pub adjacency: Vec<Vec<Vec<Vec<u8>>>>,
    /// True edge probabilities, same indexing.
    pub probability: Vec<Vec<Vec<Vec<f64>>>>,
}

fn slices<T>(x: &Tensor3, f: impl Fn(f64) -> T) -> Vec<Vec<Vec<T>>> {
    let [n, _, k] = x.dims();
    (0..k)
        .map(|l| {
            (0..n)
                .map(|i| (0..n).map(|j| f(x.get(i, j, l))).collect())
                .collect()
        })
        .collect()
}

pub fn simulate_json(request: &str) -> Result<String, String> {
    let r = Request::parse(request)?;
    let (x, gamma) = r.observations()?;
    let out = Heatmaps {
        n: x.n(),
        k: x.k(),
        t: x.len(),
        adjacency: x.tensors().iter().map(|a| slices(a, |v| v as u8)).collect(),
        probability: gamma.iter().map(|g| slices(&edge_prob(g), |p| p)).collect(),
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
pub struct FitSummary {
    pub m: usize,
    pub elbo_trace: Vec<f64>,
    pub aic: f64,
    pub iterations: usize,
    pub converged: bool,
    /// In-sample AUC of the fitted probabilities against the observed edges.
    pub auc: f64,
    /// The same AUC for the true probabilities, as a reference ceiling.
    pub auc_true: f64,
    pub stationarity_warning: Option<String>,
}

pub fn fit_json(request: &str) -> Result<String, String> {
    let r = Request::parse(request)?;
    let (x, gamma) = r.observations()?;
    let f = fit(&x, &r.options(r.m)).map_err(|e| e.to_string())?;
    let gamma_hat: Vec<Tensor3> = f.posterior.means[1..]
        .iter()
        .map(|z| log_odds(&f.params, z))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let out = FitSummary {
        m: f.m,
        auc: auc(&gamma_hat, &x, TieRule::Half).map_err(|e| e.to_string())?,
        auc_true: auc(&gamma, &x, TieRule::Half).map_err(|e| e.to_string())?,
        stationarity_warning: f.stationarity_warning(),
        elbo_trace: f.elbo_trace,
        aic: f.aic,
        iterations: f.iterations,
        converged: f.converged,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
pub struct AicCurve {
    pub best_m: usize,
    /// `aic[m - 1]`, `null` where the fit failed.
    pub aic: Vec<Option<f64>>,
}

pub fn select_m_json(request: &str) -> Result<String, String> {
    let r = Request::parse(request)?;
    let (x, _) = r.observations()?;
    let s = select_m(&x, r.m_max, &r.options(1)).map_err(|e| e.to_string())?;
    serde_json::to_string(&AicCurve {
        best_m: s.best_m,
        aic: s.aic_curve,
    })
    .map_err(|e| e.to_string())
}

fn to_js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn simulate(request: &str) -> Result<String, JsValue> {
    to_js(simulate_json(request))
}

#[wasm_bindgen(js_name = fitModel)]
pub fn fit_model(request: &str) -> Result<String, JsValue> {
    to_js(fit_json(request))
}

#[wasm_bindgen(js_name = selectM)]
pub fn select_dimension(request: &str) -> Result<String, JsValue> {
    to_js(select_m_json(request))
}
