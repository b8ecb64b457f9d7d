//! Command-line arguments and their merge with a JSON config file.
//!
//! Every option is optional on the command line. A `--config` file supplies
//! values for any of them under the same snake_case names; flags win.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use mlnet::simulate::{preset, Mechanism, SimConfig};
use mlnet::{Error, FitOptions, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Parser, Debug)]
#[command(
    name = "mlnet",
    version,
    about = "Tensor state space model for dynamic multilayer networks"
)]
pub struct Cli {
    /// JSON file with default values for the command's options.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic networks with ground truth.
    Simulate(SimulateArgs),
    /// Fit the model by variational EM.
    Fit(FitArgs),
    /// Choose the latent dimension by AIC.
    SelectDim(SelectArgs),
    /// Score a fit against observations and, if available, ground truth.
    Evaluate(EvaluateArgs),
    /// Forecast edge probabilities one step past the fitted horizon.
    Predict(PredictArgs),
    /// Convert an edge list plus sidecar into the repository format.
    Ingest(IngestArgs),
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateArgs {
    #[arg(long)]
    pub mechanism: Option<Mechanism>,
    /// Experiment preset 1-4 (node, layer, variance and dimension sweeps).
    #[arg(long)]
    pub setting: Option<u32>,
    /// Index of the swept value within the preset.
    #[arg(long)]
    pub variant: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of layers.
    #[arg(long)]
    pub k: Option<usize>,
    /// Number of time steps.
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub sigma2: Option<f64>,
    #[arg(long)]
    pub omega2: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub gp_length_scale: Option<f64>,
    #[arg(long)]
    pub gp_amplitude: Option<f64>,
    #[arg(long)]
    pub eigen_lo: Option<f64>,
    #[arg(long)]
    pub eigen_hi: Option<f64>,
    #[arg(long)]
    pub emission_scale: Option<f64>,
    /// Extra time steps generated past `T` and written to `holdout.csv`.
    #[arg(long)]
    pub holdout: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl SimulateArgs {
    pub fn sim_config(&self) -> Result<SimConfig> {
        let mut c = match (self.setting, self.variant) {
            (Some(s), v) => preset(s, v.unwrap_or(0))?,
            (None, Some(_)) => return Err(Error::Config("--variant needs --setting".into())),
            (None, None) => preset(1, 0)?,
        };
        if let Some(v) = self.mechanism {
            c.mechanism = v;
        }
        macro_rules! set {
            ($($field:ident => $target:ident),*) => {$(if let Some(v) = self.$field { c.$target = v; })*};
        }
        set!(n => n, k => k, t => t, m => m, sigma2 => sigma2, omega2 => omega2, tau => tau,
             gp_length_scale => gp_length_scale, gp_amplitude => gp_amplitude, emission_scale => emission_scale);
        if let Some(v) = self.eigen_lo {
            c.transition_eigen_range[0] = v;
        }
        if let Some(v) = self.eigen_hi {
            c.transition_eigen_range[1] = v;
        }
        c.seed = self.seed.unwrap_or(0);
        c.validate()?;
        Ok(c)
    }
}

/// Optimizer settings shared by `fit` and `select-dim`.
#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerArgs {
    #[arg(long)]
    pub max_em_iters: Option<usize>,
    #[arg(long)]
    pub e_step_tol: Option<f64>,
    #[arg(long)]
    pub max_e_sweeps: Option<usize>,
    #[arg(long)]
    pub block_iters: Option<usize>,
    /// Newton directions in E-step blocks (`false` for plain gradient steps).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub newton_blocks: Option<bool>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub backtrack_factor: Option<f64>,
    #[arg(long)]
    pub max_backtracks: Option<usize>,
    #[arg(long)]
    pub step_growth: Option<f64>,
    #[arg(long)]
    pub emission_iters: Option<usize>,
    #[arg(long)]
    pub dynamics_iters: Option<usize>,
    #[arg(long)]
    pub em_rel_tol: Option<f64>,
    #[arg(long)]
    pub em_patience: Option<usize>,
    /// Keep the ELBO after every E-step sweep and M-step stage (`stages.csv`).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub record_stages: Option<bool>,
}

impl OptimizerArgs {
    pub fn fit_options(&self, m: usize, seed: u64) -> Result<FitOptions> {
        let mut o = FitOptions {
            m,
            seed,
            ..FitOptions::default()
        };
        macro_rules! set {
            ($($field:ident),*) => {$(if let Some(v) = self.$field { o.$field = v; })*};
        }
        set!(
            max_em_iters,
            e_step_tol,
            max_e_sweeps,
            block_iters,
            newton_blocks,
            step_size,
            backtrack_factor,
            max_backtracks,
            step_growth,
            emission_iters,
            dynamics_iters,
            em_rel_tol,
            em_patience,
            record_stages
        );
        o.validate()?;
        Ok(o)
    }
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FitArgs {
    /// Observation edge list, a directory holding `observations.csv`, or a
    /// directory of `rep-*` replicate directories.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Latent dimension.
    #[arg(long)]
    pub m: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub opt: OptimizerArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Independent restarts with derived seeds (single data set only).
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Largest candidate dimension.
    #[arg(long)]
    pub m_max: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub opt: OptimizerArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateArgs {
    /// `fit.json`, or a directory holding it or `rep-*` directories that do.
    #[arg(long)]
    pub fit: Option<PathBuf>,
    /// Observations the fit was trained on (file or directory, as for `fit`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `truth.json` or a directory; defaults to `truth.json` next to the data.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// AUC tie rule: `half` or `strict`.
    #[arg(long)]
    pub ties: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictArgs {
    #[arg(long)]
    pub fit: Option<PathBuf>,
    /// Observations at `T + 1` to score the forecast against; defaults to
    /// `holdout.csv` next to the fit's data when a directory is given.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
    #[arg(long)]
    pub ties: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestArgs {
    /// CSV with header `t,i,j,k` and 1-based indices.
    #[arg(long)]
    pub edges: Option<PathBuf>,
    /// Sidecar JSON with `n`, `K`, `T`; defaults to the edge file with a `.json` extension.
    #[arg(long)]
    pub meta: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn strip_nulls(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(map) => map.into_iter().filter(|(_, v)| !v.is_null()).collect(),
        _ => Map::new(),
    }
}

/// Overlays command-line values on the config file and returns the merged
/// arguments together with their JSON form (the resolved config).
pub fn resolve<T>(cli: &T, config: Option<&Value>) -> Result<(T, Value)>
where
    T: Serialize + DeserializeOwned + Default,
{
    let all_keys = match serde_json::to_value(T::default())? {
        Value::Object(map) => map,
        _ => Map::new(),
    };
    let mut merged = Map::new();
    if let Some(cfg) = config {
        let Value::Object(map) = cfg else {
            return Err(Error::Config("config file must hold a JSON object".into()));
        };
        for (k, v) in map {
            if !all_keys.contains_key(k) {
                let mut names: Vec<&str> = all_keys.keys().map(String::as_str).collect();
                names.sort_unstable();
                return Err(Error::Config(format!(
                    "unknown config key '{k}' (expected one of: {})",
                    names.join(", ")
                )));
            }
            merged.insert(k.clone(), v.clone());
        }
    }
    merged.extend(strip_nulls(serde_json::to_value(cli)?));
    let value = Value::Object(merged);
    let args =
        serde_json::from_value(value.clone()).map_err(|e| Error::Config(format!("config: {e}")))?;
    Ok((args, value))
}

pub fn tie_rule(s: Option<&str>) -> Result<mlnet::evaluate::TieRule> {
    use mlnet::evaluate::TieRule;
    match s.unwrap_or("half") {
        "half" => Ok(TieRule::Half),
        "strict" => Ok(TieRule::Strict),
        other => Err(Error::Config(format!(
            "unknown tie rule '{other}' (expected half or strict)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config() {
        let cli = FitArgs {
            m: Some(4),
            ..FitArgs::default()
        };
        let cfg = serde_json::json!({"m": 2, "seed": 9, "step_size": 0.5});
        let (args, value) = resolve(&cli, Some(&cfg)).unwrap();
        assert_eq!(args.m, Some(4));
        assert_eq!(args.seed, Some(9));
        assert_eq!(args.opt.step_size, Some(0.5));
        assert_eq!(value["m"], 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let cfg = serde_json::json!({"mm": 2});
        assert!(matches!(
            resolve(&FitArgs::default(), Some(&cfg)),
            Err(Error::Config(_))
        ));
        let cfg = serde_json::json!([1]);
        assert!(matches!(
            resolve(&FitArgs::default(), Some(&cfg)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn simulate_defaults_to_first_preset() {
        let c = SimulateArgs::default().sim_config().unwrap();
        assert_eq!((c.n, c.k, c.t, c.m), (10, 2, 30, 3));
        let c = SimulateArgs {
            setting: Some(2),
            variant: Some(2),
            n: Some(7),
            ..Default::default()
        }
        .sim_config()
        .unwrap();
        assert_eq!((c.n, c.k), (7, 3));
        assert!(SimulateArgs {
            variant: Some(1),
            ..Default::default()
        }
        .sim_config()
        .is_err());
    }

    #[test]
    fn optimizer_overrides_apply() {
        let o = OptimizerArgs {
            newton_blocks: Some(false),
            max_em_iters: Some(7),
            ..Default::default()
        };
        let f = o.fit_options(2, 5).unwrap();
        assert!(!f.newton_blocks);
        assert_eq!((f.m, f.seed, f.max_em_iters), (2, 5, 7));
        assert!(OptimizerArgs::default().fit_options(0, 0).is_err());
    }
}
