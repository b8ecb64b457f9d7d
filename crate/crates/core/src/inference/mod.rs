//! Variational EM for the tensor state space model.
//!
//! The posterior over each latent core is a Gaussian `N(μ̃_t, σ̃_t² I)`. The
//! E-step maximizes a Jensen lower bound of the ELBO block by block over `t`;
//! the M-step splits into the emission group `(C1, C2, b)` and the dynamics
//! group `(A1, A2, A3, u0, ω², σ²)`.

mod elbo;
mod estep;
mod fit;
mod mstep;
mod select;

pub use elbo::{elbo_lower_bound, elbo_terms, emission_objective, ElboTerms, Prepared};
pub use estep::{e_step, elbo_block_gradient, EStepReport};
pub use fit::{fit, fit_from, initialize, FitResult, Stage, StageRecord};
pub use mstep::{
    dynamics_gradient, dynamics_objective, emission_gradient, m_step_dynamics, m_step_emission,
    DynamicsUpdate, EmissionGradient, EmissionUpdate,
};
pub use select::{
    aic, aic_penalty, finish_selection, parameter_count, predict_next, select_m, select_m_with,
    Selection,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor3;

/// Mean-field posterior: one core-shaped mean and one scalar variance per `t = 0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalPosterior {
    pub means: Vec<Tensor3>,
    pub vars: Vec<f64>,
}

impl VariationalPosterior {
    /// `μ̃_t = u`, `σ̃_t² = var` for every `t`.
    pub fn constant(core_dims: [usize; 3], horizon: usize, mean: f64, var: f64) -> Self {
        Self {
            means: vec![Tensor3::filled(core_dims, mean); horizon + 1],
            vars: vec![var; horizon + 1],
        }
    }

    pub fn horizon(&self) -> usize {
        self.means.len().saturating_sub(1)
    }

    pub fn validate(&self, core_dims: [usize; 3], horizon: usize) -> Result<()> {
        if self.means.len() != horizon + 1 || self.vars.len() != horizon + 1 {
            return Err(Error::Shape(format!(
                "posterior has {} means and {} variances, expected {}",
                self.means.len(),
                self.vars.len(),
                horizon + 1
            )));
        }
        if let Some(d) = self
            .means
            .iter()
            .map(Tensor3::dims)
            .find(|d| *d != core_dims)
        {
            return Err(Error::Shape(format!(
                "posterior mean is {d:?}, expected {core_dims:?}"
            )));
        }
        if let Some((t, v)) = self
            .vars
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
        {
            return Err(Error::Domain(format!(
                "posterior variance at t = {t} is {v}, must be positive"
            )));
        }
        Ok(())
    }

    /// Sum over `t` of squared changes in means and variances.
    pub fn squared_change(&self, other: &VariationalPosterior) -> f64 {
        let means: f64 = self
            .means
            .iter()
            .zip(&other.means)
            .map(|(a, b)| {
                a.as_slice()
                    .iter()
                    .zip(b.as_slice())
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
            })
            .sum();
        let vars: f64 = self
            .vars
            .iter()
            .zip(&other.vars)
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        means + vars
    }
}

/// Optimizer settings for [`fit`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Latent dimension `m`.
    pub m: usize,
    /// Maximum number of EM iterations.
    pub max_em_iters: usize,
    /// E-step stopping threshold on the summed squared parameter change per sweep.
    pub e_step_tol: f64,
    pub max_e_sweeps: usize,
    /// Ascent iterations per time block inside one sweep.
    pub block_iters: usize,
    /// Take Newton directions for each E-step block instead of plain gradients.
    pub newton_blocks: bool,
    /// Initial step size of every backtracking line search.
    pub step_size: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    /// Step-size multiplier after an accepted step.
    pub step_growth: f64,
    /// Gradient iterations for `(C1, C2, b)` per M-step.
    pub emission_iters: usize,
    /// Gradient iterations for `(A1, A2, A3)` per M-step.
    pub dynamics_iters: usize,
    /// EM stops once `|ΔELBO| < em_rel_tol · |ELBO|` for `em_patience` iterations in a row.
    pub em_rel_tol: f64,
    pub em_patience: usize,
    pub seed: u64,
    /// Keep the ELBO after every E-step sweep and M-step stage.
    pub record_stages: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            m: 3,
            max_em_iters: 200,
            e_step_tol: 1e-6,
            max_e_sweeps: 50,
            block_iters: 10,
            newton_blocks: true,
            step_size: 1e-2,
            backtrack_factor: 0.5,
            max_backtracks: 30,
            step_growth: 2.0,
            emission_iters: 5,
            dynamics_iters: 20,
            em_rel_tol: 1e-6,
            em_patience: 3,
            seed: 0,
            record_stages: false,
        }
    }
}

impl FitOptions {
    pub fn with_m(mut self, m: usize) -> Self {
        self.m = m;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.m < 1 {
            return fail("latent dimension m must be >= 1");
        }
        if !(self.e_step_tol > 0.0 && self.em_rel_tol > 0.0) {
            return fail("tolerances must be > 0");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return fail("step size must be > 0");
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return fail("backtrack factor must lie in (0, 1)");
        }
        if self.step_growth < 1.0 {
            return fail("step growth must be >= 1");
        }
        if self.max_e_sweeps == 0 || self.block_iters == 0 {
            return fail("E-step iteration caps must be >= 1");
        }
        Ok(())
    }
}

/// Sufficient-increase constant of the Armijo test.
pub(crate) const ARMIJO_C: f64 = 1e-4;

/// Backtracking state shared by all gradient loops.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LineSearch {
    pub step: f64,
    pub factor: f64,
    pub max_backtracks: usize,
    pub growth: f64,
}

impl LineSearch {
    pub fn new(opts: &FitOptions) -> Self {
        Self {
            step: opts.step_size,
            factor: opts.backtrack_factor,
            max_backtracks: opts.max_backtracks,
            growth: opts.step_growth,
        }
    }
}

pub(crate) fn check_model(p: &ModelParams, x: &crate::model::ObservationSeries) -> Result<()> {
    p.validate()?;
    if x.dims() != p.network_dims() {
        return Err(Error::Shape(format!(
            "observations are {:?}, model is {:?}",
            x.dims(),
            p.network_dims()
        )));
    }
    Ok(())
}
