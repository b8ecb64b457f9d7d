//! The EM loop.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::elbo::{terms_prepared, Prepared};
use super::estep::e_step_prepared;
use super::mstep::{m_step_dynamics, m_step_emission};
use super::select::aic_penalty;
use super::{check_model, FitOptions, VariationalPosterior};
use crate::error::{Error, Result};
use crate::model::{check_stationarity, logit, ModelParams, ObservationSeries, StationarityReport};
use crate::simulate::rng_from_seed;
use crate::tensor::{spectral_radius, Mat, Tensor3};

/// Spectral radius that random initial transitions are scaled down to.
const INIT_MAX_RADIUS: f64 = 0.9;
const INIT_FREQ_CLAMP: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// One coordinate-ascent sweep inside the E-step.
    ESweep,
    EStep,
    Emission,
    Dynamics,
}

/// ELBO after one stage of one EM iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub iteration: usize,
    pub stage: Stage,
    pub elbo: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: ModelParams,
    pub posterior: VariationalPosterior,
    /// Lower-bounded ELBO at the end of every EM iteration.
    pub elbo_trace: Vec<f64>,
    pub aic: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Lower-bounded ELBO after the final E-step under the returned parameters.
    pub final_elbo: f64,
    /// Observation bound of the final posterior, the likelihood term of the AIC.
    pub observation_bound: f64,
    pub m: usize,
    pub stages: Vec<StageRecord>,
    pub stationarity: StationarityReport,
    /// Set when `T = 0` and the transitions were never updated.
    pub dynamics_skipped: bool,
}

impl FitResult {
    /// Human-readable warning when the fitted transitions are not stable.
    pub fn stationarity_warning(&self) -> Option<String> {
        (!self.stationarity.stationary).then(|| {
            format!(
                "fitted transitions are not stationary: spectral radii {:?}",
                self.stationarity.radii
            )
        })
    }
}

fn random_scaled(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    let scale = (cols as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        v / scale
    })
}

fn project_radius(a: Mat) -> Result<Mat> {
    let rho = spectral_radius(&a)?;
    Ok(if rho > INIT_MAX_RADIUS {
        a.scale(INIT_MAX_RADIUS / rho)
    } else {
        a
    })
}

/// Starting point for EM: random factors seeded by `opts.seed`, bias from
/// empirical edge frequencies, and a flat posterior.
pub fn initialize(
    x: &ObservationSeries,
    opts: &FitOptions,
) -> Result<(ModelParams, VariationalPosterior)> {
    opts.validate()?;
    let (n, k, m) = (x.n(), x.k(), opts.m);
    let mut rng = rng_from_seed(opts.seed);
    let c1 = Mat::from_fn(n, m, |_, _| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v.abs()
    });
    let c2 = project_radius(random_scaled(k, k, &mut rng))?;
    let a1 = project_radius(random_scaled(m, m, &mut rng))?;
    let a2 = project_radius(random_scaled(m, m, &mut rng))?;
    let a3 = project_radius(random_scaled(k, k, &mut rng))?;

    let mut freq = Tensor3::zeros([n, n, k]);
    for xt in x.tensors() {
        freq = freq.add_scaled(xt, 1.0)?;
    }
    let horizon = x.len().max(1) as f64;
    let b = freq.map(|c| logit((c / horizon).clamp(INIT_FREQ_CLAMP, 1.0 - INIT_FREQ_CLAMP)));

    let params = ModelParams {
        c1,
        c2,
        a1,
        a2,
        a3,
        b,
        u0: Tensor3::zeros([m, m, k]),
        sigma2: 1.0,
        omega2: 1.0,
    };
    let q = VariationalPosterior::constant([m, m, k], x.len(), 0.0, 1.0);
    Ok((params, q))
}

pub fn fit(x: &ObservationSeries, opts: &FitOptions) -> Result<FitResult> {
    let (params, q) = initialize(x, opts)?;
    fit_from(x, params, q, opts)
}

fn at_iteration(iter: usize, e: Error) -> Error {
    match e {
        Error::Numerical(msg) => Error::Numerical(format!("EM iteration {iter}: {msg}")),
        other => other,
    }
}

/// Runs EM from the given parameters and posterior.
pub fn fit_from(
    x: &ObservationSeries,
    params: ModelParams,
    q: VariationalPosterior,
    opts: &FitOptions,
) -> Result<FitResult> {
    opts.validate()?;
    check_model(&params, x)?;
    q.validate(params.core_dims(), x.len())?;
    if params.m() != opts.m {
        return Err(Error::Config(format!(
            "initial parameters have m = {}, options say {}",
            params.m(),
            opts.m
        )));
    }

    let mut p = params;
    let mut q = q;
    let mut trace = Vec::new();
    let mut stages = Vec::new();
    let mut calm = 0;
    let mut converged = false;
    let mut skipped = false;
    let mut iterations = 0;

    while iterations < opts.max_em_iters {
        let iter = iterations + 1;
        let report =
            e_step_prepared(&Prepared::new(&p), x, &q, opts).map_err(|e| at_iteration(iter, e))?;
        q = report.posterior;
        if opts.record_stages {
            for &elbo in &report.sweep_elbos {
                stages.push(StageRecord {
                    iteration: iter,
                    stage: Stage::ESweep,
                    elbo,
                });
            }
            stages.push(StageRecord {
                iteration: iter,
                stage: Stage::EStep,
                elbo: elbo_of(&p, &q, x),
            });
        }

        let em = m_step_emission(&q, x, &p, opts).map_err(|e| at_iteration(iter, e))?;
        p.c1 = em.c1;
        p.c2 = em.c2;
        p.b = em.b;
        if opts.record_stages {
            stages.push(StageRecord {
                iteration: iter,
                stage: Stage::Emission,
                elbo: elbo_of(&p, &q, x),
            });
        }

        let dy = m_step_dynamics(&q, &p, opts).map_err(|e| at_iteration(iter, e))?;
        skipped = dy.skipped;
        dy.apply(&mut p);
        let value = elbo_of(&p, &q, x);
        if opts.record_stages {
            stages.push(StageRecord {
                iteration: iter,
                stage: Stage::Dynamics,
                elbo: value,
            });
        }
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "EM iteration {iter}: ELBO is {value}"
            )));
        }

        iterations = iter;
        if let Some(&last) = trace.last() {
            let change: f64 = value - last;
            if change.abs() < opts.em_rel_tol * value.abs() {
                calm += 1;
            } else {
                calm = 0;
            }
        }
        trace.push(value);
        if calm >= opts.em_patience {
            converged = true;
            break;
        }
    }

    // the AIC uses the expectation under a posterior refreshed for Θ̂
    let pre = Prepared::new(&p);
    let report = e_step_prepared(&pre, x, &q, opts).map_err(|e| at_iteration(iterations + 1, e))?;
    q = report.posterior;
    let terms = terms_prepared(&pre, &q, x);
    let aic = -2.0 * terms.observation + aic_penalty(x.n(), x.k(), opts.m);
    let stationarity = check_stationarity(&p)?;
    Ok(FitResult {
        params: p,
        posterior: q,
        elbo_trace: trace,
        aic,
        iterations,
        converged,
        final_elbo: terms.total(),
        observation_bound: terms.observation,
        m: opts.m,
        stages,
        stationarity,
        dynamics_skipped: skipped,
    })
}

fn elbo_of(p: &ModelParams, q: &VariationalPosterior, x: &ObservationSeries) -> f64 {
    terms_prepared(&Prepared::new(p), q, x).total()
}
