//! Blocked coordinate ascent over the per-time posterior factors.

use super::elbo::{terms_prepared, Prepared};
use super::{check_model, FitOptions, LineSearch, VariationalPosterior, ARMIJO_C};
use crate::error::{Error, Result};
use crate::model::{sigmoid, softplus_sigmoid, ObservationSeries};
use crate::tensor::Tensor3;
use nalgebra::{DMatrix, DVector};

/// Log-variances are kept inside this range so `exp` never overflows.
const LOG_VAR_BOUNDS: (f64, f64) = (-60.0, 60.0);
/// Cheap 1-D steps on the log-variance per block iteration.
const VAR_STEPS: usize = 4;
/// A block stops early once one iteration gains less than this, relative to its value.
const BLOCK_REL_TOL: f64 = 1e-13;
/// Variance steps stop once a log-space step is this small.
const VAR_STEP_TOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct EStepReport {
    pub posterior: VariationalPosterior,
    pub sweeps: usize,
    pub converged: bool,
    /// ELBO after each sweep, when `FitOptions::record_stages` is set.
    pub sweep_elbos: Vec<f64>,
}

/// Terms of the ELBO that involve `(μ̃_t, σ̃_t²)` for one `t`.
struct Block<'a> {
    pre: &'a Prepared<'a>,
    t: usize,
    x: Option<&'a Tensor3>,
    /// `A μ̃_{t-1}` when `t >= 1`.
    prev_pred: Option<Tensor3>,
    /// `μ̃_{t+1}` when `t < T`.
    next: Option<Tensor3>,
}

struct BlockEval {
    value: f64,
    grad_mu: Tensor3,
    /// Derivative with respect to the variance itself.
    grad_var: f64,
    obs: Option<ObsPart>,
}

/// `η = C μ + b` and the smoothed probabilities `sigmoid(η + σ² r / 2)`.
struct ObsPart {
    eta: Tensor3,
    probs: Vec<f64>,
}

impl<'a> Block<'a> {
    fn new(
        pre: &'a Prepared<'a>,
        q: &VariationalPosterior,
        x: &'a ObservationSeries,
        t: usize,
    ) -> Self {
        let horizon = x.len();
        Self {
            pre,
            t,
            x: (t >= 1).then(|| x.at(t)),
            prev_pred: (t >= 1).then(|| pre.advance(&q.means[t - 1])),
            next: (t < horizon).then(|| q.means[t + 1].clone()),
        }
    }

    /// Everything except the observation term, which depends on `η = C μ + b`.
    fn gaussian_value(&self, mu: &Tensor3, var: f64) -> f64 {
        let p = self.pre.p;
        let df = self.pre.d as f64;
        let mut f = 0.5 * df * var.ln();
        if self.t == 0 {
            let dist = sq_dist(mu, &p.u0);
            f -= (dist + df * var) / (2.0 * p.omega2);
        }
        if let Some(pred) = &self.prev_pred {
            f -= (sq_dist(mu, pred) + df * var) / (2.0 * p.sigma2);
        }
        if let Some(next) = &self.next {
            let adv = self.pre.advance(mu);
            f -= (sq_dist(next, &adv) + self.pre.a_frob * var) / (2.0 * p.sigma2);
        }
        f
    }

    fn obs_value(&self, eta: &Tensor3, var: f64) -> f64 {
        self.x.map_or(0.0, |x| self.pre.obs_bound(x, eta, var))
    }

    fn obs_value_opt(&self, eta: Option<&Tensor3>, var: f64) -> f64 {
        eta.map_or(0.0, |e| self.obs_value(e, var))
    }

    /// Value as a function of the variance only, with `η` already computed.
    fn value_at_var(&self, eta: Option<&Tensor3>, gauss_mu_part: f64, var: f64) -> f64 {
        let p = self.pre.p;
        let df = self.pre.d as f64;
        let mut f = gauss_mu_part + 0.5 * df * var.ln();
        if self.t == 0 {
            f -= df * var / (2.0 * p.omega2);
        }
        if self.prev_pred.is_some() {
            f -= df * var / (2.0 * p.sigma2);
        }
        if self.next.is_some() {
            f -= self.pre.a_frob * var / (2.0 * p.sigma2);
        }
        f + self.obs_value_opt(eta, var)
    }

    /// Mean-dependent part of the Gaussian terms (variance set to zero, no log term).
    fn gaussian_mu_part(&self, mu: &Tensor3) -> f64 {
        let p = self.pre.p;
        let mut f = 0.0;
        if self.t == 0 {
            f -= sq_dist(mu, &p.u0) / (2.0 * p.omega2);
        }
        if let Some(pred) = &self.prev_pred {
            f -= sq_dist(mu, pred) / (2.0 * p.sigma2);
        }
        if let Some(next) = &self.next {
            f -= sq_dist(next, &self.pre.advance(mu)) / (2.0 * p.sigma2);
        }
        f
    }

    /// First and second derivatives of the block objective in the variance.
    fn var_derivatives(&self, eta: Option<&Tensor3>, var: f64) -> (f64, f64) {
        let p = self.pre.p;
        let df = self.pre.d as f64;
        let mut g = 0.5 * df / var;
        let mut h = -0.5 * df / (var * var);
        if self.t == 0 {
            g -= df / (2.0 * p.omega2);
        }
        if self.prev_pred.is_some() {
            g -= df / (2.0 * p.sigma2);
        }
        if self.next.is_some() {
            g -= self.pre.a_frob / (2.0 * p.sigma2);
        }
        if let Some(eta) = eta {
            let (mut s1, mut s2) = (0.0, 0.0);
            for (&e, &r) in eta.as_slice().iter().zip(self.pre.row_norms.as_slice()) {
                let pr = sigmoid(e + 0.5 * var * r);
                s1 += r * pr;
                s2 += r * r * pr * (1.0 - pr);
            }
            g -= 0.5 * s1;
            h -= 0.25 * s2;
        }
        (g, h)
    }

    fn eval(&self, mu: &Tensor3, var: f64) -> BlockEval {
        let p = self.pre.p;
        let dims = mu.dims();
        let mut grad_mu = Tensor3::zeros(dims);
        let mut value = 0.5 * self.pre.d as f64 * var.ln();
        let mut obs_part = None;

        if let Some(x) = self.x {
            let eta = self.pre.emit(mu);
            let mut resid = Tensor3::zeros(eta.dims());
            let mut probs = Vec::with_capacity(eta.len());
            let mut obs = 0.0;
            for (((w, &xv), &e), &r) in resid
                .as_mut_slice()
                .iter_mut()
                .zip(x.as_slice())
                .zip(eta.as_slice())
                .zip(self.pre.row_norms.as_slice())
            {
                let (sp, pr) = softplus_sigmoid(e + 0.5 * var * r);
                obs += xv * e - sp;
                *w = xv - pr;
                probs.push(pr);
            }
            value += obs;
            grad_mu = self.pre.emit_adjoint(&resid);
            obs_part = Some(ObsPart { eta, probs });
        }

        let df = self.pre.d as f64;
        let mut grad_var = 0.5 * df / var;
        if self.t == 0 {
            value -= (sq_dist(mu, &p.u0) + df * var) / (2.0 * p.omega2);
            axpy_diff(&mut grad_mu, mu, &p.u0, -1.0 / p.omega2);
            grad_var -= df / (2.0 * p.omega2);
        }
        if let Some(pred) = &self.prev_pred {
            value -= (sq_dist(mu, pred) + df * var) / (2.0 * p.sigma2);
            axpy_diff(&mut grad_mu, mu, pred, -1.0 / p.sigma2);
            grad_var -= df / (2.0 * p.sigma2);
        }
        if let Some(next) = &self.next {
            let adv = self.pre.advance(mu);
            value -= (sq_dist(next, &adv) + self.pre.a_frob * var) / (2.0 * p.sigma2);
            let mut resid = next.clone();
            for (r, a) in resid.as_mut_slice().iter_mut().zip(adv.as_slice()) {
                *r -= a;
            }
            let back = self.pre.advance_adjoint(&resid);
            for (g, b) in grad_mu.as_mut_slice().iter_mut().zip(back.as_slice()) {
                *g += b / p.sigma2;
            }
            grad_var -= self.pre.a_frob / (2.0 * p.sigma2);
        }
        if let Some(obs) = &obs_part {
            let s: f64 = obs
                .probs
                .iter()
                .zip(self.pre.row_norms.as_slice())
                .map(|(pr, r)| r * pr)
                .sum();
            grad_var -= 0.5 * s;
        }
        BlockEval {
            value,
            grad_mu,
            grad_var,
            obs: obs_part,
        }
    }

    /// `-∂²f/∂μ∂μᵀ`, positive definite since the block objective is strictly concave in `μ`.
    fn neg_hessian(&self, probs: Option<&[f64]>) -> DMatrix<f64> {
        let p = self.pre.p;
        let d = self.pre.d;
        let mut prec = 0.0;
        if self.t == 0 {
            prec += 1.0 / p.omega2;
        }
        if self.prev_pred.is_some() {
            prec += 1.0 / p.sigma2;
        }
        let mut h = DMatrix::from_diagonal_element(d, d, prec);
        if self.next.is_some() {
            h += self.pre.transition_gram() / p.sigma2;
        }
        if let Some(probs) = probs {
            let w: Vec<f64> = probs.iter().map(|pr| pr * (1.0 - pr)).collect();
            h += self.pre.emission_weighted_gram(&w);
        }
        h
    }

    /// Ascent on `(μ̃_t, log σ̃_t²)`, alternating a mean step and a few 1-D
    /// variance steps; never decreases the block objective.
    fn ascend(
        &self,
        mu: &mut Tensor3,
        var: &mut f64,
        mu_search: &mut LineSearch,
        opts: &FitOptions,
        sweep: usize,
    ) -> Result<()> {
        let mut log_var = var.ln();
        for _ in 0..opts.block_iters {
            let ev = self.eval(mu, *var);
            if !ev.value.is_finite() {
                return Err(self.numerical(sweep, "block objective"));
            }
            if !ev.grad_mu.is_finite() || !ev.grad_var.is_finite() {
                return Err(self.numerical(sweep, "gradient"));
            }
            let start = ev.value;
            let mut current = ev.value;
            let mut moved = false;

            let newton = if opts.newton_blocks {
                let h = self.neg_hessian(ev.obs.as_ref().map(|o| o.probs.as_slice()));
                h.cholesky().map(|ch| {
                    let g = DVector::from_column_slice(ev.grad_mu.as_slice());
                    Tensor3::new(mu.dims(), ch.solve(&g).as_slice().to_vec()).expect("same length")
                })
            } else {
                None
            };
            let (dir, mut step, adaptive) = match &newton {
                Some(dir) => (dir, 1.0, false),
                None => (&ev.grad_mu, mu_search.step, true),
            };
            let slope = ev.grad_mu.dot(dir);
            let mut eta = ev.obs.map(|o| o.eta);
            let tiny = BLOCK_REL_TOL * start.abs().max(1.0);
            if slope > tiny && slope.is_finite() {
                for _ in 0..=mu_search.max_backtracks {
                    let cand = mu.add_scaled(dir, step).expect("same dims");
                    let cand_eta = self.x.map(|_| self.pre.emit(&cand));
                    let f = self.obs_value_opt(cand_eta.as_ref(), *var)
                        + self.gaussian_value(&cand, *var);
                    if f.is_finite() && f >= current + ARMIJO_C * step * slope {
                        *mu = cand;
                        eta = cand_eta;
                        current = f;
                        moved = true;
                        if adaptive {
                            mu_search.step = step * mu_search.growth;
                        }
                        break;
                    }
                    step *= mu_search.factor;
                }
                if !moved && adaptive {
                    mu_search.step = step.max(f64::MIN_POSITIVE);
                }
            }

            // variance: 1-D ascent in log space with η held fixed
            let gauss = self.gaussian_mu_part(mu);
            let mut var_moved = false;
            for _ in 0..VAR_STEPS {
                let (dv, d2v) = self.var_derivatives(eta.as_ref(), *var);
                let g_log = *var * dv;
                if g_log == 0.0 || !g_log.is_finite() {
                    break;
                }
                let h_log = *var * *var * d2v + g_log;
                // Newton when the log-space curvature is negative; otherwise a
                // gradient step scaled by the curvature of d/2·log v near its optimum
                let dir = if opts.newton_blocks && h_log < 0.0 {
                    -g_log / h_log
                } else {
                    2.0 * g_log / self.pre.d.max(1) as f64
                };
                // below this gain the Armijo test only sees rounding noise
                if dir.abs() < VAR_STEP_TOL || g_log * dir <= tiny {
                    break;
                }
                let mut step = 1.0;
                let mut accepted = false;
                for _ in 0..=mu_search.max_backtracks {
                    let cand = (log_var + step * dir).clamp(LOG_VAR_BOUNDS.0, LOG_VAR_BOUNDS.1);
                    let f = self.value_at_var(eta.as_ref(), gauss, cand.exp());
                    if f.is_finite()
                        && f >= current + ARMIJO_C * step * g_log * dir
                        && cand != log_var
                    {
                        log_var = cand;
                        *var = cand.exp();
                        current = f;
                        accepted = true;
                        break;
                    }
                    step *= 0.5;
                }
                if !accepted {
                    break;
                }
                var_moved = true;
            }
            let negligible = current - start <= BLOCK_REL_TOL * start.abs().max(1.0);
            if (!moved && !var_moved) || (opts.newton_blocks && negligible) {
                break;
            }
        }
        Ok(())
    }

    fn numerical(&self, sweep: usize, what: &str) -> Error {
        Error::Numerical(format!(
            "non-finite {what} in E-step (sweep {sweep}, t = {})",
            self.t
        ))
    }
}

fn sq_dist(a: &Tensor3, b: &Tensor3) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).powi(2))
        .sum()
}

/// `g += s · (a - b)`.
fn axpy_diff(g: &mut Tensor3, a: &Tensor3, b: &Tensor3, s: f64) {
    for ((g, x), y) in g
        .as_mut_slice()
        .iter_mut()
        .zip(a.as_slice())
        .zip(b.as_slice())
    {
        *g += s * (x - y);
    }
}

/// Gradient of the lower-bounded ELBO with respect to `μ̃_t` and `σ̃_t²`.
pub fn elbo_block_gradient(
    p: &crate::model::ModelParams,
    q: &VariationalPosterior,
    x: &ObservationSeries,
    t: usize,
) -> Result<(Tensor3, f64)> {
    check_model(p, x)?;
    q.validate(p.core_dims(), x.len())?;
    if t > x.len() {
        return Err(Error::Shape(format!("t = {t} beyond horizon {}", x.len())));
    }
    let pre = Prepared::new(p);
    let block = Block::new(&pre, q, x, t);
    let ev = block.eval(&q.means[t], q.vars[t]);
    Ok((ev.grad_mu, ev.grad_var))
}

/// Runs blocked coordinate ascent from `q0` until the summed squared change
/// of one sweep is at most `opts.e_step_tol` or `opts.max_e_sweeps` is hit.
pub fn e_step(
    p: &crate::model::ModelParams,
    x: &ObservationSeries,
    q0: &VariationalPosterior,
    opts: &FitOptions,
) -> Result<EStepReport> {
    check_model(p, x)?;
    q0.validate(p.core_dims(), x.len())?;
    let pre = Prepared::new(p);
    e_step_prepared(&pre, x, q0, opts)
}

pub(crate) fn e_step_prepared(
    pre: &Prepared,
    x: &ObservationSeries,
    q0: &VariationalPosterior,
    opts: &FitOptions,
) -> Result<EStepReport> {
    let horizon = x.len();
    let mut q = q0.clone();
    let mut searches = vec![LineSearch::new(opts); horizon + 1];
    let mut sweep_elbos = Vec::new();
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < opts.max_e_sweeps {
        let before = q.clone();
        for t in 0..=horizon {
            let block = Block::new(pre, &q, x, t);
            let mut mu = q.means[t].clone();
            let mut var = q.vars[t];
            block.ascend(&mut mu, &mut var, &mut searches[t], opts, sweeps)?;
            q.means[t] = mu;
            q.vars[t] = var;
        }
        sweeps += 1;
        if opts.record_stages {
            sweep_elbos.push(terms_prepared(pre, &q, x).total());
        }
        if q.squared_change(&before) <= opts.e_step_tol {
            converged = true;
            break;
        }
    }
    Ok(EStepReport {
        posterior: q,
        sweeps,
        converged,
        sweep_elbos,
    })
}
