//! M-step: projected gradient ascent for the emission group and gradient
//! ascent plus closed forms for the dynamics group.

use super::elbo::Prepared;
use super::{check_model, FitOptions, LineSearch, VariationalPosterior, ARMIJO_C};
use crate::error::{Error, Result};
use crate::model::{sigmoid, ModelParams, ObservationSeries};
use crate::tensor::{mode_gram, mode_product, tucker3, Mat, Tensor3};

/// Relative gain below which a line search stops backtracking.
const NEGLIGIBLE_GAIN: f64 = 1e-13;

/// Gradient of the emission objective `l_C` with respect to `C1`, `C2` and `b`.
#[derive(Clone, Debug)]
pub struct EmissionGradient {
    pub c1: Mat,
    pub c2: Mat,
    pub b: Tensor3,
}

pub fn emission_gradient(
    p: &ModelParams,
    q: &VariationalPosterior,
    x: &ObservationSeries,
) -> Result<EmissionGradient> {
    check_model(p, x)?;
    q.validate(p.core_dims(), x.len())?;
    Ok(emission_gradient_prepared(&Prepared::new(p), q, x))
}

fn emission_gradient_prepared(
    pre: &Prepared,
    q: &VariationalPosterior,
    x: &ObservationSeries,
) -> EmissionGradient {
    let p = pre.p;
    let (n, m, k) = (p.n(), p.m(), p.k());
    let mut g1 = Mat::zeros(n, m);
    let mut g2 = Mat::zeros(k, k);
    let mut gb = Tensor3::zeros([n, n, k]);
    // Σ_t σ̃_t² p̃_t, the weight of the variance correction
    let mut weighted = Tensor3::zeros([n, n, k]);

    for t in 1..=x.len() {
        let mu = &q.means[t];
        let var = q.vars[t];
        let eta = pre.emit(mu);
        let mut resid = Tensor3::zeros([n, n, k]);
        for ((((w, acc), &xv), &e), &r) in resid
            .as_mut_slice()
            .iter_mut()
            .zip(weighted.as_mut_slice())
            .zip(x.at(t).as_slice())
            .zip(eta.as_slice())
            .zip(pre.row_norms.as_slice())
        {
            let prob = sigmoid(e + 0.5 * var * r);
            *w = xv - prob;
            *acc += var * prob;
        }
        for (g, w) in gb.as_mut_slice().iter_mut().zip(resid.as_slice()) {
            *g += w;
        }

        let lay = mode_product(mu, &p.c2, 3).expect("shapes validated");
        let right = mode_product(&lay, &p.c1, 2).expect("shapes validated");
        let left = mode_product(&lay, &p.c1, 1).expect("shapes validated");
        let both_raw = tucker3(mu, &p.c1, &p.c1, &Mat::identity(k)).expect("shapes validated");
        add_into(
            &mut g1,
            &mode_gram(&resid, &right, 1).expect("shapes validated"),
        );
        add_into(
            &mut g1,
            &mode_gram(&resid, &left, 2).expect("shapes validated"),
        );
        add_into(
            &mut g2,
            &mode_gram(&resid, &both_raw, 3).expect("shapes validated"),
        );
    }

    // derivative of the row norms ‖C_j‖² = ρ2_c ρ1_a ρ1_b
    let r1 = p.c1.row_norms_sq();
    let r2 = p.c2.row_norms_sq();
    let mut node_w = vec![0.0; n];
    let mut layer_w = vec![0.0; k];
    for c in 0..k {
        for b in 0..n {
            for a in 0..n {
                let v = weighted.get(a, b, c);
                node_w[a] += v * r2[c] * r1[b];
                node_w[b] += v * r2[c] * r1[a];
                layer_w[c] += v * r1[a] * r1[b];
            }
        }
    }
    for i in 0..n {
        for l in 0..m {
            g1[(i, l)] -= p.c1[(i, l)] * node_w[i];
        }
    }
    for c in 0..k {
        for l in 0..k {
            g2[(c, l)] -= p.c2[(c, l)] * layer_w[c];
        }
    }
    EmissionGradient {
        c1: g1,
        c2: g2,
        b: gb,
    }
}

fn add_into(acc: &mut Mat, other: &Mat) {
    for (a, b) in acc.as_mut_slice().iter_mut().zip(other.as_slice()) {
        *a += b;
    }
}

#[derive(Clone, Debug)]
pub struct EmissionUpdate {
    pub c1: Mat,
    pub c2: Mat,
    pub b: Tensor3,
    pub objective_before: f64,
    pub objective_after: f64,
}

fn observation_bound(p: &ModelParams, q: &VariationalPosterior, x: &ObservationSeries) -> f64 {
    let pre = Prepared::new(p);
    (1..=x.len())
        .map(|t| pre.obs_bound(x.at(t), &pre.emit(&q.means[t]), q.vars[t]))
        .sum()
}

#[derive(Clone, Copy)]
enum EmissionBlock {
    C1,
    C2,
    Bias,
}

/// Ascends `l_C` over `(C1, C2, b)`, one backtracking step per block and
/// iteration. `C1` steps are projected onto the nonnegative orthant.
pub fn m_step_emission(
    q: &VariationalPosterior,
    x: &ObservationSeries,
    p: &ModelParams,
    opts: &FitOptions,
) -> Result<EmissionUpdate> {
    check_model(p, x)?;
    q.validate(p.core_dims(), x.len())?;
    let mut cur = p.clone();
    let before = observation_bound(&cur, q, x);
    if !before.is_finite() {
        return Err(Error::Numerical("emission objective is not finite".into()));
    }
    let mut value = before;
    let mut searches = [LineSearch::new(opts); 3];
    for _ in 0..opts.emission_iters {
        let mut moved = false;
        for (slot, block) in [EmissionBlock::C1, EmissionBlock::C2, EmissionBlock::Bias]
            .into_iter()
            .enumerate()
        {
            let grad = emission_gradient_prepared(&Prepared::new(&cur), q, x);
            let search = &mut searches[slot];
            let mut step = search.step;
            let mut accepted = false;
            for _ in 0..=search.max_backtracks {
                let mut cand = cur.clone();
                let ascent = match block {
                    EmissionBlock::C1 => {
                        cand.c1 = cur.c1.add_scaled(&grad.c1, step)?.map(|v| v.max(0.0));
                        grad.c1.dot(&cand.c1.add_scaled(&cur.c1, -1.0)?)
                    }
                    EmissionBlock::C2 => {
                        cand.c2 = cur.c2.add_scaled(&grad.c2, step)?;
                        step * grad.c2.frob_sq()
                    }
                    EmissionBlock::Bias => {
                        cand.b = cur.b.add_scaled(&grad.b, step)?;
                        step * grad.b.frob_sq()
                    }
                };
                // below this gain the Armijo test only sees rounding noise
                if ascent <= NEGLIGIBLE_GAIN * value.abs().max(1.0) {
                    break;
                }
                let f = observation_bound(&cand, q, x);
                if f.is_finite() && f >= value + ARMIJO_C * ascent {
                    cur = cand;
                    value = f;
                    accepted = true;
                    search.step = step * search.growth;
                    break;
                }
                step *= search.factor;
            }
            if !accepted {
                search.step = step.max(f64::MIN_POSITIVE);
            }
            moved |= accepted;
        }
        if !moved {
            break;
        }
    }
    Ok(EmissionUpdate {
        c1: cur.c1,
        c2: cur.c2,
        b: cur.b,
        objective_before: before,
        objective_after: value,
    })
}

/// `l_3(A1, A2, A3) = -½ Σ_t ‖μ̃_t − A μ̃_{t−1}‖² − ½ tr(A Aᵀ) Σ_t σ̃²_{t−1}`.
pub fn dynamics_objective(a: [&Mat; 3], q: &VariationalPosterior) -> Result<f64> {
    let mut value = 0.0;
    for t in 1..q.means.len() {
        let pred = tucker3(&q.means[t - 1], a[0], a[1], a[2])?;
        value -= 0.5 * q.means[t].add_scaled(&pred, -1.0)?.frob_sq();
    }
    let frob = a[0].frob_sq() * a[1].frob_sq() * a[2].frob_sq();
    let var_sum: f64 = q.vars[..q.vars.len().saturating_sub(1)].iter().sum();
    Ok(value - 0.5 * frob * var_sum)
}

/// Gradients of [`dynamics_objective`] with respect to `A1`, `A2`, `A3`.
pub fn dynamics_gradient(a: [&Mat; 3], q: &VariationalPosterior) -> Result<[Mat; 3]> {
    let mut g = [
        Mat::zeros(a[0].rows(), a[0].cols()),
        Mat::zeros(a[1].rows(), a[1].cols()),
        Mat::zeros(a[2].rows(), a[2].cols()),
    ];
    for t in 1..q.means.len() {
        let prev = &q.means[t - 1];
        let resid = q.means[t].add_scaled(&tucker3(prev, a[0], a[1], a[2])?, -1.0)?;
        let p1 = mode_product(&mode_product(prev, a[1], 2)?, a[2], 3)?;
        let p2 = mode_product(&mode_product(prev, a[0], 1)?, a[2], 3)?;
        let p3 = mode_product(&mode_product(prev, a[0], 1)?, a[1], 2)?;
        add_into(&mut g[0], &mode_gram(&resid, &p1, 1)?);
        add_into(&mut g[1], &mode_gram(&resid, &p2, 2)?);
        add_into(&mut g[2], &mode_gram(&resid, &p3, 3)?);
    }
    let var_sum: f64 = q.vars[..q.vars.len().saturating_sub(1)].iter().sum();
    let norms = [a[0].frob_sq(), a[1].frob_sq(), a[2].frob_sq()];
    for i in 0..3 {
        let others: f64 = (0..3).filter(|&j| j != i).map(|j| norms[j]).product();
        g[i] = g[i].add_scaled(a[i], -var_sum * others)?;
    }
    Ok(g)
}

#[derive(Clone, Debug)]
pub struct DynamicsUpdate {
    pub a1: Mat,
    pub a2: Mat,
    pub a3: Mat,
    pub u0: Tensor3,
    pub omega2: f64,
    pub sigma2: f64,
    /// Set when `T = 0`: the transitions and `σ²` were left unchanged.
    pub skipped: bool,
}

impl DynamicsUpdate {
    pub fn apply(self, p: &mut ModelParams) {
        p.a1 = self.a1;
        p.a2 = self.a2;
        p.a3 = self.a3;
        p.u0 = self.u0;
        p.omega2 = self.omega2;
        p.sigma2 = self.sigma2;
    }
}

/// Gradient ascent on `l_3` for the transitions, then the closed forms
/// `u0 = μ̃_0`, `ω² = σ̃_0²` and
/// `σ² = Σ_t (‖μ̃_t − A μ̃_{t−1}‖² + m²K σ̃_t² + tr(A Aᵀ) σ̃²_{t−1}) / (T m²K)`.
pub fn m_step_dynamics(
    q: &VariationalPosterior,
    p: &ModelParams,
    opts: &FitOptions,
) -> Result<DynamicsUpdate> {
    q.validate(p.core_dims(), q.horizon())?;
    let horizon = q.horizon();
    let d = p.latent_len() as f64;
    let u0 = q.means[0].clone();
    let omega2 = q.vars[0];
    if horizon == 0 {
        return Ok(DynamicsUpdate {
            a1: p.a1.clone(),
            a2: p.a2.clone(),
            a3: p.a3.clone(),
            u0,
            omega2,
            sigma2: p.sigma2,
            skipped: true,
        });
    }

    let mut a = [p.a1.clone(), p.a2.clone(), p.a3.clone()];
    let mut value = dynamics_objective([&a[0], &a[1], &a[2]], q)?;
    if !value.is_finite() {
        return Err(Error::Numerical("dynamics objective is not finite".into()));
    }
    let mut searches = [LineSearch::new(opts); 3];
    for _ in 0..opts.dynamics_iters {
        let mut moved = false;
        for i in 0..3 {
            let grad = dynamics_gradient([&a[0], &a[1], &a[2]], q)?;
            let gnorm2 = grad[i].frob_sq();
            if gnorm2 == 0.0 {
                continue;
            }
            let search = &mut searches[i];
            let mut step = search.step;
            let mut accepted = false;
            for _ in 0..=search.max_backtracks {
                if step * gnorm2 <= NEGLIGIBLE_GAIN * value.abs().max(1.0) {
                    break;
                }
                let mut cand = a.clone();
                cand[i] = a[i].add_scaled(&grad[i], step)?;
                let f = dynamics_objective([&cand[0], &cand[1], &cand[2]], q)?;
                if f.is_finite() && f >= value + ARMIJO_C * step * gnorm2 {
                    a = cand;
                    value = f;
                    accepted = true;
                    search.step = step * search.growth;
                    break;
                }
                step *= search.factor;
            }
            if !accepted {
                search.step = step.max(f64::MIN_POSITIVE);
            }
            moved |= accepted;
        }
        if !moved {
            break;
        }
    }

    let [a1, a2, a3] = a;
    let frob = a1.frob_sq() * a2.frob_sq() * a3.frob_sq();
    let mut total = 0.0;
    for t in 1..=horizon {
        let pred = tucker3(&q.means[t - 1], &a1, &a2, &a3)?;
        total +=
            q.means[t].add_scaled(&pred, -1.0)?.frob_sq() + d * q.vars[t] + frob * q.vars[t - 1];
    }
    let sigma2 = total / (horizon as f64 * d);
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::Numerical(format!(
            "innovation variance update gave {sigma2}"
        )));
    }
    Ok(DynamicsUpdate {
        a1,
        a2,
        a3,
        u0,
        omega2,
        sigma2,
        skipped: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{elbo_terms, emission_objective};
    use crate::model::tests::random_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(seed: u64) -> (ModelParams, ObservationSeries, VariationalPosterior) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=3);
        let m = rng.random_range(1..=2);
        let k = rng.random_range(1..=2);
        let horizon = rng.random_range(1..=3);
        let p = random_params(&mut rng, n, m, k);
        let x = ObservationSeries::new(
            n,
            k,
            (0..horizon)
                .map(|_| {
                    Tensor3::from_fn([n, n, k], |_, _, _| {
                        f64::from(u8::from(rng.random_bool(0.5)))
                    })
                })
                .collect(),
        )
        .unwrap();
        let q = VariationalPosterior {
            means: (0..=horizon)
                .map(|_| Tensor3::from_fn([m, m, k], |_, _, _| rng.random_range(-1.0..1.0)))
                .collect(),
            vars: (0..=horizon).map(|_| rng.random_range(0.05..1.0)).collect(),
        };
        (p, x, q)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn emission_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let (p, x, q) = instance(seed);
            let g = emission_gradient(&p, &q, &x).unwrap();
            let h = 1e-6;
            let f = |pp: &ModelParams| emission_objective(pp, &q, &x).unwrap();
            for idx in 0..p.c1.as_slice().len() {
                let (mut pp, mut pm) = (p.clone(), p.clone());
                pp.c1.as_mut_slice()[idx] += h;
                // central differences may step below zero; the objective is defined there
                pm.c1.as_mut_slice()[idx] -= h;
                let fd = (f(&pp) - f(&pm)) / (2.0 * h);
                let pm_ok = pm.c1.as_slice()[idx] >= 0.0;
                let fd = if pm_ok { fd } else { (f(&pp) - f(&p)) / h };
                assert!(rel_err(g.c1.as_slice()[idx], fd) < 1e-4, "c1 seed {seed}");
            }
            for idx in 0..p.c2.as_slice().len() {
                let (mut pp, mut pm) = (p.clone(), p.clone());
                pp.c2.as_mut_slice()[idx] += h;
                pm.c2.as_mut_slice()[idx] -= h;
                let fd = (f(&pp) - f(&pm)) / (2.0 * h);
                assert!(rel_err(g.c2.as_slice()[idx], fd) < 1e-4, "c2 seed {seed}");
            }
            for idx in 0..p.b.len() {
                let (mut pp, mut pm) = (p.clone(), p.clone());
                pp.b.as_mut_slice()[idx] += h;
                pm.b.as_mut_slice()[idx] -= h;
                let fd = (f(&pp) - f(&pm)) / (2.0 * h);
                assert!(rel_err(g.b.as_slice()[idx], fd) < 1e-4, "b seed {seed}");
            }
        }
    }

    #[test]
    fn dynamics_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(&mut rng, 3, 2, 2);
        let q = VariationalPosterior {
            means: (0..4)
                .map(|_| Tensor3::from_fn([2, 2, 2], |_, _, _| rng.random_range(-1.0..1.0)))
                .collect(),
            vars: (0..4).map(|_| rng.random_range(0.05..1.0)).collect(),
        };
        let a = [p.a1.clone(), p.a2.clone(), p.a3.clone()];
        let g = dynamics_gradient([&a[0], &a[1], &a[2]], &q).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for idx in 0..a[i].as_slice().len() {
                let (mut ap, mut am) = (a.clone(), a.clone());
                ap[i].as_mut_slice()[idx] += h;
                am[i].as_mut_slice()[idx] -= h;
                let fd = (dynamics_objective([&ap[0], &ap[1], &ap[2]], &q).unwrap()
                    - dynamics_objective([&am[0], &am[1], &am[2]], &q).unwrap())
                    / (2.0 * h);
                assert!(rel_err(g[i].as_slice()[idx], fd) < 1e-4);
            }
        }
    }

    #[test]
    fn projection_zeroes_negative_entries_and_objective_rises() {
        for seed in 0..10 {
            let (mut p, x, q) = instance(50 + seed);
            p.c1 = p.c1.map(|v| v * 0.01);
            let opts = FitOptions {
                emission_iters: 20,
                step_size: 10.0,
                ..FitOptions::default()
            };
            let up = m_step_emission(&q, &x, &p, &opts).unwrap();
            assert!(up.c1.as_slice().iter().all(|&v| v >= 0.0));
            assert!(up.objective_after >= up.objective_before);
        }
    }

    #[test]
    fn stationary_emission_is_unchanged() {
        let (p, x, q) = instance(5);
        let opts = FitOptions {
            emission_iters: 3000,
            ..FitOptions::default()
        };
        let up = m_step_emission(&q, &x, &p, &opts).unwrap();
        let mut p2 = p.clone();
        p2.c1 = up.c1.clone();
        p2.c2 = up.c2.clone();
        p2.b = up.b.clone();
        let again = m_step_emission(&q, &x, &p2, &FitOptions::default()).unwrap();
        assert!(again.objective_after - again.objective_before < 1e-6);
        assert!(again.c2.max_abs_diff(&p2.c2) < 1e-3);
        assert!(again.b.max_abs_diff(&p2.b) < 1e-3);
    }

    #[test]
    fn zero_mean_posterior_shrinks_transitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_params(&mut rng, 3, 2, 2);
        let horizon = 5;
        let q = VariationalPosterior {
            means: vec![Tensor3::zeros([2, 2, 2]); horizon + 1],
            vars: (0..=horizon).map(|_| rng.random_range(0.1..0.5)).collect(),
        };
        let opts = FitOptions {
            dynamics_iters: 500,
            ..FitOptions::default()
        };
        let up = m_step_dynamics(&q, &p, &opts).unwrap();
        let before = p.transition_frob_sq();
        let after = up.a1.frob_sq() * up.a2.frob_sq() * up.a3.frob_sq();
        assert!(after < before * 1e-2, "{after} vs {before}");
        let d = 8.0;
        let want: f64 = (1..=horizon)
            .map(|t| d * q.vars[t] + after * q.vars[t - 1])
            .sum::<f64>()
            / (horizon as f64 * d);
        assert!((up.sigma2 - want).abs() < 1e-12);
        let base: f64 = (1..=horizon).map(|t| q.vars[t]).sum::<f64>() / horizon as f64;
        assert!((up.sigma2 - base).abs() < 1e-2 * base);
        assert_eq!(up.u0, q.means[0]);
        assert_eq!(up.omega2, q.vars[0]);
    }

    #[test]
    fn closed_forms_maximize_prior_term() {
        for seed in 0..5 {
            let (p, x, q) = instance(200 + seed);
            let up = m_step_dynamics(&q, &p, &FitOptions::default()).unwrap();
            let mut best = p.clone();
            up.apply(&mut best);
            let base = elbo_terms(&best, &q, &x).unwrap().prior;
            for eps in [1e-3, -1e-3] {
                let mut v = best.clone();
                v.sigma2 *= 1.0 + eps;
                assert!(elbo_terms(&v, &q, &x).unwrap().prior <= base);
                let mut v = best.clone();
                v.omega2 *= 1.0 + eps;
                assert!(elbo_terms(&v, &q, &x).unwrap().prior <= base);
                let mut v = best.clone();
                v.u0.as_mut_slice()[0] += eps;
                assert!(elbo_terms(&v, &q, &x).unwrap().prior <= base);
            }
        }
    }

    #[test]
    fn dynamics_loop_is_monotone() {
        let (p, _, q) = instance(21);
        let a = [p.a1.clone(), p.a2.clone(), p.a3.clone()];
        let before = dynamics_objective([&a[0], &a[1], &a[2]], &q).unwrap();
        let up = m_step_dynamics(&q, &p, &FitOptions::default()).unwrap();
        let after = dynamics_objective([&up.a1, &up.a2, &up.a3], &q).unwrap();
        assert!(after >= before);
    }

    #[test]
    fn no_observations_skips_dynamics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_params(&mut rng, 2, 1, 1);
        let q = VariationalPosterior::constant([1, 1, 1], 0, 0.4, 0.3);
        let up = m_step_dynamics(&q, &p, &FitOptions::default()).unwrap();
        assert!(up.skipped);
        assert_eq!(up.sigma2, p.sigma2);
        assert_eq!(up.omega2, 0.3);
    }
}
