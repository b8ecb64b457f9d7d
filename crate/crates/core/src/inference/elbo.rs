use std::cell::OnceCell;
use std::f64::consts::PI;

use nalgebra::DMatrix;

use super::{check_model, VariationalPosterior};
use crate::error::Result;
use crate::model::{softplus, ModelParams, ObservationSeries};
use crate::tensor::{kron, tucker3, Mat, Tensor3};

/// Quantities derived once per parameter set and reused by every objective
/// and gradient evaluation.
pub struct Prepared<'a> {
    pub p: &'a ModelParams,
    /// Squared row norms `C_j C_jᵀ` of `C = C2 ⊗ C1 ⊗ C1`, shaped `n x n x K`.
    pub row_norms: Tensor3,
    /// `tr(A Aᵀ)` for `A = A3 ⊗ A2 ⊗ A1`.
    pub a_frob: f64,
    pub d: usize,
    c1t: Mat,
    c2t: Mat,
    a1t: Mat,
    a2t: Mat,
    a3t: Mat,
    transition_gram: OnceCell<DMatrix<f64>>,
}

impl<'a> Prepared<'a> {
    pub fn new(p: &'a ModelParams) -> Self {
        Self {
            p,
            row_norms: p.emission_row_norms(),
            a_frob: p.transition_frob_sq(),
            d: p.latent_len(),
            c1t: p.c1.transpose(),
            c2t: p.c2.transpose(),
            a1t: p.a1.transpose(),
            a2t: p.a2.transpose(),
            a3t: p.a3.transpose(),
            transition_gram: OnceCell::new(),
        }
    }

    /// `Cᵀ diag(w) C` for `C = C2 ⊗ C1 ⊗ C1`, contracting one factor at a time.
    pub fn emission_weighted_gram(&self, w: &[f64]) -> DMatrix<f64> {
        let (c1, c2) = (&self.p.c1, &self.p.c2);
        let (n, m, k) = (c1.rows(), c1.cols(), c2.rows());
        let mm = m * m;
        // first node mode: t1[(x, x'), b, c]
        let mut t1 = vec![0.0; mm * n * k];
        for bc in 0..n * k {
            let cell = &w[bc * n..(bc + 1) * n];
            let out = &mut t1[bc * mm..(bc + 1) * mm];
            for (a, &wv) in cell.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let row = c1.row(a);
                for x in 0..m {
                    let s = wv * row[x];
                    for xp in 0..m {
                        out[x * m + xp] += s * row[xp];
                    }
                }
            }
        }
        // second node mode: t2[(x, x'), (y, y'), c]
        let mut t2 = vec![0.0; mm * mm * k];
        for c in 0..k {
            for b in 0..n {
                let src = &t1[(b + n * c) * mm..(b + n * c + 1) * mm];
                let row = c1.row(b);
                for y in 0..m {
                    for yp in 0..m {
                        let s = row[y] * row[yp];
                        if s == 0.0 {
                            continue;
                        }
                        let dst =
                            &mut t2[((y * m + yp) + mm * c) * mm..((y * m + yp) + mm * c + 1) * mm];
                        for (d, v) in dst.iter_mut().zip(src) {
                            *d += s * v;
                        }
                    }
                }
            }
        }
        // layer mode, then scatter into vec order l = x + m (y + m z)
        let d = mm * k;
        let mut h = DMatrix::zeros(d, d);
        for c in 0..k {
            let row = c2.row(c);
            for z in 0..k {
                for zp in 0..k {
                    let s = row[z] * row[zp];
                    if s == 0.0 {
                        continue;
                    }
                    for y in 0..m {
                        for yp in 0..m {
                            let src =
                                &t2[((y * m + yp) + mm * c) * mm..((y * m + yp) + mm * c + 1) * mm];
                            for x in 0..m {
                                for xp in 0..m {
                                    h[(x + m * (y + m * z), xp + m * (yp + m * zp))] +=
                                        s * src[x * m + xp];
                                }
                            }
                        }
                    }
                }
            }
        }
        h
    }

    /// `Aᵀ A = A3ᵀA3 ⊗ A2ᵀA2 ⊗ A1ᵀA1`, built on first use.
    pub fn transition_gram(&self) -> &DMatrix<f64> {
        self.transition_gram.get_or_init(|| {
            let gram = |t: &Mat, a: &Mat| t.matmul(a).expect("square factors");
            let g = kron(
                &kron(&gram(&self.a3t, &self.p.a3), &gram(&self.a2t, &self.p.a2)),
                &gram(&self.a1t, &self.p.a1),
            );
            g.to_nalgebra()
        })
    }

    /// `C μ + b` as an `n x n x K` tensor.
    pub fn emit(&self, mu: &Tensor3) -> Tensor3 {
        let mut eta =
            tucker3(mu, &self.p.c1, &self.p.c1, &self.p.c2).expect("shape checked at construction");
        for (e, b) in eta.as_mut_slice().iter_mut().zip(self.p.b.as_slice()) {
            *e += b;
        }
        eta
    }

    /// `Cᵀ w`.
    pub fn emit_adjoint(&self, w: &Tensor3) -> Tensor3 {
        tucker3(w, &self.c1t, &self.c1t, &self.c2t).expect("shape checked at construction")
    }

    /// `A μ`.
    pub fn advance(&self, mu: &Tensor3) -> Tensor3 {
        tucker3(mu, &self.p.a1, &self.p.a2, &self.p.a3).expect("shape checked at construction")
    }

    /// `Aᵀ v`.
    pub fn advance_adjoint(&self, v: &Tensor3) -> Tensor3 {
        tucker3(v, &self.a1t, &self.a2t, &self.a3t).expect("shape checked at construction")
    }

    /// Jensen bound of `E_q log p(x_t | z_t)` given `η = C μ̃_t + b`:
    /// `Σ_j x_j η_j - log(1 + exp(η_j + σ̃_t² C_j C_jᵀ / 2))`.
    pub fn obs_bound(&self, x: &Tensor3, eta: &Tensor3, var: f64) -> f64 {
        x.as_slice()
            .iter()
            .zip(eta.as_slice())
            .zip(self.row_norms.as_slice())
            .map(|((&x, &e), &r)| x * e - softplus(e + 0.5 * var * r))
            .sum()
    }
}

/// The three parts of the lower-bounded ELBO.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    /// Jensen bound on `E_q log p(X | Z)`.
    pub observation: f64,
    /// `E_q log p(Z | Θ)`, normalizing constants included.
    pub prior: f64,
    /// `-E_q log q(Z)`.
    pub entropy: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.observation + self.prior + self.entropy
    }
}

pub(crate) fn gaussian_expectation(sq_dist: f64, trace: f64, d: usize, var: f64) -> f64 {
    -0.5 * d as f64 * (2.0 * PI * var).ln() - (sq_dist + trace) / (2.0 * var)
}

pub(crate) fn entropy(d: usize, var: f64) -> f64 {
    0.5 * d as f64 * (1.0 + (2.0 * PI * var).ln())
}

pub(crate) fn terms_prepared(
    pre: &Prepared,
    q: &VariationalPosterior,
    x: &ObservationSeries,
) -> ElboTerms {
    let p = pre.p;
    let d = pre.d;
    let horizon = x.len();
    let df = d as f64;

    let mut observation = 0.0;
    for t in 1..=horizon {
        observation += pre.obs_bound(x.at(t), &pre.emit(&q.means[t]), q.vars[t]);
    }

    let init_dist: f64 = q.means[0]
        .as_slice()
        .iter()
        .zip(p.u0.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let mut prior = gaussian_expectation(init_dist, df * q.vars[0], d, p.omega2);
    for t in 1..=horizon {
        let pred = pre.advance(&q.means[t - 1]);
        let dist: f64 = q.means[t]
            .as_slice()
            .iter()
            .zip(pred.as_slice())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        prior += gaussian_expectation(
            dist,
            df * q.vars[t] + pre.a_frob * q.vars[t - 1],
            d,
            p.sigma2,
        );
    }

    let entropy = q.vars.iter().map(|&v| entropy(d, v)).sum();
    ElboTerms {
        observation,
        prior,
        entropy,
    }
}

pub fn elbo_terms(
    p: &ModelParams,
    q: &VariationalPosterior,
    x: &ObservationSeries,
) -> Result<ElboTerms> {
    check_model(p, x)?;
    q.validate(p.core_dims(), x.len())?;
    Ok(terms_prepared(&Prepared::new(p), q, x))
}

/// Lower-bounded ELBO: observation bound + `E_q log p(Z | Θ)` − `E_q log q(Z)`.
pub fn elbo_lower_bound(
    p: &ModelParams,
    q: &VariationalPosterior,
    x: &ObservationSeries,
) -> Result<f64> {
    Ok(elbo_terms(p, q, x)?.total())
}

/// Emission objective `l_C(C1, C2, b)`: the observation bound alone.
pub fn emission_objective(
    p: &ModelParams,
    q: &VariationalPosterior,
    x: &ObservationSeries,
) -> Result<f64> {
    Ok(elbo_terms(p, q, x)?.observation)
}
