//! The generative model: a Tucker-structured log-odds tensor per time step,
//! driven by a tensor autoregressive latent core.

use std::f64::consts::PI;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{spectral_radius, tucker3, Mat, Tensor3};

/// Full parameter set of the model.
///
/// * `c1`: `n x m` nonnegative node features,
/// * `c2`: `K x K` layer-transition matrix,
/// * `a1`, `a2`: `m x m` outgoing/incoming transitions, `a3`: `K x K` layer transition,
/// * `b`: `n x n x K` static bias, `u0`: `m x m x K` initial core mean,
/// * `sigma2`, `omega2`: innovation and initial-state variances.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub c1: Mat,
    pub c2: Mat,
    pub a1: Mat,
    pub a2: Mat,
    pub a3: Mat,
    pub b: Tensor3,
    pub u0: Tensor3,
    pub sigma2: f64,
    pub omega2: f64,
}

impl ModelParams {
    pub fn n(&self) -> usize {
        self.c1.rows()
    }

    pub fn m(&self) -> usize {
        self.c1.cols()
    }

    pub fn k(&self) -> usize {
        self.c2.rows()
    }

    /// Dimension of the vectorized core, `m²K`.
    pub fn latent_len(&self) -> usize {
        self.m() * self.m() * self.k()
    }

    pub fn core_dims(&self) -> [usize; 3] {
        [self.m(), self.m(), self.k()]
    }

    pub fn network_dims(&self) -> [usize; 3] {
        [self.n(), self.n(), self.k()]
    }

    /// Full check for use in inference: [`Self::validate_structure`] plus positive variances.
    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        if !(self.sigma2 > 0.0 && self.omega2 > 0.0) {
            return Err(Error::Domain(format!(
                "variances must be positive (sigma2 = {}, omega2 = {})",
                self.sigma2, self.omega2
            )));
        }
        Ok(())
    }

    /// Shapes, `c1 >= 0` and finiteness; zero variances (noiseless dynamics) pass.
    pub fn validate_structure(&self) -> Result<()> {
        let (n, m, k) = (self.n(), self.m(), self.k());
        let checks = [
            ("c2", self.c2.shape(), (k, k)),
            ("a1", self.a1.shape(), (m, m)),
            ("a2", self.a2.shape(), (m, m)),
            ("a3", self.a3.shape(), (k, k)),
        ];
        for (name, got, want) in checks {
            if got != want {
                return shape_err(format!("{name} is {got:?}, expected {want:?}"));
            }
        }
        if self.b.dims() != [n, n, k] {
            return shape_err(format!(
                "b is {:?}, expected {:?}",
                self.b.dims(),
                [n, n, k]
            ));
        }
        if self.u0.dims() != [m, m, k] {
            return shape_err(format!(
                "u0 is {:?}, expected {:?}",
                self.u0.dims(),
                [m, m, k]
            ));
        }
        if self.c1.as_slice().iter().any(|&x| x < 0.0) {
            return Err(Error::Domain("c1 has negative entries".into()));
        }
        if self.sigma2 < 0.0 || self.omega2 < 0.0 {
            return Err(Error::Domain(format!(
                "negative variance (sigma2 = {}, omega2 = {})",
                self.sigma2, self.omega2
            )));
        }
        let finite = [&self.c1, &self.c2, &self.a1, &self.a2, &self.a3]
            .iter()
            .all(|m| m.is_finite())
            && self.b.is_finite()
            && self.u0.is_finite()
            && self.sigma2.is_finite()
            && self.omega2.is_finite();
        if !finite {
            return Err(Error::Domain("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Squared Frobenius norm of `A = A3 ⊗ A2 ⊗ A1`, i.e. `tr(A Aᵀ)`.
    pub fn transition_frob_sq(&self) -> f64 {
        self.a1.frob_sq() * self.a2.frob_sq() * self.a3.frob_sq()
    }

    /// Squared row norms of `C = C2 ⊗ C1 ⊗ C1`, laid out as an `n x n x K` tensor.
    pub fn emission_row_norms(&self) -> Tensor3 {
        let r1 = self.c1.row_norms_sq();
        let r2 = self.c2.row_norms_sq();
        Tensor3::from_fn(self.network_dims(), |i, j, k| r1[i] * r1[j] * r2[k])
    }

    /// Observationally equivalent parameters under a latent-factor permutation
    /// `pi` (m x m permutation matrix) and an orthogonal layer mixing `r` (K x K):
    /// `C1' = C1 Π`, `C2' = C2 R`, `A1' = Πᵀ A1 Π`, `A2' = Πᵀ A2 Π`, `A3' = Rᵀ A3 R`.
    pub fn reparameterize(&self, pi: &Mat, r: &Mat) -> Result<ModelParams> {
        let pit = pi.transpose();
        let rt = r.transpose();
        Ok(ModelParams {
            c1: self.c1.matmul(pi)?,
            c2: self.c2.matmul(r)?,
            a1: pit.matmul(&self.a1)?.matmul(pi)?,
            a2: pit.matmul(&self.a2)?.matmul(pi)?,
            a3: rt.matmul(&self.a3)?.matmul(r)?,
            b: self.b.clone(),
            u0: reparameterize_core(&self.u0, pi, r)?,
            sigma2: self.sigma2,
            omega2: self.omega2,
        })
    }
}

/// Core tensor matching [`ModelParams::reparameterize`]: `Z' = Z ×₁ Πᵀ ×₂ Πᵀ ×₃ Rᵀ`.
pub fn reparameterize_core(z: &Tensor3, pi: &Mat, r: &Mat) -> Result<Tensor3> {
    let pit = pi.transpose();
    tucker3(z, &pit, &pit, &r.transpose())
}

/// Binary observations `X_1..X_T`, each `n x n x K`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSeries {
    n: usize,
    k: usize,
    tensors: Vec<Tensor3>,
}

impl ObservationSeries {
    pub fn new(n: usize, k: usize, tensors: Vec<Tensor3>) -> Result<Self> {
        for (t, x) in tensors.iter().enumerate() {
            if x.dims() != [n, n, k] {
                return shape_err(format!(
                    "observation {} is {:?}, expected {:?}",
                    t + 1,
                    x.dims(),
                    [n, n, k]
                ));
            }
            if let Some(bad) = x.as_slice().iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(Error::Domain(format!(
                    "observation {} has non-binary entry {bad}",
                    t + 1
                )));
            }
        }
        Ok(Self { n, k, tensors })
    }

    pub fn zeros(n: usize, k: usize, t: usize) -> Self {
        Self {
            n,
            k,
            tensors: vec![Tensor3::zeros([n, n, k]); t],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of observed time steps `T`.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.n, self.n, self.k]
    }

    /// Observation at time `t` (1-based, `1..=T`).
    pub fn at(&self, t: usize) -> &Tensor3 {
        &self.tensors[t - 1]
    }

    pub fn tensors(&self) -> &[Tensor3] {
        &self.tensors
    }

    pub fn edge_count(&self) -> usize {
        self.tensors
            .iter()
            .map(|x| x.as_slice().iter().filter(|&&v| v == 1.0).count())
            .sum()
    }

    /// Keeps time steps `1..=t` and returns the remainder.
    pub fn split_at(&self, t: usize) -> (ObservationSeries, ObservationSeries) {
        let t = t.min(self.len());
        (
            Self {
                n: self.n,
                k: self.k,
                tensors: self.tensors[..t].to_vec(),
            },
            Self {
                n: self.n,
                k: self.k,
                tensors: self.tensors[t..].to_vec(),
            },
        )
    }
}

/// Latent cores `Z_0..Z_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTrajectory {
    pub cores: Vec<Tensor3>,
}

impl LatentTrajectory {
    pub fn horizon(&self) -> usize {
        self.cores.len().saturating_sub(1)
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `(softplus(x), sigmoid(x))` from a single exponential.
#[inline]
pub fn softplus_sigmoid(x: f64) -> (f64, f64) {
    let e = (-x.abs()).exp();
    let sp = x.max(0.0) + e.ln_1p();
    let sg = if x >= 0.0 {
        1.0 / (1.0 + e)
    } else {
        e / (1.0 + e)
    };
    (sp, sg)
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `Γ = Z ×₁ C1 ×₂ C1 ×₃ C2 + B`.
pub fn log_odds(p: &ModelParams, z: &Tensor3) -> Result<Tensor3> {
    if z.dims() != p.core_dims() {
        return shape_err(format!(
            "core is {:?}, expected {:?}",
            z.dims(),
            p.core_dims()
        ));
    }
    tucker3(z, &p.c1, &p.c1, &p.c2)?.add_scaled(&p.b, 1.0)
}

pub fn edge_prob(gamma: &Tensor3) -> Tensor3 {
    gamma.map(sigmoid)
}

/// `Z_prev ×₁ A1 ×₂ A2 ×₃ A3`.
pub fn transition_mean(p: &ModelParams, z_prev: &Tensor3) -> Result<Tensor3> {
    if z_prev.dims() != p.core_dims() {
        return shape_err(format!(
            "core is {:?}, expected {:?}",
            z_prev.dims(),
            p.core_dims()
        ));
    }
    tucker3(z_prev, &p.a1, &p.a2, &p.a3)
}

/// Bernoulli-logit log-likelihood `Σ x γ - log(1 + e^γ)`.
pub fn bernoulli_loglik(x: &Tensor3, gamma: &Tensor3) -> f64 {
    x.as_slice()
        .iter()
        .zip(gamma.as_slice())
        .map(|(&x, &g)| x * g - softplus(g))
        .sum()
}

fn gaussian_loglik(sq_dist: f64, dim: usize, var: f64) -> f64 {
    -0.5 * dim as f64 * (2.0 * PI * var).ln() - sq_dist / (2.0 * var)
}

/// `log p(X, Z | Θ)` with the Gaussian normalizing constants included.
pub fn complete_data_loglik(
    p: &ModelParams,
    x: &ObservationSeries,
    z: &LatentTrajectory,
) -> Result<f64> {
    p.validate()?;
    if x.dims() != p.network_dims() {
        return shape_err(format!(
            "observations are {:?}, model is {:?}",
            x.dims(),
            p.network_dims()
        ));
    }
    if z.cores.len() != x.len() + 1 {
        return shape_err(format!(
            "{} latent cores for {} observations",
            z.cores.len(),
            x.len()
        ));
    }
    let d = p.latent_len();
    let mut ll = gaussian_loglik(z.cores[0].add_scaled(&p.u0, -1.0)?.frob_sq(), d, p.omega2);
    for t in 1..z.cores.len() {
        let pred = transition_mean(p, &z.cores[t - 1])?;
        ll += gaussian_loglik(z.cores[t].add_scaled(&pred, -1.0)?.frob_sq(), d, p.sigma2);
        ll += bernoulli_loglik(x.at(t), &log_odds(p, &z.cores[t])?);
    }
    Ok(ll)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StationarityReport {
    /// Spectral radii of `A1`, `A2`, `A3`.
    pub radii: [f64; 3],
    pub stationary: bool,
}

pub fn check_stationarity(p: &ModelParams) -> Result<StationarityReport> {
    let radii = [
        spectral_radius(&p.a1)?,
        spectral_radius(&p.a2)?,
        spectral_radius(&p.a3)?,
    ];
    Ok(StationarityReport {
        radii,
        stationary: radii.iter().all(|&r| r < 1.0),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PureSourceReport {
    /// For every latent factor, a node carrying (almost) all of its row mass on it.
    pub anchors: Vec<Option<usize>>,
}

impl PureSourceReport {
    pub fn pure(&self) -> Vec<bool> {
        self.anchors.iter().map(Option::is_some).collect()
    }

    pub fn all_pure(&self) -> bool {
        self.anchors.iter().all(Option::is_some)
    }
}

/// Reports, per column of `c1`, whether some row puts at least `1 - tol` of its
/// (row-normalized) mass on that column.
pub fn check_pure_source(c1: &Mat, tol: f64) -> Result<PureSourceReport> {
    if c1.as_slice().iter().any(|&v| v < 0.0) {
        return Err(Error::Domain("c1 has negative entries".into()));
    }
    let mut anchors = vec![None; c1.cols()];
    for i in 0..c1.rows() {
        let row = c1.row(i);
        let total: f64 = row.iter().sum();
        if total <= 0.0 {
            continue;
        }
        for (l, &v) in row.iter().enumerate() {
            if anchors[l].is_none() && v / total >= 1.0 - tol {
                anchors[l] = Some(i);
            }
        }
    }
    Ok(PureSourceReport { anchors })
}

pub const DEFAULT_PURE_TOL: f64 = 1e-6;
