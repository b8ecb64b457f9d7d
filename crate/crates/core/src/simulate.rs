//! Seeded generators for synthetic dynamic multilayer networks.
//!
//! Three mechanisms are supported: the Tucker state space model itself, a
//! dynamic eigenmodel (latent positions and sociality effects following random
//! walks), and a Gaussian-process latent feature model. All randomness flows
//! from a single `ChaCha8Rng` seeded with `SimConfig::seed`, so a config
//! reproduces its output bit for bit on every platform.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    log_odds, sigmoid, transition_mean, LatentTrajectory, ModelParams, ObservationSeries,
};
use crate::tensor::{Mat, Tensor3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Tssdmn,
    Edmn,
    Bdmn,
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tssdmn" => Ok(Mechanism::Tssdmn),
            "edmn" => Ok(Mechanism::Edmn),
            "bdmn" => Ok(Mechanism::Bdmn),
            other => Err(Error::Config(format!(
                "unknown mechanism '{other}' (expected tssdmn, edmn or bdmn)"
            ))),
        }
    }
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mechanism::Tssdmn => "tssdmn",
            Mechanism::Edmn => "edmn",
            Mechanism::Bdmn => "bdmn",
        })
    }
}

pub const EDMN_LATENT_DIM: usize = 2;
pub const EDMN_TAU: f64 = 0.1;
pub const BDMN_LATENT_DIM: usize = 2;
pub const BDMN_LENGTH_SCALE: f64 = 10.0;
pub const BDMN_AMPLITUDE: f64 = 1.0;

fn default_tau() -> f64 {
    EDMN_TAU
}

fn default_length_scale() -> f64 {
    BDMN_LENGTH_SCALE
}

fn default_amplitude() -> f64 {
    BDMN_AMPLITUDE
}

/// Eigenvalue range of the generated transition factors.
pub const TRANSITION_EIGEN_RANGE: [f64; 2] = [0.1, 0.9];

fn default_eigen_range() -> [f64; 2] {
    TRANSITION_EIGEN_RANGE
}

fn default_emission_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub m: usize,
    pub sigma2: f64,
    pub omega2: f64,
    pub mechanism: Mechanism,
    pub seed: u64,
    /// Sociality random-walk variance of the eigenmodel generator.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Squared-exponential kernel length-scale (time steps) of the GP generator.
    #[serde(default = "default_length_scale")]
    pub gp_length_scale: f64,
    /// Kernel standard deviation of the GP generator.
    #[serde(default = "default_amplitude")]
    pub gp_amplitude: f64,
    /// Eigenvalues of each generated `A_i` are drawn uniformly from this range.
    #[serde(default = "default_eigen_range")]
    pub transition_eigen_range: [f64; 2],
    /// Multiplier on the generated `C2` entries, which are otherwise `Uniform(-1, 1)`.
    #[serde(default = "default_emission_scale")]
    pub emission_scale: f64,
}

impl SimConfig {
    pub fn new(
        n: usize,
        k: usize,
        t: usize,
        m: usize,
        variance: f64,
        mechanism: Mechanism,
        seed: u64,
    ) -> Self {
        Self {
            n,
            k,
            t,
            m,
            sigma2: variance,
            omega2: variance,
            mechanism,
            seed,
            tau: EDMN_TAU,
            gp_length_scale: BDMN_LENGTH_SCALE,
            gp_amplitude: BDMN_AMPLITUDE,
            transition_eigen_range: TRANSITION_EIGEN_RANGE,
            emission_scale: 1.0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_mechanism(mut self, mechanism: Mechanism) -> Self {
        self.mechanism = mechanism;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.k < 1 || self.t < 1 || self.m < 1 {
            return fail(format!(
                "need K, T, m >= 1 (K = {}, T = {}, m = {})",
                self.k, self.t, self.m
            ));
        }
        if self.n < self.m {
            return fail(format!("need n >= m (n = {}, m = {})", self.n, self.m));
        }
        if !(self.sigma2 >= 0.0
            && self.omega2 >= 0.0
            && self.sigma2.is_finite()
            && self.omega2.is_finite())
        {
            return fail(format!(
                "variances must be finite and >= 0 (sigma2 = {}, omega2 = {})",
                self.sigma2, self.omega2
            ));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be >= 0, got {}", self.tau));
        }
        if !(self.gp_length_scale > 0.0 && self.gp_amplitude >= 0.0) {
            return fail(format!(
                "GP length-scale must be > 0 and amplitude >= 0 (got {}, {})",
                self.gp_length_scale, self.gp_amplitude
            ));
        }
        let [lo, hi] = self.transition_eigen_range;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return fail(format!(
                "transition eigenvalue range must satisfy 0 < lo < hi < 1, got [{lo}, {hi}]"
            ));
        }
        if !(self.emission_scale >= 0.0 && self.emission_scale.is_finite()) {
            return fail(format!(
                "emission scale must be finite and >= 0, got {}",
                self.emission_scale
            ));
        }
        Ok(())
    }
}

/// Mechanism-specific ground-truth parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum TruthParams {
    Tssdmn(ModelParams),
    /// Diagonal homophily coefficients, one row per layer.
    Edmn {
        lambda: Mat,
    },
    Bdmn {
        length_scale: f64,
        amplitude: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub mechanism: Mechanism,
    pub params: TruthParams,
    /// Log-odds tensors for `t = 1..=T`.
    pub gamma: Vec<Tensor3>,
    pub latent: Option<LatentTrajectory>,
}

impl GroundTruth {
    pub fn model_params(&self) -> Option<&ModelParams> {
        match &self.params {
            TruthParams::Tssdmn(p) => Some(p),
            _ => None,
        }
    }
}

/// SplitMix64 finalizer; maps `(base, index)` to well-separated replicate seeds.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Symmetric positive definite matrix `Q Λ Qᵀ` with eigenvalues drawn from
/// `Uniform(lo, hi)`; its spectral norm is below `hi`.
pub fn random_stable_pd(d: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Mat {
    let g = DMatrix::from_fn(d, d, |_, _| normal(rng));
    let q = g.qr().q();
    let eig: Vec<f64> = (0..d).map(|_| rng.random_range(lo..hi)).collect();
    let lambda = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eig));
    let m = &q * lambda * q.transpose();
    // symmetrize away rounding noise
    Mat::from_nalgebra(&((&m + m.transpose()) * 0.5))
}

/// Parameters for the Tucker state space generator: stable positive definite
/// transitions, anchored nonnegative `C1` (first `m` rows are `I_m`), `C2` and
/// `u0` uniform on `(-1, 1)`, and zero static bias.
pub fn sample_tssdmn_params(cfg: &SimConfig, rng: &mut impl Rng) -> ModelParams {
    let (n, m, k) = (cfg.n, cfg.m, cfg.k);
    let [lo, hi] = cfg.transition_eigen_range;
    let a1 = random_stable_pd(m, lo, hi, rng);
    let a2 = random_stable_pd(m, lo, hi, rng);
    let a3 = random_stable_pd(k, lo, hi, rng);
    let mut c1 = Mat::from_fn(n, m, |_, _| rng.random_range(0.0..1.0));
    for i in 0..m {
        for j in 0..m {
            c1[(i, j)] = if i == j { 1.0 } else { 0.0 };
        }
    }
    let c2 = Mat::from_fn(k, k, |_, _| {
        cfg.emission_scale * rng.random_range(-1.0..1.0)
    });
    let u0 = Tensor3::from_fn([m, m, k], |_, _, _| rng.random_range(-1.0..1.0));
    ModelParams {
        c1,
        c2,
        a1,
        a2,
        a3,
        b: Tensor3::zeros([n, n, k]),
        u0,
        sigma2: cfg.sigma2,
        omega2: cfg.omega2,
    }
}

fn sample_bernoulli(gamma: &Tensor3, rng: &mut impl Rng) -> Tensor3 {
    gamma.map(|g| {
        if rng.random::<f64>() < sigmoid(g) {
            1.0
        } else {
            0.0
        }
    })
}

/// Runs the latent dynamics and observation model of `params` for `t` steps.
/// Variances may be zero here (a noiseless trajectory), unlike in fitting.
pub fn simulate_from_params(
    params: &ModelParams,
    t: usize,
    rng: &mut impl Rng,
) -> Result<(ObservationSeries, Vec<Tensor3>, LatentTrajectory)> {
    if !(params.sigma2 >= 0.0 && params.omega2 >= 0.0) {
        return Err(Error::Config("variances must be >= 0".into()));
    }
    let (sd0, sd) = (params.omega2.sqrt(), params.sigma2.sqrt());
    let mut cores = Vec::with_capacity(t + 1);
    cores.push(params.u0.map(|u| u + sd0 * normal(rng)));
    for s in 1..=t {
        let mean = transition_mean(params, &cores[s - 1])?;
        cores.push(mean.map(|v| v + sd * normal(rng)));
    }
    let mut gamma = Vec::with_capacity(t);
    let mut xs = Vec::with_capacity(t);
    for core in &cores[1..] {
        let g = log_odds(params, core)?;
        xs.push(sample_bernoulli(&g, rng));
        gamma.push(g);
    }
    let obs = ObservationSeries::new(params.n(), params.k(), xs)?;
    Ok((obs, gamma, LatentTrajectory { cores }))
}

pub fn generate_tssdmn(cfg: &SimConfig) -> Result<(ObservationSeries, GroundTruth)> {
    cfg.validate()?;
    if cfg.mechanism != Mechanism::Tssdmn {
        return Err(Error::Config(format!(
            "generate_tssdmn called with mechanism {}",
            cfg.mechanism
        )));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let params = sample_tssdmn_params(cfg, &mut rng);
    let (obs, gamma, latent) = simulate_from_params(&params, cfg.t, &mut rng)?;
    Ok((
        obs,
        GroundTruth {
            mechanism: Mechanism::Tssdmn,
            params: TruthParams::Tssdmn(params),
            gamma,
            latent: Some(latent),
        },
    ))
}

/// Dynamic eigenmodel: sociality effects and latent positions follow Gaussian
/// random walks, positions are centered at each step, and
/// `logit P(x_ijk = 1) = δ_ik + δ_jk + z̃_iᵀ Λ_k z̃_j`.
pub fn generate_edmn(cfg: &SimConfig) -> Result<(ObservationSeries, GroundTruth)> {
    cfg.validate()?;
    if cfg.mechanism != Mechanism::Edmn {
        return Err(Error::Config(format!(
            "generate_edmn called with mechanism {}",
            cfg.mechanism
        )));
    }
    let (n, k, horizon, m) = (cfg.n, cfg.k, cfg.t, EDMN_LATENT_DIM);
    let mut rng = rng_from_seed(cfg.seed);

    let mut lambda = Mat::zeros(k, m);
    for h in 0..m {
        let u = rng.random_bool(0.5);
        lambda[(0, h)] = if u { 1.0 } else { -1.0 };
    }
    for layer in 1..k {
        for h in 0..m {
            lambda[(layer, h)] = rng.random_range(-2.0..2.0);
        }
    }

    let (tau_sd, sd) = (cfg.tau.sqrt(), cfg.sigma2.sqrt());
    let mut delta = Mat::from_fn(n, k, |_, _| rng.random_range(-4.0..4.0));
    let mut z = Mat::from_fn(n, m, |_, _| 2.0 * normal(&mut rng));

    let mut gamma = Vec::with_capacity(horizon);
    let mut xs = Vec::with_capacity(horizon);
    for step in 0..horizon {
        if step > 0 {
            delta = delta.map(|v| v + tau_sd * normal(&mut rng));
            z = z.map(|v| v + sd * normal(&mut rng));
        }
        let centered = center_rows(&z);
        let g = Tensor3::from_fn([n, n, k], |i, j, layer| {
            let inner: f64 = (0..m)
                .map(|h| centered[(i, h)] * lambda[(layer, h)] * centered[(j, h)])
                .sum();
            delta[(i, layer)] + delta[(j, layer)] + inner
        });
        xs.push(sample_bernoulli(&g, &mut rng));
        gamma.push(g);
    }
    let obs = ObservationSeries::new(n, k, xs)?;
    Ok((
        obs,
        GroundTruth {
            mechanism: Mechanism::Edmn,
            params: TruthParams::Edmn { lambda },
            gamma,
            latent: None,
        },
    ))
}

/// Subtracts the column means, so the rows average to zero.
pub fn center_rows(z: &Mat) -> Mat {
    let (n, m) = z.shape();
    let means: Vec<f64> = (0..m)
        .map(|h| (0..n).map(|i| z[(i, h)]).sum::<f64>() / n as f64)
        .collect();
    Mat::from_fn(n, m, |i, h| z[(i, h)] - means[h])
}

/// Draws `count` independent zero-mean GP paths on `t = 1..=len` with kernel
/// `amplitude² · exp(-(t - t')² / (2 length_scale²))`. Returns a `count x len` matrix.
pub fn sample_gp_paths(
    count: usize,
    len: usize,
    length_scale: f64,
    amplitude: f64,
    rng: &mut impl Rng,
) -> Result<Mat> {
    let var = amplitude * amplitude;
    let mut kernel = DMatrix::from_fn(len, len, |a, b| {
        let d = a as f64 - b as f64;
        var * (-d * d / (2.0 * length_scale * length_scale)).exp()
    });
    // the SE kernel is numerically singular for long length-scales
    let jitter = 1e-8 * var.max(1e-300);
    for a in 0..len {
        kernel[(a, a)] += jitter;
    }
    let chol = kernel
        .cholesky()
        .ok_or_else(|| Error::Numerical("GP kernel is not positive definite".into()))?;
    let l = chol.l();
    let mut out = Mat::zeros(count, len);
    let mut eps = vec![0.0; len];
    for c in 0..count {
        for e in eps.iter_mut() {
            *e = normal(rng);
        }
        for a in 0..len {
            out[(c, a)] = (0..=a).map(|b| l[(a, b)] * eps[b]).sum();
        }
    }
    Ok(out)
}

/// Gaussian-process latent feature model: every node carries shared and
/// layer-specific feature paths, and
/// `γ_ijk(t) = x̄_i(t)ᵀ x̄_j(t) + x_i^(k)(t)ᵀ x_j^(k)(t)`.
pub fn generate_bdmn(cfg: &SimConfig) -> Result<(ObservationSeries, GroundTruth)> {
    cfg.validate()?;
    if cfg.mechanism != Mechanism::Bdmn {
        return Err(Error::Config(format!(
            "generate_bdmn called with mechanism {}",
            cfg.mechanism
        )));
    }
    let (n, k, horizon, m) = (cfg.n, cfg.k, cfg.t, BDMN_LATENT_DIM);
    let mut rng = rng_from_seed(cfg.seed);
    // rows: shared (i, h) then layer-specific (layer, i, h)
    let shared = sample_gp_paths(
        n * m,
        horizon,
        cfg.gp_length_scale,
        cfg.gp_amplitude,
        &mut rng,
    )?;
    let specific = sample_gp_paths(
        k * n * m,
        horizon,
        cfg.gp_length_scale,
        cfg.gp_amplitude,
        &mut rng,
    )?;

    let mut gamma = Vec::with_capacity(horizon);
    let mut xs = Vec::with_capacity(horizon);
    for step in 0..horizon {
        let g = Tensor3::from_fn([n, n, k], |i, j, layer| {
            (0..m)
                .map(|h| {
                    shared[(i * m + h, step)] * shared[(j * m + h, step)]
                        + specific[((layer * n + i) * m + h, step)]
                            * specific[((layer * n + j) * m + h, step)]
                })
                .sum()
        });
        xs.push(sample_bernoulli(&g, &mut rng));
        gamma.push(g);
    }
    let obs = ObservationSeries::new(n, k, xs)?;
    Ok((
        obs,
        GroundTruth {
            mechanism: Mechanism::Bdmn,
            params: TruthParams::Bdmn {
                length_scale: cfg.gp_length_scale,
                amplitude: cfg.gp_amplitude,
            },
            gamma,
            latent: None,
        },
    ))
}

pub fn generate(cfg: &SimConfig) -> Result<(ObservationSeries, GroundTruth)> {
    match cfg.mechanism {
        Mechanism::Tssdmn => generate_tssdmn(cfg),
        Mechanism::Edmn => generate_edmn(cfg),
        Mechanism::Bdmn => generate_bdmn(cfg),
    }
}

/// Latent dimension used by the node/layer/variance sweeps, which do not vary `m`.
pub const PRESET_DEFAULT_M: usize = 3;

/// The four experiment settings. `variant` indexes the swept value.
pub fn preset(setting: u32, variant: usize) -> Result<SimConfig> {
    let pick = |values: &[f64]| {
        values.get(variant).copied().ok_or_else(|| {
            Error::Config(format!(
                "setting {setting} has {} variants, got index {variant}",
                values.len()
            ))
        })
    };
    let base = |n: usize, k: usize, m: usize, var: f64| {
        SimConfig::new(n, k, 30, m, var, Mechanism::Tssdmn, 0)
    };
    match setting {
        1 => Ok(base(
            pick(&[10.0, 20.0, 30.0, 40.0, 50.0])? as usize,
            2,
            PRESET_DEFAULT_M,
            0.01,
        )),
        2 => Ok(base(
            20,
            pick(&[1.0, 2.0, 3.0, 4.0, 5.0])? as usize,
            PRESET_DEFAULT_M,
            0.01,
        )),
        3 => Ok(base(
            20,
            2,
            PRESET_DEFAULT_M,
            pick(&[0.01, 0.04, 0.09, 0.25])?,
        )),
        4 => Ok(base(20, 2, pick(&[2.0, 3.0, 4.0, 5.0])? as usize, 0.01)),
        other => Err(Error::Config(format!(
            "unknown setting {other} (expected 1-4)"
        ))),
    }
}
