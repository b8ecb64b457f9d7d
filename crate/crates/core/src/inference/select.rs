//! AIC-based choice of the latent dimension and one-step-ahead prediction.

use super::fit::{fit, FitResult};
use super::FitOptions;
use crate::error::{Error, Result};
use crate::model::ObservationSeries;
use crate::model::{edge_prob, log_odds, transition_mean};
use crate::tensor::Tensor3;

/// `nm + 2K² + 2m² + n²K + m²K`.
pub fn parameter_count(n: usize, k: usize, m: usize) -> usize {
    n * m + 2 * k * k + 2 * m * m + n * n * k + m * m * k
}

pub fn aic_penalty(n: usize, k: usize, m: usize) -> f64 {
    2.0 * parameter_count(n, k, m) as f64
}

/// `-2 L + 2 M`, with `L` the observation bound of the final posterior.
pub fn aic(fit: &FitResult, n: usize, k: usize, m: usize) -> f64 {
    -2.0 * fit.observation_bound + aic_penalty(n, k, m)
}

/// Outcome of fitting `m = 1..=m_max`.
#[derive(Debug)]
pub struct Selection {
    pub best_m: usize,
    /// `aic_curve[m - 1]`; `None` where the fit failed.
    pub aic_curve: Vec<Option<f64>>,
    pub fits: Vec<Result<FitResult>>,
}

impl Selection {
    pub fn best_fit(&self) -> &FitResult {
        match &self.fits[self.best_m - 1] {
            Ok(f) => f,
            Err(_) => unreachable!("best m always has a successful fit"),
        }
    }
}

/// Fits every `m` in `1..=m_max` and picks the smallest AIC, ties to the smaller `m`.
pub fn select_m(x: &ObservationSeries, m_max: usize, opts: &FitOptions) -> Result<Selection> {
    select_m_with(x, m_max, opts, fit)
}

/// Like [`select_m`] with a caller-supplied fitting routine, e.g. one that
/// runs candidates concurrently or reports progress.
pub fn select_m_with(
    x: &ObservationSeries,
    m_max: usize,
    opts: &FitOptions,
    mut fitter: impl FnMut(&ObservationSeries, &FitOptions) -> Result<FitResult>,
) -> Result<Selection> {
    if m_max < 1 {
        return Err(Error::Config("m_max must be >= 1".into()));
    }
    let fits: Vec<Result<FitResult>> = (1..=m_max)
        .map(|m| fitter(x, &opts.clone().with_m(m)))
        .collect();
    finish_selection(fits)
}

/// Picks the winner from per-`m` fit outcomes ordered by `m = 1, 2, ...`.
pub fn finish_selection(fits: Vec<Result<FitResult>>) -> Result<Selection> {
    let aic_curve: Vec<Option<f64>> = fits
        .iter()
        .map(|f| f.as_ref().ok().map(|f| f.aic))
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, a) in aic_curve.iter().enumerate() {
        if let Some(a) = *a {
            if best.is_none_or(|(_, b)| a < b) {
                best = Some((i + 1, a));
            }
        }
    }
    match best {
        Some((best_m, _)) => Ok(Selection {
            best_m,
            aic_curve,
            fits,
        }),
        None => {
            let reasons: Vec<String> = fits
                .iter()
                .enumerate()
                .filter_map(|(i, f)| f.as_ref().err().map(|e| format!("m = {}: {e}", i + 1)))
                .collect();
            Err(Error::Numerical(format!(
                "every candidate fit failed ({})",
                reasons.join("; ")
            )))
        }
    }
}

/// Edge probabilities at `T + 1` from `Ẑ_{T+1} = μ̃_T ×₁ A1 ×₂ A2 ×₃ A3`.
pub fn predict_next(fit: &FitResult) -> Result<Tensor3> {
    let last = fit
        .posterior
        .means
        .last()
        .ok_or_else(|| Error::Shape("empty posterior".into()))?;
    let z = transition_mean(&fit.params, last)?;
    Ok(edge_prob(&log_odds(&fit.params, &z)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sigmoid;
    use crate::simulate::{generate, Mechanism, SimConfig};
    use crate::tensor::{tucker3, Mat};

    #[test]
    fn penalty_arithmetic() {
        assert_eq!(parameter_count(20, 2, 3), 904);
        assert_eq!(aic_penalty(20, 2, 3), 1808.0);
        for m in 1..6 {
            assert!(aic_penalty(10, 2, m + 1) > aic_penalty(10, 2, m));
        }
    }

    fn quick_fit(m: usize) -> (ObservationSeries, FitResult) {
        let cfg = SimConfig::new(5, 2, 8, 2, 0.01, Mechanism::Tssdmn, 11);
        let (x, _) = generate(&cfg).unwrap();
        let opts = FitOptions {
            m,
            max_em_iters: 4,
            ..FitOptions::default()
        };
        let f = fit(&x, &opts).unwrap();
        (x, f)
    }

    #[test]
    fn aic_matches_fit_value() {
        let (x, f) = quick_fit(2);
        assert!((aic(&f, x.n(), x.k(), 2) - f.aic).abs() < 1e-9);
    }

    #[test]
    fn zero_transitions_predict_bias() {
        let (_, mut f) = quick_fit(2);
        f.params.a1 = Mat::zeros(2, 2);
        let pred = predict_next(&f).unwrap();
        assert!(pred.max_abs_diff(&f.params.b.map(sigmoid)) < 1e-15);
    }

    #[test]
    fn forecast_is_transition_of_last_mean() {
        let (_, f) = quick_fit(2);
        let p = &f.params;
        let z = tucker3(f.posterior.means.last().unwrap(), &p.a1, &p.a2, &p.a3).unwrap();
        let want = tucker3(&z, &p.c1, &p.c1, &p.c2)
            .unwrap()
            .add_scaled(&p.b, 1.0)
            .unwrap()
            .map(sigmoid);
        assert!(predict_next(&f).unwrap().max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn curve_has_one_entry_per_candidate() {
        let cfg = SimConfig::new(5, 2, 8, 2, 0.01, Mechanism::Tssdmn, 12);
        let (x, _) = generate(&cfg).unwrap();
        let opts = FitOptions {
            max_em_iters: 3,
            ..FitOptions::default()
        };
        let sel = select_m(&x, 3, &opts).unwrap();
        assert_eq!(sel.aic_curve.len(), 3);
        let best = sel.aic_curve[sel.best_m - 1].unwrap();
        assert!(sel.aic_curve.iter().flatten().all(|&a| a >= best));
        assert_eq!(sel.best_fit().m, sel.best_m);
    }

    #[test]
    fn ties_go_to_smaller_m_and_failures_are_skipped() {
        let (_, f) = quick_fit(1);
        let mut g = f.clone();
        g.m = 3;
        let fits = vec![Err(Error::Numerical("boom".into())), Ok(f), Ok(g)];
        let sel = finish_selection(fits).unwrap();
        assert_eq!(sel.best_m, 2);
        assert_eq!(sel.aic_curve[0], None);
        assert!(finish_selection(vec![Err(Error::Numerical("x".into()))]).is_err());
    }

    #[test]
    fn zero_max_is_rejected() {
        let x = ObservationSeries::zeros(2, 1, 2);
        assert!(matches!(
            select_m(&x, 0, &FitOptions::default()),
            Err(Error::Config(_))
        ));
    }
}
