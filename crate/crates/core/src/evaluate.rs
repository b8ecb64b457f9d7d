//! Recovery metrics: log-odds MSE, pooled AUC, factor alignment up to
//! permutation and scale, and replicate summaries.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::ObservationSeries;
use crate::tensor::{Mat, Tensor3};

/// Largest `m` searched exhaustively by [`align_factors`].
pub const EXHAUSTIVE_MAX_M: usize = 8;

/// How equal scores between a positive and a negative cell are counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieRule {
    /// Each tied pair counts 1/2.
    #[default]
    Half,
    /// Only strictly greater scores count.
    Strict,
}

/// Mean squared elementwise error over all `T n² K` entries.
pub fn mse(gamma_hat: &[Tensor3], gamma_true: &[Tensor3]) -> Result<f64> {
    if gamma_hat.len() != gamma_true.len() {
        return shape_err(format!(
            "{} estimated vs {} true time steps",
            gamma_hat.len(),
            gamma_true.len()
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (t, (a, b)) in gamma_hat.iter().zip(gamma_true).enumerate() {
        if a.dims() != b.dims() {
            return shape_err(format!(
                "time step {}: {:?} vs {:?}",
                t + 1,
                a.dims(),
                b.dims()
            ));
        }
        total += a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>();
        count += a.len();
    }
    if count == 0 {
        return shape_err("no entries to compare");
    }
    Ok(total / count as f64)
}

/// Pooled AUC of `scores` against binary `labels` via the rank-sum statistic.
pub fn auc_scores(scores: &[f64], labels: &[bool], ties: TieRule) -> Result<f64> {
    if scores.len() != labels.len() {
        return shape_err(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        ));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Domain(format!("score {s} is not comparable")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 {
        return Err(Error::Domain("AUC undefined: no positive edges".into()));
    }
    if neg == 0 {
        return Err(Error::Domain("AUC undefined: no negative edges".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));

    // count (positive, negative) pairs with the positive scored higher, group by group
    let mut wins = 0.0;
    let mut tied_pairs = 0.0;
    let mut neg_below = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group_pos = order[i..j].iter().filter(|&&o| labels[o]).count() as f64;
        let group_neg = (j - i) as f64 - group_pos;
        wins += group_pos * neg_below;
        tied_pairs += group_pos * group_neg;
        neg_below += group_neg;
        i = j;
    }
    let credit = match ties {
        TieRule::Half => 0.5,
        TieRule::Strict => 0.0,
    };
    Ok((wins + credit * tied_pairs) / (pos as f64 * neg as f64))
}

/// AUC of log-odds (or probabilities) against observed edges, pooled over all cells.
pub fn auc(gamma_hat: &[Tensor3], x: &ObservationSeries, ties: TieRule) -> Result<f64> {
    check_series(gamma_hat, x)?;
    let scores: Vec<f64> = gamma_hat
        .iter()
        .flat_map(|g| g.as_slice().iter().copied())
        .collect();
    let labels: Vec<bool> = x
        .tensors()
        .iter()
        .flat_map(|t| t.as_slice().iter().map(|&v| v > 0.5))
        .collect();
    auc_scores(&scores, &labels, ties)
}

/// AUC restricted to each layer `k`, pooled over time.
pub fn per_layer_auc(
    gamma_hat: &[Tensor3],
    x: &ObservationSeries,
    ties: TieRule,
) -> Result<Vec<f64>> {
    check_series(gamma_hat, x)?;
    let [n, _, k] = x.dims();
    (0..k)
        .map(|layer| {
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            for (g, obs) in gamma_hat.iter().zip(x.tensors()) {
                let lo = layer * n * n;
                scores.extend_from_slice(&g.as_slice()[lo..lo + n * n]);
                labels.extend(obs.as_slice()[lo..lo + n * n].iter().map(|&v| v > 0.5));
            }
            auc_scores(&scores, &labels, ties).map_err(|e| match e {
                Error::Domain(msg) => Error::Domain(format!("layer {}: {msg}", layer + 1)),
                other => other,
            })
        })
        .collect()
}

fn check_series(gamma_hat: &[Tensor3], x: &ObservationSeries) -> Result<()> {
    if gamma_hat.len() != x.len() {
        return shape_err(format!(
            "{} score tensors for {} observations",
            gamma_hat.len(),
            x.len()
        ));
    }
    if let Some(g) = gamma_hat.iter().find(|g| g.dims() != x.dims()) {
        return shape_err(format!(
            "scores are {:?}, observations {:?}",
            g.dims(),
            x.dims()
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    /// `permutation[j]` is the column of `c1_hat` matched to column `j` of the truth.
    pub permutation: Vec<usize>,
    pub scale: f64,
    /// `‖C* − c Ĉ Π‖_F / ‖C*‖_F`.
    pub mape: f64,
}

/// Least-squares scale and residual for one column matching.
fn scaled_fit(hat: &Mat, truth: &Mat, perm: &[usize]) -> (f64, f64) {
    let mut cross = 0.0;
    let mut norm = 0.0;
    for i in 0..truth.rows() {
        for (j, &pj) in perm.iter().enumerate() {
            cross += truth[(i, j)] * hat[(i, pj)];
            norm += hat[(i, pj)].powi(2);
        }
    }
    let scale = if norm > 0.0 { cross / norm } else { 0.0 };
    // ‖T − cH‖² = ‖T‖² − cross² / ‖H‖² at the optimal c
    let resid = truth.frob_sq()
        - if norm > 0.0 {
            cross * cross / norm
        } else {
            0.0
        };
    (scale, resid.max(0.0))
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len())
        .rev()
        .find(|&j| p[j] > p[i - 1])
        .expect("exists by choice of i");
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian algorithm).
/// Returns `assign[row] = col`.
fn hungarian(cost: &Mat) -> Vec<usize> {
    let n = cost.rows();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = owner[col0];
            let mut delta = inf;
            let mut col1 = 0;
            for c in 1..=n {
                if !used[c] {
                    let cur = cost[(r - 1, c - 1)] - u[r] - v[c];
                    if cur < minv[c] {
                        minv[c] = cur;
                        way[c] = col0;
                    }
                    if minv[c] < delta {
                        delta = minv[c];
                        col1 = c;
                    }
                }
            }
            for c in 0..=n {
                if used[c] {
                    u[owner[c]] += delta;
                    v[c] -= delta;
                } else {
                    minv[c] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for c in 1..=n {
        assign[owner[c] - 1] = c - 1;
    }
    assign
}

/// Matches the columns of `c1_hat` to those of `c1_true` up to a global scale.
///
/// All `m!` permutations are tried for `m <=` [`EXHAUSTIVE_MAX_M`]; beyond that
/// columns are assigned by maximizing absolute cosine similarity.
pub fn align_factors(c1_hat: &Mat, c1_true: &Mat) -> Result<AlignmentResult> {
    if c1_hat.shape() != c1_true.shape() {
        return shape_err(format!(
            "estimate is {:?}, truth {:?}",
            c1_hat.shape(),
            c1_true.shape()
        ));
    }
    let truth_norm = c1_true.frob_sq();
    if truth_norm == 0.0 {
        return Err(Error::Domain(
            "true factor matrix is zero; MAPE undefined".into(),
        ));
    }
    let m = c1_true.cols();
    let best_perm = if m <= EXHAUSTIVE_MAX_M {
        let mut perm: Vec<usize> = (0..m).collect();
        let mut best = (f64::INFINITY, perm.clone());
        loop {
            let (_, resid) = scaled_fit(c1_hat, c1_true, &perm);
            if resid < best.0 {
                best = (resid, perm.clone());
            }
            if !next_permutation(&mut perm) {
                break;
            }
        }
        best.1
    } else {
        let col_norm = |a: &Mat, j: usize| {
            (0..a.rows())
                .map(|i| a[(i, j)].powi(2))
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE)
        };
        let cost = Mat::from_fn(m, m, |j, l| {
            let dot: f64 = (0..c1_true.rows())
                .map(|i| c1_true[(i, j)] * c1_hat[(i, l)])
                .sum();
            -(dot / (col_norm(c1_true, j) * col_norm(c1_hat, l))).abs()
        });
        hungarian(&cost)
    };
    let (scale, resid) = scaled_fit(c1_hat, c1_true, &best_perm);
    Ok(AlignmentResult {
        permutation: best_perm,
        scale,
        mape: (resid / truth_norm).sqrt(),
    })
}

/// A metric value with its standard error across replicates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    /// Mean and `sd / √n` with the sample standard deviation; `se = 0` for one value.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("no values to summarize".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let se = if values.len() > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Ok(Self { mean, se })
    }

    pub fn exact(value: f64) -> Self {
        Self {
            mean: value,
            se: 0.0,
        }
    }
}

impl fmt::Display for Estimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prec = f.precision().unwrap_or(2);
        write!(f, "{:.prec$}(±{:.prec$})", self.mean, self.se)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Absent when no ground-truth log-odds were available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mse: Option<Estimate>,
    pub auc: Estimate,
    pub per_layer_auc: Vec<Estimate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mape: Option<Estimate>,
    pub replicates: usize,
}

impl MetricReport {
    pub fn single(mse: Option<f64>, auc: f64, per_layer_auc: Vec<f64>, mape: Option<f64>) -> Self {
        Self {
            mse: mse.map(Estimate::exact),
            auc: Estimate::exact(auc),
            per_layer_auc: per_layer_auc.into_iter().map(Estimate::exact).collect(),
            mape: mape.map(Estimate::exact),
            replicates: 1,
        }
    }
}

/// Pools replicate reports (each taken at its mean) into means and standard errors.
pub fn replicate_summary(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::Domain(
            "cannot summarize an empty list of reports".into(),
        ));
    }
    let pick = |f: &dyn Fn(&MetricReport) -> f64| {
        Estimate::from_values(&reports.iter().map(f).collect::<Vec<_>>())
    };
    let layers = reports[0].per_layer_auc.len();
    if reports.iter().any(|r| r.per_layer_auc.len() != layers) {
        return shape_err("replicates disagree on the number of layers");
    }
    let per_layer_auc = (0..layers)
        .map(|k| pick(&|r| r.per_layer_auc[k].mean))
        .collect::<Result<Vec<_>>>()?;
    let optional = |get: &dyn Fn(&MetricReport) -> Option<Estimate>| -> Result<Option<Estimate>> {
        if reports.iter().all(|r| get(r).is_some()) {
            Ok(Some(pick(&|r| get(r).expect("checked").mean)?))
        } else {
            Ok(None)
        }
    };
    let mape = optional(&|r| r.mape)?;
    Ok(MetricReport {
        mse: optional(&|r| r.mse)?,
        auc: pick(&|r| r.auc.mean)?,
        per_layer_auc,
        mape,
        replicates: reports.len(),
    })
}
