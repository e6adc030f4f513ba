//! Weighted Cox proportional-hazards estimation.
//!
//! Fits maximize the weighted partial likelihood with Breslow handling of
//! tied event times: each event contributes `w_i * (lp_i - log S0(t_i))`
//! where `S0(t) = Σ_{at risk} w_j exp(lp_j)`.  The solver is damped
//! Newton-Raphson: full steps with up to ten halvings whenever a step would
//! decrease the log likelihood, convergence on the max-norm of the score.
//!
//! Influence rows ("dfbeta") are the exact per-unit derivatives of the
//! estimator with respect to each unit's weight, scaled by that weight:
//! `ψ_i = w_i · I(β̂)^{-1} u_i` with
//! `u_i = δ_i (z_i - z̄(t_i)) - exp(lp_i) Σ_{event times u ≤ t_i} e(u) (z_i - z̄(u)) / S0(u)`
//! and `e(u)` the weighted event mass at `u`.  They sum to zero exactly at
//! the fitted coefficients and, with unit weights, approximate the
//! leave-one-out coefficient change.  Both the subsampling guide (unweighted
//! fit on the fully observed block) and the design-variance corrections
//! (weighted analysis fits) use this one code path.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::cohort::{weighted_breslow_cumhaz, CohortError, StepFunction};
use crate::numeric::{spd_inverse, spd_solve, RowMat};

/// Largest linear predictor fed to `exp`; caps runaway risk scores so a
/// diverging iterate produces a rejected step instead of NaN poisoning.
const LP_CAP: f64 = 700.0;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("no events in the analysis sample; the partial likelihood is constant")]
    NoEvents,
    #[error("weight for unit {row} is {value}; weights must be finite and nonnegative")]
    BadWeight { row: usize, value: f64 },
    #[error("observed information is singular at iteration {iteration}; design columns are collinear on the risk sets")]
    SingularInformation { iteration: usize },
    #[error("coefficient for `{term}` exceeded {bound} in absolute value; the partial likelihood appears monotone (data separation)")]
    MonotoneLikelihood { term: String, bound: f64 },
    #[error("no convergence after {iterations} iterations (score max-norm {score_norm:.3e})")]
    NotConverged { iterations: usize, score_norm: f64 },
    #[error("step halving failed to improve the log likelihood at iteration {iteration}")]
    FailedToImprove { iteration: usize },
}

/// Borrowed, time-sorted inputs for one fit.
pub struct CoxData<'a> {
    time: &'a [f64],
    event: &'a [u8],
    design: &'a RowMat,
    weights: &'a [f64],
}

impl<'a> CoxData<'a> {
    pub fn new(
        time: &'a [f64],
        event: &'a [u8],
        design: &'a RowMat,
        weights: &'a [f64],
    ) -> Result<Self, FitError> {
        let n = time.len();
        assert_eq!(event.len(), n);
        assert_eq!(design.nrows(), n);
        assert_eq!(weights.len(), n);
        debug_assert!(
            time.windows(2).all(|w| w[0] <= w[1]),
            "cox input must be sorted by time"
        );
        for (row, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(FitError::BadWeight { row, value: w });
            }
        }
        if !event.contains(&1) {
            return Err(FitError::NoEvents);
        }
        Ok(CoxData { time, event, design, weights })
    }

    pub fn n(&self) -> usize {
        self.time.len()
    }

    pub fn k(&self) -> usize {
        self.design.ncols()
    }

    fn linear_predictors(&self, beta: &DVector<f64>) -> Vec<f64> {
        (0..self.n())
            .map(|i| self.design.row(i).iter().zip(beta.iter()).map(|(x, b)| x * b).sum())
            .collect()
    }
}

/// Solver controls.  Defaults: max 50 iterations, score tolerance 1e-9,
/// at most 10 step halvings, coefficient bound 20.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub max_halvings: usize,
    pub beta_bound: f64,
    pub init: Option<DVector<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { max_iter: 50, tol: 1e-9, max_halvings: 10, beta_bound: 20.0, init: None }
    }
}

/// A converged fit.
#[derive(Debug, Clone)]
pub struct CoxFit {
    pub names: Vec<String>,
    pub beta: DVector<f64>,
    pub loglik: f64,
    pub score: DVector<f64>,
    /// Observed information at `beta`.
    pub info: DMatrix<f64>,
    /// Inverse information: the model-based covariance estimate.
    pub info_inv: DMatrix<f64>,
    pub iterations: usize,
}

impl CoxFit {
    /// Model-based standard errors (square roots of the covariance diagonal).
    pub fn se(&self) -> Vec<f64> {
        (0..self.beta.len()).map(|j| self.info_inv[(j, j)].sqrt()).collect()
    }
}

/// One pass over the risk sets: log likelihood, score, and observed
/// information at `beta`.
fn likelihood_pass(data: &CoxData, beta: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
    let n = data.n();
    let k = data.k();
    let lp = data.linear_predictors(beta);
    let mut ll = 0.0;
    let mut score = DVector::zeros(k);
    let mut info = DMatrix::zeros(k, k);
    let mut s0 = 0.0;
    let mut s1 = vec![0.0; k];
    let mut s2 = vec![0.0; k * k]; // upper triangle maintained
    let mut i = n;
    while i > 0 {
        let t = data.time[i - 1];
        let block_end = i;
        // Grow the risk set with every unit tied at time t.
        while i > 0 && data.time[i - 1] == t {
            i -= 1;
            let w = data.weights[i];
            if w == 0.0 {
                continue;
            }
            let r = w * lp[i].min(LP_CAP).exp();
            let z = data.design.row(i);
            s0 += r;
            for a in 0..k {
                s1[a] += r * z[a];
                for b in a..k {
                    s2[a * k + b] += r * z[a] * z[b];
                }
            }
        }
        for j in i..block_end {
            if data.event[j] != 1 {
                continue;
            }
            let w = data.weights[j];
            if w == 0.0 || s0 <= 0.0 {
                continue;
            }
            let z = data.design.row(j);
            ll += w * (lp[j] - s0.ln());
            for a in 0..k {
                let zbar_a = s1[a] / s0;
                score[a] += w * (z[a] - zbar_a);
                for b in a..k {
                    let v = w * (s2[a * k + b] / s0 - zbar_a * s1[b] / s0);
                    info[(a, b)] += v;
                }
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            info[(a, b)] = info[(b, a)];
        }
    }
    (ll, score, info)
}

/// Maximizes the weighted partial likelihood.  `names` label coefficients in
/// design-column order and surface in error messages.
pub fn fit_weighted_cox(
    data: &CoxData,
    names: &[String],
    options: &FitOptions,
) -> Result<CoxFit, FitError> {
    let k = data.k();
    assert_eq!(names.len(), k, "one name per design column");
    let mut beta = options.init.clone().unwrap_or_else(|| DVector::zeros(k));
    let (mut ll, mut score, mut info) = likelihood_pass(data, &beta);
    for iteration in 1..=options.max_iter {
        let score_norm = score.amax();
        if score_norm <= options.tol {
            let info_inv = spd_inverse(&info)
                .ok_or(FitError::SingularInformation { iteration })?;
            return Ok(CoxFit {
                names: names.to_vec(),
                beta,
                loglik: ll,
                score,
                info,
                info_inv,
                iterations: iteration - 1,
            });
        }
        let full_step =
            spd_solve(&info, &score).ok_or(FitError::SingularInformation { iteration })?;
        let mut accepted = false;
        let mut candidate = beta.clone();
        let mut step = full_step;
        for _ in 0..=options.max_halvings {
            candidate = &beta + &step;
            let (ll_new, score_new, info_new) = likelihood_pass(data, &candidate);
            if ll_new.is_finite() && ll_new >= ll - 1e-12 * (1.0 + ll.abs()) {
                ll = ll_new;
                score = score_new;
                info = info_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(FitError::FailedToImprove { iteration });
        }
        beta = candidate;
        if let Some(j) = (0..k).find(|&j| beta[j].abs() > options.beta_bound) {
            return Err(FitError::MonotoneLikelihood {
                term: names[j].clone(),
                bound: options.beta_bound,
            });
        }
    }
    let score_norm = score.amax();
    if score_norm <= options.tol {
        let info_inv = spd_inverse(&info)
            .ok_or(FitError::SingularInformation { iteration: options.max_iter })?;
        return Ok(CoxFit {
            names: names.to_vec(),
            beta,
            loglik: ll,
            score,
            info,
            info_inv,
            iterations: options.max_iter,
        });
    }
    Err(FitError::NotConverged { iterations: options.max_iter, score_norm })
}

/// Weighted risk-set accumulators evaluated at each distinct event time
/// (ascending): `S0 = Σ w e^lp`, `S1 = Σ w e^lp z`, `S2 = Σ w e^lp z z'`
/// over units still at risk, plus the weighted and raw event counts.
pub struct AccumulatorSeries {
    pub event_times: Vec<f64>,
    pub s0: Vec<f64>,
    /// One row per event time.
    pub s1: RowMat,
    pub s2: Vec<DMatrix<f64>>,
    /// Σ of event weights at each time.
    pub event_weight: Vec<f64>,
    pub event_count: Vec<usize>,
}

impl AccumulatorSeries {
    /// Risk-set mean covariate vector at event time index `u`.
    pub fn zbar(&self, u: usize) -> Vec<f64> {
        self.s1.row(u).iter().map(|v| v / self.s0[u]).collect()
    }
}

/// Builds the accumulator series at `beta` (one descending sweep).
pub fn risk_accumulator_series(data: &CoxData, beta: &DVector<f64>) -> AccumulatorSeries {
    let n = data.n();
    let k = data.k();
    let lp = data.linear_predictors(beta);
    let mut s0 = 0.0;
    let mut s1 = vec![0.0; k];
    let mut s2 = DMatrix::zeros(k, k);
    let mut rev_times = Vec::new();
    let mut rev_s0 = Vec::new();
    let mut rev_s1: Vec<Vec<f64>> = Vec::new();
    let mut rev_s2 = Vec::new();
    let mut rev_ew = Vec::new();
    let mut rev_ec = Vec::new();
    let mut i = n;
    while i > 0 {
        let t = data.time[i - 1];
        let block_end = i;
        while i > 0 && data.time[i - 1] == t {
            i -= 1;
            let w = data.weights[i];
            if w == 0.0 {
                continue;
            }
            let r = w * lp[i].min(LP_CAP).exp();
            let z = data.design.row(i);
            s0 += r;
            for a in 0..k {
                s1[a] += r * z[a];
                for b in 0..k {
                    s2[(a, b)] += r * z[a] * z[b];
                }
            }
        }
        let mut ew = 0.0;
        let mut ec = 0usize;
        for j in i..block_end {
            if data.event[j] == 1 {
                ew += data.weights[j];
                ec += 1;
            }
        }
        if ec > 0 {
            rev_times.push(t);
            rev_s0.push(s0);
            rev_s1.push(s1.clone());
            rev_s2.push(s2.clone());
            rev_ew.push(ew);
            rev_ec.push(ec);
        }
    }
    rev_times.reverse();
    rev_s0.reverse();
    rev_s1.reverse();
    rev_s2.reverse();
    rev_ew.reverse();
    rev_ec.reverse();
    AccumulatorSeries {
        event_times: rev_times,
        s0: rev_s0,
        s1: RowMat::from_rows(&rev_s1),
        s2: rev_s2,
        event_weight: rev_ew,
        event_count: rev_ec,
    }
}

/// Influence rows at the fitted coefficients (see module docs).
///
/// Cost is one accumulator sweep plus a prefix scan: O(n·k) after sorting.
pub fn dfbeta(data: &CoxData, fit: &CoxFit) -> RowMat {
    let n = data.n();
    let k = data.k();
    let series = risk_accumulator_series(data, &fit.beta);
    let ne = series.event_times.len();
    // Prefix sums over event times: g0(u) = Σ e/S0, g1(u) = Σ e·z̄/S0.
    let mut g0 = vec![0.0; ne];
    let mut g1 = RowMat::zeros(ne, k);
    let mut acc0 = 0.0;
    let mut acc1 = vec![0.0; k];
    for u in 0..ne {
        let ratio = series.event_weight[u] / series.s0[u];
        acc0 += ratio;
        let zb = series.zbar(u);
        for a in 0..k {
            acc1[a] += ratio * zb[a];
        }
        g0[u] = acc0;
        g1.row_mut(u).copy_from_slice(&acc1);
    }
    let lp = data.linear_predictors(&fit.beta);
    let mut out = RowMat::zeros(n, k);
    let mut ptr = 0usize; // index of first event time > current unit time
    let mut u = vec![0.0; k];
    for i in 0..n {
        while ptr < ne && series.event_times[ptr] <= data.time[i] {
            ptr += 1;
        }
        let w = data.weights[i];
        if ptr == 0 || w == 0.0 {
            // At risk for no event time, or weightless: no influence.
            continue;
        }
        let last = ptr - 1;
        let z = data.design.row(i);
        let elp = lp[i].min(LP_CAP).exp();
        let g1row = g1.row(last);
        for a in 0..k {
            u[a] = -elp * (z[a] * g0[last] - g1row[a]);
        }
        if data.event[i] == 1 {
            let zb = series.zbar(last);
            for a in 0..k {
                u[a] += z[a] - zb[a];
            }
        }
        let row = out.row_mut(i);
        for a in 0..k {
            let mut v = 0.0;
            for b in 0..k {
                v += fit.info_inv[(a, b)] * u[b];
            }
            row[a] = w * v;
        }
    }
    out
}

/// Baseline cumulative hazard under the fitted (or supplied) coefficients,
/// using the analysis weights.
pub fn baseline_cumhaz(data: &CoxData, beta: &DVector<f64>) -> Result<StepFunction, CohortError> {
    let lp = data.linear_predictors(beta);
    weighted_breslow_cumhaz(data.time, data.event, data.weights, &lp)
}
