//! Multiple imputation of design-missing expensive covariates.
//!
//! Two imputers share the same chained-equations skeleton: a plain
//! conditional-model imputer whose proposals condition on the outcome via
//! the marginal cumulative hazard and the event flag, and a
//! substantive-model-compatible variant whose proposals exclude outcome
//! terms and are instead rejection-sampled against the currently fitted
//! weighted survival model.  Proposal parameters are drawn from their
//! posterior fitted on the subcohort, which has complete expensive
//! covariates by design.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

pub use crate::cohort::nelson_aalen;
use crate::cohort::{CohortDataset, CohortError, CovariateKind};
use crate::cox::{baseline_cumhaz, fit_weighted_cox, CoxData, FitError, FitOptions};
use crate::model::{build_design, ColumnSet, CoxModelSpec, ModelError, Term};
use crate::numeric::{spd_inverse, RowMat};
use crate::rng::{derive_rng, stage, Prng};
use crate::sampling::{Role, SampleAssignment};

#[derive(Debug, Error)]
pub enum ImputationError {
    #[error("proposal design for `{column}` is singular on the fitting subset")]
    SingularDesign { column: String },
    #[error("logistic proposal for `{column}` did not converge; the fitting subset is likely separated")]
    PerfectSeparation { column: String },
    #[error("proposal for `{column}` has {rows} fitting rows for {predictors} predictors")]
    TooFewFittingRows {
        column: String,
        rows: usize,
        predictors: usize,
    },
    #[error("logistic response `{column}` must be 0/1; found {value} at fitting row {row}")]
    NotBinary {
        column: String,
        row: usize,
        value: f64,
    },
    #[error("no fitting rows marked; proposal models are fitted on the subcohort")]
    NoFittingRows,
    #[error("fitting row {row} has missing expensive values; the fitting subset must be complete")]
    IncompleteFittingRow { row: usize },
    #[error("row {row} is an event with missing expensive values; events are fully measured by design")]
    MissingCase { row: usize },
    #[error("acceptance probability {value} falls outside [0, 1]")]
    BadAcceptanceProbability { value: f64 },
    #[error("single-pass imputation needs exactly one missing column; found {found}")]
    MultiColumnMissing { found: usize },
    #[error("analysis-model fit failed inside an imputation cycle: {0}")]
    AnalysisFit(#[from] FitError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("baseline hazard: {0}")]
    Baseline(#[from] CohortError),
    #[error("expensive covariate `{column}` is categorical; only continuous and binary columns are imputable")]
    UnsupportedFamily { column: String },
    #[error("column `{column}` not found in the dataset")]
    UnknownColumn { column: String },
}

/// Proposal family for one expensive covariate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImputationFamily {
    LinearNormal,
    Logistic,
}

/// The analysis sample as the imputers see it: rows sorted by time, one
/// column per covariate, `NaN` marking design-missing expensive cells.
#[derive(Debug, Clone)]
pub struct ImputationFrame {
    pub ids: Vec<String>,
    pub time: Vec<f64>,
    pub event: Vec<u8>,
    pub z_names: Vec<String>,
    /// Low-cost covariate columns (complete).
    pub z: Vec<Vec<f64>>,
    pub x_names: Vec<String>,
    /// Expensive covariate columns; `NaN` cells are imputed.
    pub x: Vec<Vec<f64>>,
    pub families: Vec<ImputationFamily>,
    /// Marginal cumulative hazard at each unit's observed time, estimated on
    /// the full cohort; outcome predictor for the conditional imputer.
    pub cumhaz: Vec<f64>,
    /// Rows the proposal models are fitted on (complete by design).
    pub subcohort: Vec<bool>,
    /// Analysis weights; fixed for the whole imputation.
    pub weights: Vec<f64>,
}

impl ImputationFrame {
    pub fn n(&self) -> usize {
        self.time.len()
    }

    /// Rows with a missing cell in expensive column `k`.
    pub fn missing_rows(&self, k: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.x[k][i].is_nan()).collect()
    }

    /// Expensive columns that contain at least one missing cell.
    pub fn missing_columns(&self) -> Vec<usize> {
        (0..self.x.len())
            .filter(|&k| self.x[k].iter().any(|v| v.is_nan()))
            .collect()
    }

    fn validate(&self) -> Result<(), ImputationError> {
        let n = self.n();
        assert_eq!(self.event.len(), n);
        assert_eq!(self.cumhaz.len(), n);
        assert_eq!(self.subcohort.len(), n);
        assert_eq!(self.weights.len(), n);
        assert_eq!(self.ids.len(), n);
        assert_eq!(self.z_names.len(), self.z.len());
        assert_eq!(self.x_names.len(), self.x.len());
        assert_eq!(self.families.len(), self.x.len());
        for col in self.z.iter().chain(&self.x) {
            assert_eq!(col.len(), n);
        }
        assert!(
            self.time.windows(2).all(|w| w[0] <= w[1]),
            "frame rows must be sorted by time"
        );
        if !self.subcohort.iter().any(|&s| s) {
            return Err(ImputationError::NoFittingRows);
        }
        for i in 0..n {
            if self.subcohort[i] && self.x.iter().any(|col| col[i].is_nan()) {
                return Err(ImputationError::IncompleteFittingRow { row: i });
            }
        }
        Ok(())
    }

    fn fitting_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.subcohort[i]).collect()
    }
}

/// Assembles the imputation view of an analysis sample: `rows` (cohort
/// indices, time-ordered) become the frame rows, expensive cells are blanked
/// for every unit whose covariates were never measured (anything outside the
/// case-cohort sample), and the outcome predictor is the marginal cumulative
/// hazard estimated once on the full cohort.
///
/// `z_names` picks the low-cost columns the proposals may condition on;
/// `cohort_weights` are the analysis weights, cohort-aligned.
pub fn frame_for_assignment(
    dataset: &CohortDataset,
    rows: &[usize],
    assignment: &SampleAssignment,
    cohort_weights: &[f64],
    z_names: &[&str],
) -> Result<ImputationFrame, ImputationError> {
    let measured = |i: usize| matches!(assignment.role[i], Role::Case | Role::SubcohortNoncase);
    let gather = |col: &[f64]| rows.iter().map(|&i| col[i]).collect::<Vec<f64>>();

    let mut z = Vec::with_capacity(z_names.len());
    for name in z_names {
        let col = dataset
            .column(name)
            .ok_or_else(|| ImputationError::UnknownColumn { column: (*name).into() })?;
        z.push(gather(col));
    }

    let mut families = Vec::new();
    for spec in &dataset.schema().expensive {
        match spec.kind {
            CovariateKind::Continuous => families.push(ImputationFamily::LinearNormal),
            CovariateKind::Binary => families.push(ImputationFamily::Logistic),
            CovariateKind::Categorical { .. } => {
                return Err(ImputationError::UnsupportedFamily { column: spec.name.clone() })
            }
        }
    }
    debug_assert_eq!(families.len(), dataset.x_names().len());

    let x = (0..dataset.x_names().len())
        .map(|k| {
            let col = dataset.x_col(k);
            rows.iter()
                .map(|&i| if measured(i) { col[i] } else { f64::NAN })
                .collect::<Vec<f64>>()
        })
        .collect();

    let cumhaz_fn = nelson_aalen(dataset.time(), dataset.event());
    Ok(ImputationFrame {
        ids: rows.iter().map(|&i| dataset.ids()[i].clone()).collect(),
        time: gather(dataset.time()),
        event: rows.iter().map(|&i| dataset.event()[i]).collect(),
        z_names: z_names.iter().map(|s| (*s).to_string()).collect(),
        z,
        x_names: dataset.x_names().to_vec(),
        x,
        families,
        cumhaz: rows.iter().map(|&i| cumhaz_fn.evaluate(dataset.time()[i])).collect(),
        subcohort: rows.iter().map(|&i| assignment.in_subcohort[i]).collect(),
        weights: gather(cohort_weights),
    })
}

/// One realized set of proposal parameters.
#[derive(Debug, Clone)]
pub struct ParameterDraw {
    pub coef: Vec<f64>,
    /// Residual standard deviation; linear-normal proposals only.
    pub sigma: Option<f64>,
}

/// Draws proposal parameters from their posterior given the fitting rows.
///
/// Linear-normal: σ² is residual-sum-of-squares over a χ² draw at the
/// residual degrees of freedom, coefficients normal around the
/// least-squares fit with covariance σ²(GᵀG)⁻¹.  Logistic: coefficients
/// normal around the maximum-likelihood fit with inverse-information
/// covariance.
///
/// Columns are rescaled to unit standard deviation internally (a pure
/// reparameterization; coefficients are mapped back), so conditioning and
/// the logistic divergence test do not depend on predictor scales — a
/// cumulative-hazard column ranging over hundredths legitimately carries a
/// coefficient in the tens.
pub fn posterior_draw(
    design: &RowMat,
    response: &[f64],
    family: ImputationFamily,
    label: &str,
    rng: &mut Prng,
) -> Result<ParameterDraw, ImputationError> {
    let n = design.nrows();
    let q = design.ncols();
    assert_eq!(response.len(), n);
    if n <= q {
        return Err(ImputationError::TooFewFittingRows {
            column: label.to_string(),
            rows: n,
            predictors: q,
        });
    }
    let scale: Vec<f64> = (0..q)
        .map(|j| {
            let mean = (0..n).map(|i| design.get(i, j)).sum::<f64>() / n as f64;
            let var = (0..n)
                .map(|i| (design.get(i, j) - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut scaled = RowMat::zeros(n, q);
    for i in 0..n {
        for j in 0..q {
            scaled.set(i, j, design.get(i, j) / scale[j]);
        }
    }
    let design = &scaled;
    let g = design.to_dmatrix();
    let y = DVector::from_column_slice(response);
    match family {
        ImputationFamily::LinearNormal => {
            let gtg = g.transpose() * &g;
            let inv = spd_inverse(&gtg).ok_or_else(|| ImputationError::SingularDesign {
                column: label.to_string(),
            })?;
            let betahat = &inv * (g.transpose() * &y);
            let rss = (&y - &g * &betahat).norm_squared();
            let df = (n - q) as f64;
            let chi: f64 = ChiSquared::new(df).expect("df > 0").sample(rng);
            let sigma = if rss > 0.0 { (rss / chi).sqrt() } else { 0.0 };
            let chol = inv
                .cholesky()
                .ok_or_else(|| ImputationError::SingularDesign {
                    column: label.to_string(),
                })?;
            let z = DVector::from_iterator(q, (0..q).map(|_| rng.sample(StandardNormal)));
            let coef = &betahat + chol.l() * z * sigma;
            Ok(ParameterDraw {
                coef: coef.iter().zip(&scale).map(|(c, s)| c / s).collect(),
                sigma: Some(sigma),
            })
        }
        ImputationFamily::Logistic => {
            for (row, &v) in response.iter().enumerate() {
                if v != 0.0 && v != 1.0 {
                    return Err(ImputationError::NotBinary {
                        column: label.to_string(),
                        row,
                        value: v,
                    });
                }
            }
            let mut beta = DVector::zeros(q);
            let mut info = DMatrix::zeros(q, q);
            let mut converged = false;
            for _ in 0..100 {
                let lp = &g * &beta;
                let p: Vec<f64> = lp.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
                let mut score = DVector::zeros(q);
                info.fill(0.0);
                for i in 0..n {
                    let w = (p[i] * (1.0 - p[i])).max(1e-12);
                    let r = response[i] - p[i];
                    for a in 0..q {
                        score[a] += design.get(i, a) * r;
                        for b in a..q {
                            info[(a, b)] += design.get(i, a) * design.get(i, b) * w;
                        }
                    }
                }
                for a in 0..q {
                    for b in 0..a {
                        info[(a, b)] = info[(b, a)];
                    }
                }
                if score.amax() < 1e-10 {
                    converged = true;
                    break;
                }
                let step = crate::numeric::spd_solve(&info, &score).ok_or_else(|| {
                    ImputationError::SingularDesign {
                        column: label.to_string(),
                    }
                })?;
                beta += step;
                if beta.amax() > 30.0 {
                    return Err(ImputationError::PerfectSeparation {
                        column: label.to_string(),
                    });
                }
            }
            if !converged {
                return Err(ImputationError::PerfectSeparation {
                    column: label.to_string(),
                });
            }
            let inv = spd_inverse(&info).ok_or_else(|| ImputationError::SingularDesign {
                column: label.to_string(),
            })?;
            let chol = inv
                .cholesky()
                .ok_or_else(|| ImputationError::SingularDesign {
                    column: label.to_string(),
                })?;
            let z = DVector::from_iterator(q, (0..q).map(|_| rng.sample(StandardNormal)));
            let coef = &beta + chol.l() * z;
            Ok(ParameterDraw {
                coef: coef.iter().zip(&scale).map(|(c, s)| c / s).collect(),
                sigma: None,
            })
        }
    }
}

fn propose(
    row: &[f64],
    draw: &ParameterDraw,
    family: ImputationFamily,
    rng: &mut Prng,
) -> f64 {
    let lp: f64 = row.iter().zip(&draw.coef).map(|(x, b)| x * b).sum();
    match family {
        ImputationFamily::LinearNormal => {
            let noise: f64 = rng.sample(StandardNormal);
            lp + draw.sigma.expect("linear draws carry sigma") * noise
        }
        ImputationFamily::Logistic => {
            let p = 1.0 / (1.0 + (-lp).exp());
            f64::from(rng.random::<f64>() < p)
        }
    }
}

/// Proposal design for column `k` over `rows`: intercept, all low-cost
/// columns, the other expensive columns at their current completed values,
/// and (for the conditional imputer) the cumulative hazard and event flag.
fn proposal_design(
    frame: &ImputationFrame,
    x_current: &[Vec<f64>],
    k: usize,
    rows: &[usize],
    outcome_terms: bool,
) -> RowMat {
    let q = 1 + frame.z.len() + (x_current.len() - 1) + if outcome_terms { 2 } else { 0 };
    let mut design = RowMat::zeros(rows.len(), q);
    for (r, &i) in rows.iter().enumerate() {
        let mut c = 0;
        design.set(r, c, 1.0);
        c += 1;
        for z in &frame.z {
            design.set(r, c, z[i]);
            c += 1;
        }
        for (j, x) in x_current.iter().enumerate() {
            if j != k {
                design.set(r, c, x[i]);
                c += 1;
            }
        }
        if outcome_terms {
            design.set(r, c, frame.cumhaz[i]);
            design.set(r, c + 1, f64::from(frame.event[i]));
        }
    }
    design
}

/// Fewest rows a two-valued predictor must show on each side before it may
/// enter a proposal fit; below this the coefficient is unidentified or
/// separation-prone (e.g. the event flag when the fitting subset holds a
/// single case).
const MIN_LEVEL_ROWS: usize = 3;

/// Columns of a proposal design that are safe to fit on: the intercept,
/// every column with 3+ distinct values, and two-valued columns whose minor
/// level has at least [`MIN_LEVEL_ROWS`] rows.  Constant columns are always
/// dropped.  Imputed units are censored survivors, so a degenerate event
/// flag (or any near-constant indicator) carries no usable signal here,
/// only a separation risk.
fn informative_columns(design: &RowMat) -> Vec<usize> {
    let n = design.nrows();
    let mut keep = vec![0];
    'cols: for j in 1..design.ncols() {
        let first = design.get(0, j);
        let mut second = None;
        let mut first_count = 0usize;
        for i in 0..n {
            let v = design.get(i, j);
            if v == first {
                first_count += 1;
            } else {
                match second {
                    None => second = Some(v),
                    Some(s) if s == v => {}
                    Some(_) => {
                        // Three distinct values: not an indicator.
                        keep.push(j);
                        continue 'cols;
                    }
                }
            }
        }
        match second {
            None => {} // constant
            Some(_) => {
                let minor = first_count.min(n - first_count);
                if minor >= MIN_LEVEL_ROWS {
                    keep.push(j);
                }
            }
        }
    }
    keep
}

/// True for fit failures the chained-equations loop survives by skipping
/// the column for that cycle (and flagging the copy); structural problems
/// still abort.
fn is_skippable(err: &ImputationError) -> bool {
    matches!(
        err,
        ImputationError::SingularDesign { .. } | ImputationError::PerfectSeparation { .. }
    )
}

/// Missing cells start from random draws among the observed subcohort
/// values of the same column.
fn initial_fill(frame: &ImputationFrame, rng: &mut Prng) -> Vec<Vec<f64>> {
    let mut x = frame.x.clone();
    let fit_rows = frame.fitting_rows();
    for k in 0..x.len() {
        let pool: Vec<f64> = fit_rows.iter().map(|&i| frame.x[k][i]).collect();
        for i in 0..frame.n() {
            if x[k][i].is_nan() {
                x[k][i] = pool[rng.random_range(0..pool.len())];
            }
        }
    }
    x
}

/// Summary of the rejection loops of one substantive-model copy.
#[derive(Debug, Clone, Default)]
pub struct RejectionStats {
    /// Mean proposals consumed per imputed draw.
    pub mean_attempts: f64,
    /// Draws that hit the rejection cap and kept their last proposal.
    pub capped: usize,
    /// Total imputed draws.
    pub imputed: usize,
}

/// One completed copy of the expensive covariates.
#[derive(Debug, Clone)]
pub struct ImputedCopy {
    /// Completed expensive columns, same layout as the frame.
    pub x: Vec<Vec<f64>>,
    /// Rejection accounting; substantive-model copies only.
    pub rejection: Option<RejectionStats>,
    /// Set when the in-cycle analysis fit failed even after a cold restart.
    pub flagged: bool,
    /// Random-stream path this copy consumed.
    pub stream_path: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct ImputedDatasetSet {
    pub copies: Vec<ImputedCopy>,
    pub seed: u64,
}

/// Chained-equations imputation with outcome-aware proposals: per cycle and
/// column, draw proposal parameters on the subcohort, then redraw the
/// missing cells given the other columns, the cumulative hazard, and the
/// event flag.
pub fn mice_impute(
    frame: &ImputationFrame,
    copies: usize,
    cycles: usize,
    seed: u64,
) -> Result<ImputedDatasetSet, ImputationError> {
    frame.validate()?;
    assert!(cycles >= 1, "need at least one cycle");
    let out: Result<Vec<ImputedCopy>, ImputationError> = (0..copies)
        .into_par_iter()
        .map(|m| {
            let path = vec![stage::IMPUTE, m as u64];
            let mut rng = derive_rng(seed, &path);
            let (x, flagged) = mice_copy(frame, cycles, &mut rng)?;
            Ok(ImputedCopy {
                x,
                rejection: None,
                flagged,
                stream_path: path,
            })
        })
        .collect();
    Ok(ImputedDatasetSet {
        copies: out?,
        seed,
    })
}

fn mice_copy(
    frame: &ImputationFrame,
    cycles: usize,
    rng: &mut Prng,
) -> Result<(Vec<Vec<f64>>, bool), ImputationError> {
    let mut x = initial_fill(frame, rng);
    let fit_rows = frame.fitting_rows();
    let mut flagged = false;
    for _ in 0..cycles {
        for k in 0..x.len() {
            let missing = frame.missing_rows(k);
            if missing.is_empty() {
                continue;
            }
            let g_fit = proposal_design(frame, &x, k, &fit_rows, true);
            let kept = informative_columns(&g_fit);
            let y: Vec<f64> = fit_rows.iter().map(|&i| frame.x[k][i]).collect();
            let draw = match posterior_draw(
                &g_fit.select_columns(&kept),
                &y,
                frame.families[k],
                &frame.x_names[k],
                rng,
            ) {
                Ok(draw) => draw,
                Err(e) if is_skippable(&e) => {
                    flagged = true;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let g_mis = proposal_design(frame, &x, k, &missing, true).select_columns(&kept);
            for (r, &i) in missing.iter().enumerate() {
                x[k][i] = propose(g_mis.row(r), &draw, frame.families[k], rng);
            }
        }
    }
    Ok((x, flagged))
}

/// Single-cycle convenience wrapper; valid only when one expensive column is
/// missing, in which case extra cycles cannot change the draw distribution.
pub fn single_pass_impute(
    frame: &ImputationFrame,
    copies: usize,
    seed: u64,
) -> Result<ImputedDatasetSet, ImputationError> {
    let missing = frame.missing_columns();
    if missing.len() != 1 {
        return Err(ImputationError::MultiColumnMissing {
            found: missing.len(),
        });
    }
    mice_impute(frame, copies, 1, seed)
}

/// Controls for the substantive-model-compatible imputer.
#[derive(Debug, Clone)]
pub struct SmcOptions {
    pub copies: usize,
    pub cycles: usize,
    /// Proposals per missing cell before keeping the last one with a warning.
    pub reject_limit: usize,
}

impl Default for SmcOptions {
    fn default() -> Self {
        SmcOptions {
            copies: 10,
            cycles: 20,
            reject_limit: 1000,
        }
    }
}

/// Substantive-model-compatible imputation: proposals exclude outcome terms
/// and are accepted with probability exp{−Λ̂₀(t)·e^lp}, the fitted survival
/// probability of the censored unit under the candidate covariates.  The
/// analysis model is refitted each cycle and column on the current
/// completed sample with the fixed calibrated weights.
pub fn smcfcs_impute(
    frame: &ImputationFrame,
    analysis: &CoxModelSpec,
    options: &SmcOptions,
    seed: u64,
) -> Result<ImputedDatasetSet, ImputationError> {
    frame.validate()?;
    assert!(options.cycles >= 1, "need at least one cycle");
    assert!(options.reject_limit >= 1, "need at least one proposal");
    let mut available = frame.z_names.clone();
    available.extend(frame.x_names.iter().cloned());
    analysis.validate_against(&available)?;
    for k in 0..frame.x.len() {
        for i in frame.missing_rows(k) {
            if frame.event[i] == 1 {
                return Err(ImputationError::MissingCase { row: i });
            }
        }
    }
    let out: Result<Vec<ImputedCopy>, ImputationError> = (0..options.copies)
        .into_par_iter()
        .map(|m| {
            let path = vec![stage::IMPUTE, m as u64];
            let mut rng = derive_rng(seed, &path);
            smcfcs_copy(frame, analysis, options, path, &mut rng)
        })
        .collect();
    Ok(ImputedDatasetSet {
        copies: out?,
        seed,
    })
}

/// Linear predictor of `row` under the analysis model, evaluated directly
/// from the named columns (must agree with the assembled design matrix).
fn model_row_lp(
    frame: &ImputationFrame,
    x_current: &[Vec<f64>],
    analysis: &CoxModelSpec,
    beta: &DVector<f64>,
    row: usize,
) -> f64 {
    let value = |name: &str| -> f64 {
        if let Some(j) = frame.z_names.iter().position(|n| n == name) {
            frame.z[j][row]
        } else {
            let j = frame
                .x_names
                .iter()
                .position(|n| n == name)
                .expect("model validated against frame columns");
            x_current[j][row]
        }
    };
    analysis
        .terms()
        .iter()
        .zip(beta.iter())
        .map(|(term, b)| match term {
            Term::Main(a) => b * value(a),
            Term::Interaction(a, c) => b * value(a) * value(c),
        })
        .sum()
}

fn analysis_design(
    frame: &ImputationFrame,
    x_current: &[Vec<f64>],
    analysis: &CoxModelSpec,
) -> Result<RowMat, ModelError> {
    let mut names: Vec<&str> = frame.z_names.iter().map(String::as_str).collect();
    names.extend(frame.x_names.iter().map(String::as_str));
    let mut cols: Vec<&[f64]> = frame.z.iter().map(Vec::as_slice).collect();
    cols.extend(x_current.iter().map(Vec::as_slice));
    build_design(analysis, &ColumnSet::new(names, cols, &frame.ids))
}

fn smcfcs_copy(
    frame: &ImputationFrame,
    analysis: &CoxModelSpec,
    options: &SmcOptions,
    path: Vec<u64>,
    rng: &mut Prng,
) -> Result<ImputedCopy, ImputationError> {
    let mut x = initial_fill(frame, rng);
    let fit_rows = frame.fitting_rows();
    let names = analysis.labels();
    let mut prev_beta: Option<DVector<f64>> = None;
    let mut flagged = false;
    let mut attempts: u64 = 0;
    let mut capped = 0usize;
    let mut imputed = 0usize;
    for _ in 0..options.cycles {
        for k in 0..x.len() {
            let missing = frame.missing_rows(k);
            if missing.is_empty() {
                continue;
            }
            // (a) proposal parameters, outcome-free predictors.
            let g_fit = proposal_design(frame, &x, k, &fit_rows, false);
            let kept = informative_columns(&g_fit);
            let y: Vec<f64> = fit_rows.iter().map(|&i| frame.x[k][i]).collect();
            let draw = match posterior_draw(
                &g_fit.select_columns(&kept),
                &y,
                frame.families[k],
                &frame.x_names[k],
                rng,
            ) {
                Ok(draw) => draw,
                Err(e) if is_skippable(&e) => {
                    flagged = true;
                    continue;
                }
                Err(e) => return Err(e),
            };
            // (b) analysis model on the current completed sample, warm-started.
            let design = analysis_design(frame, &x, analysis)?;
            let data = CoxData::new(&frame.time, &frame.event, &design, &frame.weights)?;
            let warm = FitOptions {
                init: prev_beta.clone(),
                ..FitOptions::default()
            };
            let beta = match fit_weighted_cox(&data, &names, &warm)
                .or_else(|_| fit_weighted_cox(&data, &names, &FitOptions::default()))
            {
                Ok(fit) => {
                    prev_beta = Some(fit.beta.clone());
                    fit.beta
                }
                Err(err) => {
                    flagged = true;
                    match &prev_beta {
                        Some(b) => b.clone(),
                        None => return Err(ImputationError::AnalysisFit(err)),
                    }
                }
            };
            // (c) weighted baseline cumulative hazard at the current fit.
            let lambda0 = baseline_cumhaz(&data, &beta)?;
            // (d) propose-then-accept per missing cell.
            let g_mis = proposal_design(frame, &x, k, &missing, false).select_columns(&kept);
            for (r, &i) in missing.iter().enumerate() {
                let cum = lambda0.evaluate(frame.time[i]);
                for attempt in 1..=options.reject_limit {
                    x[k][i] = propose(g_mis.row(r), &draw, frame.families[k], rng);
                    let lp = model_row_lp(frame, &x, analysis, &beta, i);
                    let accept_prob = (-cum * lp.exp()).exp();
                    if !(0.0..=1.0 + 1e-12).contains(&accept_prob) {
                        return Err(ImputationError::BadAcceptanceProbability {
                            value: accept_prob,
                        });
                    }
                    attempts += 1;
                    if rng.random::<f64>() <= accept_prob {
                        break;
                    }
                    if attempt == options.reject_limit {
                        capped += 1;
                    }
                }
                imputed += 1;
            }
        }
    }
    let rejection = RejectionStats {
        mean_attempts: if imputed > 0 {
            attempts as f64 / imputed as f64
        } else {
            0.0
        },
        capped,
        imputed,
    };
    Ok(ImputedCopy {
        x,
        rejection: Some(rejection),
        flagged,
        stream_path: path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::kahan_sum;

    #[test]
    fn marginal_cumhaz_matches_hand_computation() {
        let time = [1.0, 2.0, 2.0, 3.0, 4.0];
        let event = [1, 1, 0, 1, 0];
        let f = nelson_aalen(&time, &event);
        assert!((f.evaluate(1.0) - 0.2).abs() < 1e-15);
        assert!((f.evaluate(2.5) - (0.2 + 0.25)).abs() < 1e-15);
        assert!((f.evaluate(10.0) - (0.2 + 0.25 + 0.5)).abs() < 1e-15);
        assert_eq!(f.evaluate(0.5), 0.0);
    }

    fn design_from(cols: &[&[f64]]) -> RowMat {
        RowMat::from_columns(cols)
    }

    #[test]
    fn linear_posterior_recovers_slope() {
        let n = 500;
        let mut rng = derive_rng(11, &[1]);
        let x: Vec<f64> = (0..n).map(|i| (i as f64 / n as f64) * 4.0 - 2.0).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&v| 2.0 * v + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let ones = vec![1.0; n];
        let design = design_from(&[&ones, &x]);
        // Analytic sampling sd of the slope: σ/(√n·sd_x).
        let sd_x = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        let se = 0.1 / ((n as f64).sqrt() * sd_x);
        let mut draws = Vec::new();
        for d in 0..200u64 {
            let mut r = derive_rng(11, &[2, d]);
            let draw =
                posterior_draw(&design, &y, ImputationFamily::LinearNormal, "x", &mut r).unwrap();
            assert!((draw.coef[1] - 2.0).abs() < 8.0 * se, "draw {}", draw.coef[1]);
            draws.push(draw.coef[1]);
        }
        let mean = kahan_sum(draws.iter().copied()) / draws.len() as f64;
        assert!((mean - 2.0).abs() < se, "posterior mean {mean}");
    }

    #[test]
    fn posterior_concentrates_with_duplicated_data() {
        let base = 80;
        let spread = |copies: usize, seed_branch: u64| -> f64 {
            let n = base * copies;
            let mut rng = derive_rng(13, &[seed_branch]);
            let x: Vec<f64> = (0..n).map(|i| ((i % base) as f64 / base as f64) - 0.5).collect();
            let y: Vec<f64> = x
                .iter()
                .map(|&v| 1.0 - v + 0.3 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let ones = vec![1.0; n];
            let design = design_from(&[&ones, &x]);
            let draws: Vec<f64> = (0..60u64)
                .map(|d| {
                    let mut r = derive_rng(13, &[seed_branch, d]);
                    posterior_draw(&design, &y, ImputationFamily::LinearNormal, "x", &mut r)
                        .unwrap()
                        .coef[1]
                })
                .collect();
            let m = kahan_sum(draws.iter().copied()) / draws.len() as f64;
            (draws.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (draws.len() - 1) as f64)
                .sqrt()
        };
        let small = spread(1, 5);
        let big = spread(100, 6);
        let ratio = small / big;
        assert!(
            (5.0..20.0).contains(&ratio),
            "posterior sd should shrink ~1/√n; ratio {ratio}"
        );
    }

    #[test]
    fn posterior_draws_are_seed_deterministic() {
        let x = [0.1, 0.9, -0.4, 0.5, 1.3, -1.0, 0.2, 0.7];
        let y = [0.3, 1.1, -0.2, 0.8, 1.5, -0.9, 0.4, 0.9];
        let ones = vec![1.0; x.len()];
        let design = design_from(&[&ones, &x]);
        let draw = |seed: u64| {
            let mut r = derive_rng(seed, &[3]);
            posterior_draw(&design, &y, ImputationFamily::LinearNormal, "x", &mut r).unwrap()
        };
        let a = draw(42);
        let b = draw(42);
        assert_eq!(a.coef, b.coef);
        assert_eq!(a.sigma, b.sigma);
        let c = draw(43);
        assert_ne!(a.coef, c.coef);
    }

    #[test]
    fn logistic_posterior_centers_on_mle_and_detects_separation() {
        let n = 400;
        let mut rng = derive_rng(17, &[1]);
        let x: Vec<f64> = (0..n).map(|i| (i as f64 / n as f64) * 6.0 - 3.0).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&v| {
                let p = 1.0 / (1.0 + (-(0.8 * v - 0.3_f64)).exp());
                f64::from(rng.random::<f64>() < p)
            })
            .collect();
        let ones = vec![1.0; n];
        let design = design_from(&[&ones, &x]);
        let draws: Vec<f64> = (0..50u64)
            .map(|d| {
                let mut r = derive_rng(17, &[2, d]);
                posterior_draw(&design, &y, ImputationFamily::Logistic, "x", &mut r)
                    .unwrap()
                    .coef[1]
            })
            .collect();
        let mean = kahan_sum(draws.iter().copied()) / draws.len() as f64;
        assert!((mean - 0.8).abs() < 0.4, "logistic slope mean {mean}");

        // Perfectly separated response.
        let ysep: Vec<f64> = x.iter().map(|&v| f64::from(v > 0.0)).collect();
        let mut r = derive_rng(17, &[3]);
        assert!(matches!(
            posterior_draw(&design, &ysep, ImputationFamily::Logistic, "x", &mut r),
            Err(ImputationError::PerfectSeparation { .. })
        ));

        // Non-binary response is rejected up front.
        let bad = vec![0.5; n];
        let mut r2 = derive_rng(17, &[4]);
        assert!(matches!(
            posterior_draw(&design, &bad, ImputationFamily::Logistic, "x", &mut r2),
            Err(ImputationError::NotBinary { .. })
        ));
    }

    /// Frame with one linear and one binary expensive column; `missing`
    /// rows (all censored, outside the subcohort) have both cells missing
    /// unless `only_first_column` limits it.
    fn toy_frame(n: usize, missing: &[usize], only_first_column: bool) -> ImputationFrame {
        let mut rng = derive_rng(23, &[n as u64]);
        let time: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let event: Vec<u8> = (0..n).map(|i| u8::from(i % 5 == 0 && !missing.contains(&i))).collect();
        let z: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let x1: Vec<f64> = z
            .iter()
            .map(|&v| 0.5 * v + 0.4 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let x2: Vec<f64> = z
            .iter()
            .map(|&v| f64::from(rng.random::<f64>() < 1.0 / (1.0 + (-v).exp())))
            .collect();
        let subcohort: Vec<bool> = (0..n).map(|i| !missing.contains(&i)).collect();
        let mut x1m = x1;
        let mut x2m = x2;
        for &i in missing {
            x1m[i] = f64::NAN;
            if !only_first_column {
                x2m[i] = f64::NAN;
            }
        }
        let cumhaz_fn = nelson_aalen(&time, &event);
        let cumhaz: Vec<f64> = time.iter().map(|&t| cumhaz_fn.evaluate(t)).collect();
        ImputationFrame {
            ids: (0..n).map(|i| format!("u{i}")).collect(),
            time,
            event,
            z_names: vec!["z".into()],
            z: vec![z],
            x_names: vec!["x1".into(), "x2".into()],
            x: vec![x1m, x2m],
            families: vec![ImputationFamily::LinearNormal, ImputationFamily::Logistic],
            cumhaz,
            subcohort,
            weights: vec![1.0; n],
        }
    }

    #[test]
    fn no_missing_cells_returns_identical_copies() {
        let frame = toy_frame(40, &[], false);
        let out = mice_impute(&frame, 3, 2, 7).unwrap();
        assert_eq!(out.copies.len(), 3);
        for copy in &out.copies {
            assert_eq!(copy.x, frame.x);
        }
    }

    #[test]
    fn copies_differ_only_on_missing_cells() {
        let missing: Vec<usize> = (0..60).filter(|i| i % 4 == 1).collect();
        let frame = toy_frame(60, &missing, false);
        let out = mice_impute(&frame, 4, 3, 8).unwrap();
        assert_eq!(out.copies.len(), 4);
        let mut any_difference = false;
        for copy in &out.copies {
            for k in 0..2 {
                for i in 0..60 {
                    if frame.x[k][i].is_nan() {
                        assert!(copy.x[k][i].is_finite());
                        if k == 1 {
                            assert!(copy.x[k][i] == 0.0 || copy.x[k][i] == 1.0);
                        }
                    } else {
                        assert_eq!(copy.x[k][i], frame.x[k][i], "observed cell changed");
                    }
                }
            }
        }
        for k in 0..2 {
            for &i in &missing {
                if out.copies[0].x[k][i] != out.copies[1].x[k][i] {
                    any_difference = true;
                }
            }
        }
        assert!(any_difference, "copies should differ on imputed cells");
        // Determinism: same seed reproduces every cell.
        let again = mice_impute(&frame, 4, 3, 8).unwrap();
        for (a, b) in out.copies.iter().zip(&again.copies) {
            assert_eq!(a.x, b.x);
        }
        let other = mice_impute(&frame, 4, 3, 9).unwrap();
        assert_ne!(out.copies[0].x, other.copies[0].x);
    }

    #[test]
    fn single_pass_matches_one_cycle_and_guards_columns() {
        let missing: Vec<usize> = (0..50).filter(|i| i % 6 == 1).collect();
        let frame = toy_frame(50, &missing, true);
        let a = single_pass_impute(&frame, 5, 21).unwrap();
        let b = mice_impute(&frame, 5, 1, 21).unwrap();
        assert_eq!(a.copies.len(), 5);
        for (ca, cb) in a.copies.iter().zip(&b.copies) {
            assert_eq!(ca.x, cb.x, "single pass must equal one chained cycle");
        }
        let two_col = toy_frame(50, &missing, false);
        assert!(matches!(
            single_pass_impute(&two_col, 5, 21),
            Err(ImputationError::MultiColumnMissing { found: 2 })
        ));
    }

    #[test]
    fn extra_cycles_leave_single_column_distribution_unchanged() {
        let missing: Vec<usize> = (0..80).filter(|i| i % 3 == 1).collect();
        let frame = toy_frame(80, &missing, true);
        let mean_imputed = |cycles: usize, seed: u64| -> f64 {
            let out = mice_impute(&frame, 1, cycles, seed).unwrap();
            kahan_sum(missing.iter().map(|&i| out.copies[0].x[0][i])) / missing.len() as f64
        };
        let reps = 200;
        let one: Vec<f64> = (0..reps).map(|r| mean_imputed(1, 1000 + r)).collect();
        let twenty: Vec<f64> = (0..reps).map(|r| mean_imputed(20, 50_000 + r)).collect();
        let stats = |v: &[f64]| {
            let m = kahan_sum(v.iter().copied()) / v.len() as f64;
            let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
            (m, var)
        };
        let (m1, v1) = stats(&one);
        let (m20, v20) = stats(&twenty);
        let se = ((v1 + v20) / reps as f64).sqrt();
        assert!(
            (m1 - m20).abs() <= 3.0 * se,
            "single-column chains should mix immediately: {m1} vs {m20} (se {se})"
        );
    }

    #[test]
    fn model_row_lp_matches_assembled_design() {
        let frame = toy_frame(30, &[], false);
        let spec = CoxModelSpec::parse(&["z", "x1", "x2", "z:x1"]).unwrap();
        let design = analysis_design(&frame, &frame.x, &spec).unwrap();
        let beta = DVector::from_column_slice(&[0.3, -0.7, 0.2, 0.15]);
        for i in 0..30 {
            let direct = model_row_lp(&frame, &frame.x, &spec, &beta, i);
            let assembled: f64 = design.row(i).iter().zip(beta.iter()).map(|(x, b)| x * b).sum();
            assert!((direct - assembled).abs() < 1e-12);
        }
    }

    #[test]
    fn substantive_imputer_matches_proposal_when_model_ignores_x() {
        // With no X term in the analysis model the acceptance probability
        // does not depend on the proposal, so accepted draws are proposal
        // draws.  Compare against a directly sampled oracle.
        let missing: Vec<usize> = (0..100).filter(|i| i % 3 == 1).collect();
        let mut frame = toy_frame(100, &missing, true);
        frame.x_names = vec!["x1".into()];
        frame.x.truncate(1);
        frame.families.truncate(1);
        let spec = CoxModelSpec::parse(&["z"]).unwrap();
        let reps = 120;
        let smc_means: Vec<f64> = (0..reps)
            .map(|r| {
                let out = smcfcs_impute(
                    &frame,
                    &spec,
                    &SmcOptions { copies: 1, cycles: 1, reject_limit: 1000 },
                    3000 + r,
                )
                .unwrap();
                kahan_sum(missing.iter().map(|&i| out.copies[0].x[0][i])) / missing.len() as f64
            })
            .collect();
        // Oracle: posterior draw + proposal noise, no survival model at all.
        let fit_rows: Vec<usize> = frame.fitting_rows();
        let oracle_means: Vec<f64> = (0..reps)
            .map(|r| {
                let mut rng = derive_rng(90_000 + r, &[77]);
                let g_fit = proposal_design(&frame, &frame.x, 0, &fit_rows, false);
                let y: Vec<f64> = fit_rows.iter().map(|&i| frame.x[0][i]).collect();
                let draw =
                    posterior_draw(&g_fit, &y, ImputationFamily::LinearNormal, "x1", &mut rng)
                        .unwrap();
                let g_mis = proposal_design(&frame, &frame.x, 0, &missing, false);
                let vals: Vec<f64> = (0..missing.len())
                    .map(|r2| propose(g_mis.row(r2), &draw, ImputationFamily::LinearNormal, &mut rng))
                    .collect();
                kahan_sum(vals.iter().copied()) / vals.len() as f64
            })
            .collect();
        let stats = |v: &[f64]| {
            let m = kahan_sum(v.iter().copied()) / v.len() as f64;
            let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
            (m, var)
        };
        let (ms, vs) = stats(&smc_means);
        let (mo, vo) = stats(&oracle_means);
        let se = ((vs + vo) / reps as f64).sqrt();
        assert!(
            (ms - mo).abs() <= 3.0 * se,
            "accepted draws should match the proposal law: {ms} vs {mo} (se {se})"
        );
    }

    #[test]
    fn rejection_accounting_and_limits() {
        let missing: Vec<usize> = (0..90).filter(|i| i % 3 == 1).collect();
        let mut frame = toy_frame(90, &missing, true);
        frame.x_names = vec!["x1".into()];
        frame.x.truncate(1);
        frame.families.truncate(1);
        // Strong X effect in the analysis model makes acceptance < 1.
        let spec = CoxModelSpec::parse(&["z", "x1"]).unwrap();
        let free = smcfcs_impute(
            &frame,
            &spec,
            &SmcOptions { copies: 2, cycles: 2, reject_limit: 1000 },
            77,
        )
        .unwrap();
        for copy in &free.copies {
            let stats = copy.rejection.as_ref().unwrap();
            assert!(stats.mean_attempts >= 1.0);
            assert_eq!(stats.capped, 0, "generous limit should never cap");
            assert_eq!(stats.imputed, missing.len() * 2);
            assert!(!copy.flagged);
        }
        // Limit 1 keeps every first proposal.
        let capped = smcfcs_impute(
            &frame,
            &spec,
            &SmcOptions { copies: 2, cycles: 2, reject_limit: 1 },
            77,
        )
        .unwrap();
        for copy in &capped.copies {
            let stats = copy.rejection.as_ref().unwrap();
            assert_eq!(stats.mean_attempts, 1.0);
            assert!(stats.capped > 0, "some first proposals should be rejections");
        }
        // Determinism and observed-cell invariance.
        let again = smcfcs_impute(
            &frame,
            &spec,
            &SmcOptions { copies: 2, cycles: 2, reject_limit: 1000 },
            77,
        )
        .unwrap();
        for (a, b) in free.copies.iter().zip(&again.copies) {
            assert_eq!(a.x, b.x);
        }
        for copy in &free.copies {
            for i in 0..90 {
                if !frame.x[0][i].is_nan() {
                    assert_eq!(copy.x[0][i], frame.x[0][i]);
                }
            }
        }
    }

    #[test]
    fn missing_event_rows_are_rejected() {
        let missing = vec![7usize];
        let mut frame = toy_frame(40, &missing, true);
        frame.event[7] = 1;
        let spec = CoxModelSpec::parse(&["z", "x1"]).unwrap();
        assert!(matches!(
            smcfcs_impute(&frame, &spec, &SmcOptions::default(), 5),
            Err(ImputationError::MissingCase { row: 7 })
        ));
    }

    #[test]
    fn incomplete_fitting_rows_are_rejected() {
        let missing = vec![9usize];
        let mut frame = toy_frame(40, &missing, true);
        frame.subcohort[9] = true;
        assert!(matches!(
            mice_impute(&frame, 2, 1, 3),
            Err(ImputationError::IncompleteFittingRow { row: 9 })
        ));
        let mut empty = toy_frame(40, &[], false);
        empty.subcohort = vec![false; 40];
        assert!(matches!(
            mice_impute(&empty, 2, 1, 3),
            Err(ImputationError::NoFittingRows)
        ));
    }

    #[test]
    fn degenerate_indicators_are_dropped_from_proposal_fits() {
        let ones = vec![1.0; 12];
        let cont: Vec<f64> = (0..12).map(|i| i as f64 * 0.3).collect();
        let constant = vec![2.0; 12];
        let single = {
            let mut v = vec![0.0; 12];
            v[3] = 1.0;
            v
        };
        let balanced: Vec<f64> = (0..12).map(|i| f64::from(i % 4 == 0)).collect();
        let design = RowMat::from_columns(&[&ones, &cont, &constant, &single, &balanced]);
        // Intercept always kept; continuous kept; constant and one-hot
        // dropped; a 3-of-12 indicator is identifiable and kept.
        assert_eq!(informative_columns(&design), vec![0, 1, 4]);
    }

    #[test]
    fn near_caseless_fitting_subset_no_longer_separates() {
        // Exactly one event among the fitting rows: the event-flag predictor
        // is a one-hot column, which used to separate the logistic proposal.
        let missing = vec![30usize, 33, 36, 39];
        let mut frame = toy_frame(40, &missing, false);
        for i in 0..40 {
            frame.event[i] = u8::from(i == 5);
        }
        let cumhaz_fn = nelson_aalen(&frame.time, &frame.event);
        frame.cumhaz = frame.time.iter().map(|&t| cumhaz_fn.evaluate(t)).collect();
        let out = mice_impute(&frame, 2, 2, 7).unwrap();
        for copy in &out.copies {
            for k in 0..copy.x.len() {
                assert!(copy.x[k].iter().all(|v| v.is_finite()));
            }
        }
    }
}
