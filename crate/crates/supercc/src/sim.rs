//! Synthetic two-phase survival study: cohort generation, per-method
//! analysis pipelines, and Monte Carlo summaries.
//!
//! A replicate draws a Weibull-hazard cohort with four low-cost and six
//! expensive covariates, imposes design missingness through a case-cohort
//! draw (optionally extended by a random or influence-balanced supersample),
//! runs one analysis method end to end, and reports coefficient estimates
//! with model-plus-design standard errors.  Replicates and methods are
//! embarrassingly parallel; every random stream is derived from the run seed
//! and replicate index alone, so results are bit-identical at any thread
//! count.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrate::{
    calibrate_iss_weights, closed_form_weights, CalibrationError, WeightVariant,
};
use crate::cohort::{CohortDataset, CovariateSchema, CovariateSpec};
use crate::cox::{dfbeta, fit_weighted_cox, CoxData, CoxFit, FitError, FitOptions};
use crate::impute::{
    frame_for_assignment, mice_impute, smcfcs_impute, ImputationError, SmcOptions,
};
use crate::model::{build_design, ColumnSet, CoxModelSpec, ModelError};
use crate::numeric::{kahan_sum, RowMat, Z_975};
use crate::rng::{derive_rng, stage, Prng};
use crate::sampling::{
    add_balanced_supersample, add_random_supersample, add_stratified_balanced_supersample,
    add_stratified_random_supersample, draw_case_cohort, draw_stratified_case_cohort,
    SampleAssignment, SamplingError,
};
use crate::variance::{
    lin_ying_variance, rubin_pool, stratified_variance, supersample_variance, VarianceError,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid study configuration: {detail}")]
    BadConfig { detail: String },
    #[error("method `{method}` finished {found} usable replicates; need at least 2 for Monte Carlo deviations")]
    TooFewReplicates { method: String, found: usize },
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Imputation(#[from] ImputationError),
    #[error(transparent)]
    Variance(#[from] VarianceError),
}

/// One analysis strategy for a generated cohort.
///
/// `Full` fits on the complete cohort (benchmark), `CaseCohort` on the
/// weighted phase-two sample alone.  The remaining six impute the expensive
/// covariates with either the outcome-conditioned chained imputer (`Mice*`)
/// or the substantive-model-compatible one (`Smc*`), over three imputation
/// scopes: the whole cohort, a random supersample (`*Rss`), or an
/// influence-balanced supersample with calibrated weights (`*Iss`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Full,
    CaseCohort,
    Mice,
    MiceRss,
    MiceIss,
    Smc,
    SmcRss,
    SmcIss,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Full,
        Method::CaseCohort,
        Method::Mice,
        Method::MiceRss,
        Method::MiceIss,
        Method::Smc,
        Method::SmcRss,
        Method::SmcIss,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::CaseCohort => "cc",
            Method::Mice => "mice",
            Method::MiceRss => "mice_rss",
            Method::MiceIss => "mice_iss",
            Method::Smc => "smc",
            Method::SmcRss => "smc_rss",
            Method::SmcIss => "smc_iss",
        }
    }

    pub fn parse(label: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.label() == label)
    }

    /// Column heading used in rendered comparison tables.
    pub fn title(self) -> &'static str {
        match self {
            Method::Full => "Full Cohort",
            Method::CaseCohort => "Case-cohort",
            Method::Mice => "MICE",
            Method::MiceRss => "MICE RSS",
            Method::MiceIss => "MICE ISS",
            Method::Smc => "SMC",
            Method::SmcRss => "SMC RSS",
            Method::SmcIss => "SMC ISS",
        }
    }

    /// Stable stream index so imputation draws never collide across methods.
    pub(crate) fn stream_index(self) -> u64 {
        Method::ALL.iter().position(|m| *m == self).unwrap() as u64
    }

    pub fn uses_imputation(self) -> bool {
        !matches!(self, Method::Full | Method::CaseCohort)
    }

    /// Methods that impute a supersample rather than the whole cohort.
    pub fn uses_supersample(self) -> bool {
        matches!(self, Method::MiceRss | Method::MiceIss | Method::SmcRss | Method::SmcIss)
    }

    /// Methods whose supersample is influence-balanced and weight-calibrated.
    pub(crate) fn balanced(self) -> bool {
        matches!(self, Method::MiceIss | Method::SmcIss)
    }

    /// Methods that impute under the substantive-model-compatible sampler.
    pub(crate) fn substantive(self) -> bool {
        matches!(self, Method::Smc | Method::SmcRss | Method::SmcIss)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Generating and analysis coefficient order: four low-cost terms, six
/// expensive terms, then the optional interaction.
const TERMS_BASE: [&str; 10] =
    ["z1", "z2", "z3.2", "z3.3", "xc1", "xc2", "xc3", "xc4", "xb1", "xb2"];
const INTERACTION_TERM: &str = "z1:xc1";
/// Low-cost working model used both as the influence source for balanced
/// supersampling and as the conditioning set for the imputers.
pub const LOW_COST_TERMS: [&str; 4] = ["z1", "z2", "z3.2", "z3.3"];

/// True log hazard ratios in `TERMS_BASE ++ [interaction]` order.
const TRUE_BETA: [f64; 11] = [1.5, 0.5, 0.1, 0.2, 0.4, 0.1, 0.1, 0.1, 0.3, 0.5, 0.3];

/// Linear maps from the driver vector (z0, z1, u2, z3.2, z3.3) to the
/// continuous expensive means and the binary expensive logits.
const XC_COEF: [[f64; 5]; 4] = [
    [0.2, 0.1, 0.1, 0.1, -0.1],
    [0.1, -0.15, 0.1, 0.1, 0.05],
    [0.05, -0.1, 0.15, -0.05, 0.1],
    [0.2, 0.01, -0.1, 0.12, -0.05],
];
const XB_COEF: [[f64; 5]; 2] =
    [[0.15, 0.1, 0.07, 0.08, -0.03], [0.15, 0.15, 0.0, 0.15, -0.05]];
/// Multinomial logits for the three-level categorical, rows per level,
/// applied to (z0, z1).
const Z3_ETA: [[f64; 2]; 3] = [[0.0, 0.0], [-0.5, -0.1], [-0.3, -0.2]];

const CORR_Z0_Z1: f64 = 0.05;
const CORR_Z0_Z2: f64 = -0.05;
const CORR_Z1_Z2: f64 = 0.01;

/// Study horizon in years; entries are uniform over the first
/// `ENTRY_SPAN` years and loss to follow-up leaves `LTFU_SURVIVAL` of the
/// cohort untouched at the horizon.
const HORIZON: f64 = 15.0;
const ENTRY_SPAN: f64 = 2.0;
const LTFU_SURVIVAL: f64 = 0.9;

/// Cohort draws used to pin the baseline intercept at the target event
/// fraction (at least the cohort size itself).
const BASELINE_CALIBRATION_DRAWS: usize = 500_000;

/// Full description of one synthetic study.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Cohort size N.
    pub cohort_size: usize,
    /// Subcohort size drawn without replacement from the cohort.
    pub subcohort_size: usize,
    /// Additional units selected for imputation.
    pub supersample_size: usize,
    /// Imputed data sets per replicate (pooling requires at least 2).
    pub copies: usize,
    /// Chained-equation cycles per imputed data set.
    pub cycles: usize,
    /// Rejection-sampling attempts per missing cell before keeping the last
    /// proposal.
    pub reject_limit: usize,
    /// Weibull shape of the event-time distribution.
    pub alpha: f64,
    /// Expected event fraction the baseline intercept is calibrated to.
    pub target_case_fraction: f64,
    /// Baseline log scale override; `None` calibrates it from a fresh draw.
    pub baseline_log_scale: Option<f64>,
    /// Adds the z1:xc1 product to both the generator and the analysis model.
    pub interaction: bool,
    /// Stratifies the subcohort and supersample draws on the categorical
    /// low-cost covariate.
    pub stratified: bool,
    pub replicates: usize,
    pub seed: u64,
    /// Override of the generating coefficients, in analysis-term order;
    /// `None` uses the canonical values.
    pub true_beta: Option<Vec<f64>>,
}

impl Default for SimConfig {
    /// Desk scale: large enough for the design contrasts to show, small
    /// enough that a full method comparison runs in minutes.
    fn default() -> Self {
        SimConfig {
            cohort_size: 5_000,
            subcohort_size: 100,
            supersample_size: 300,
            copies: 10,
            cycles: 20,
            reject_limit: 1_000,
            alpha: 1.0,
            target_case_fraction: 0.01,
            baseline_log_scale: None,
            interaction: false,
            stratified: false,
            replicates: 200,
            seed: 42,
            true_beta: None,
        }
    }
}

impl SimConfig {
    /// The scale the reference study was reported at: N = 25 000 with a 250
    /// unit subcohort, 750 supersampled units, and 1 000 replicates.
    pub fn paper_scale() -> Self {
        SimConfig {
            cohort_size: 25_000,
            subcohort_size: 250,
            supersample_size: 750,
            replicates: 1_000,
            ..SimConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |detail: String| Err(SimError::BadConfig { detail });
        if self.cohort_size < 10 {
            return bad(format!("cohort_size {} is too small", self.cohort_size));
        }
        if self.subcohort_size < 2 || self.subcohort_size >= self.cohort_size {
            return bad(format!(
                "subcohort_size {} must lie in [2, cohort_size)",
                self.subcohort_size
            ));
        }
        if self.supersample_size >= self.cohort_size - self.subcohort_size {
            return bad(format!(
                "supersample_size {} leaves no sampling pool",
                self.supersample_size
            ));
        }
        if self.copies < 2 {
            return bad(format!("copies {} < 2; pooling needs several data sets", self.copies));
        }
        if self.cycles == 0 || self.reject_limit == 0 || self.replicates == 0 {
            return bad("cycles, reject_limit, and replicates must be positive".into());
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad(format!("alpha {} must be a positive finite shape", self.alpha));
        }
        if !(self.target_case_fraction > 0.0 && self.target_case_fraction < 0.5) {
            return bad(format!(
                "target_case_fraction {} must lie in (0, 0.5)",
                self.target_case_fraction
            ));
        }
        if let Some(b0) = self.baseline_log_scale {
            if !b0.is_finite() {
                return bad("baseline_log_scale must be finite".into());
            }
        }
        if let Some(beta) = &self.true_beta {
            let want = self.analysis_terms().len();
            if beta.len() != want {
                return bad(format!(
                    "true_beta has {} entries; the analysis model has {} terms",
                    beta.len(),
                    want
                ));
            }
            if beta.iter().any(|b| !b.is_finite()) {
                return bad("true_beta entries must be finite".into());
            }
        }
        Ok(())
    }

    /// Analysis-model terms, in reporting order.
    pub fn analysis_terms(&self) -> Vec<&'static str> {
        let mut terms = TERMS_BASE.to_vec();
        if self.interaction {
            terms.push(INTERACTION_TERM);
        }
        terms
    }

    /// True coefficient values aligned with [`SimConfig::analysis_terms`].
    pub fn truth(&self) -> Vec<f64> {
        let full = self.generating_beta();
        full[..self.analysis_terms().len()].to_vec()
    }

    /// Generating coefficients, always 11 long; the interaction slot is
    /// zeroed when the term is absent.
    fn generating_beta(&self) -> [f64; 11] {
        let mut beta = [0.0; 11];
        match &self.true_beta {
            Some(v) => beta[..v.len()].copy_from_slice(v),
            None => {
                beta = TRUE_BETA;
                if !self.interaction {
                    beta[10] = 0.0;
                }
            }
        }
        beta
    }
}

/// One cohort member before censoring is applied.
struct Unit {
    z0: f64,
    z1: f64,
    /// Latent normal behind the binary low-cost covariate.
    u2: f64,
    /// Categorical level in {0, 1, 2}.
    z3: usize,
    xc: [f64; 4],
    xb: [f64; 2],
}

impl Unit {
    fn z2(&self) -> f64 {
        f64::from(self.u2 > 0.0)
    }

    fn z32(&self) -> f64 {
        f64::from(self.z3 == 1)
    }

    fn z33(&self) -> f64 {
        f64::from(self.z3 == 2)
    }

    /// Values in `TERMS_BASE ++ [interaction]` order.
    fn term_values(&self) -> [f64; 11] {
        [
            self.z1,
            self.z2(),
            self.z32(),
            self.z33(),
            self.xc[0],
            self.xc[1],
            self.xc[2],
            self.xc[3],
            self.xb[0],
            self.xb[1],
            self.z1 * self.xc[0],
        ]
    }

    fn linear_predictor(&self, beta: &[f64; 11]) -> f64 {
        self.term_values().iter().zip(beta).map(|(v, b)| v * b).sum()
    }
}

/// Lower-triangular Cholesky factor of the latent (z0, z1, u2) correlation.
///
/// Thresholding at zero shrinks a latent correlation r to r·√(2/π) against a
/// normal, so the latent loadings are the target correlations scaled back up
/// by √(π/2).
fn latent_cholesky() -> [[f64; 3]; 3] {
    let boost = (PI / 2.0).sqrt();
    let r01 = CORR_Z0_Z1;
    let r02 = CORR_Z0_Z2 * boost;
    let r12 = CORR_Z1_Z2 * boost;
    let l11 = 1.0;
    let l21 = r01;
    let l22 = (1.0 - r01 * r01).sqrt();
    let l31 = r02;
    let l32 = (r12 - l21 * l31) / l22;
    let l33 = (1.0 - l31 * l31 - l32 * l32).sqrt();
    [[l11, 0.0, 0.0], [l21, l22, 0.0], [l31, l32, l33]]
}

fn standard_normal(rng: &mut Prng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// Strictly positive unit-rate exponential draw.
fn exp_draw(rng: &mut Prng) -> f64 {
    (-(1.0 - rng.random::<f64>()).ln()).max(f64::MIN_POSITIVE)
}

/// Covariates for one unit; consumes a fixed number of draws so the stream
/// layout is stable.
fn draw_unit(chol: &[[f64; 3]; 3], rng: &mut Prng) -> Unit {
    let e = [standard_normal(rng), standard_normal(rng), standard_normal(rng)];
    let z0 = chol[0][0] * e[0];
    let z1 = chol[1][0] * e[0] + chol[1][1] * e[1];
    let u2 = chol[2][0] * e[0] + chol[2][1] * e[1] + chol[2][2] * e[2];

    let u = rng.random::<f64>();
    let mut weights = [0.0; 3];
    for (w, eta) in weights.iter_mut().zip(&Z3_ETA) {
        *w = (eta[0] * z0 + eta[1] * z1).exp();
    }
    let total: f64 = weights.iter().sum();
    let mut z3 = Z3_ETA.len() - 1;
    let mut acc = 0.0;
    for (j, w) in weights.iter().enumerate() {
        acc += w / total;
        if u < acc {
            z3 = j;
            break;
        }
    }

    let driver = [z0, z1, u2, f64::from(z3 == 1), f64::from(z3 == 2)];
    let mut xc = [0.0; 4];
    for (k, row) in XC_COEF.iter().enumerate() {
        let mean: f64 = row.iter().zip(&driver).map(|(c, d)| c * d).sum();
        xc[k] = mean + standard_normal(rng);
    }
    let mut xb = [0.0; 2];
    for (k, row) in XB_COEF.iter().enumerate() {
        let logit: f64 = row.iter().zip(&driver).map(|(c, d)| c * d).sum();
        let p = 1.0 / (1.0 + (-logit).exp());
        xb[k] = f64::from(rng.random::<f64>() < p);
    }
    Unit { z0, z1, u2, z3, xc, xb }
}

/// Entry-to-administrative-censoring time and the loss-to-follow-up time.
fn draw_censoring(rng: &mut Prng) -> (f64, f64) {
    let entry = ENTRY_SPAN * rng.random::<f64>();
    let c1 = HORIZON - entry;
    let ltfu_rate = -LTFU_SURVIVAL.ln() / HORIZON;
    let c2 = exp_draw(rng) / ltfu_rate;
    (c1, c2)
}

/// Event-time draw under S(t) = exp{−(γt)^α} with γ^α = exp(β0 + lp).
fn draw_event_time(e: f64, lp: f64, alpha: f64, beta0: f64) -> f64 {
    e.powf(1.0 / alpha) * (-(beta0 + lp) / alpha).exp()
}

/// Baseline log scale that hits the target event fraction exactly on a
/// dedicated calibration draw.
///
/// Unit i becomes an event iff β0 ≥ ln Eᵢ − lpᵢ − α·ln(min censoring time),
/// so the k-th smallest such threshold yields exactly k events; one order
/// statistic replaces an iterative intercept search.
pub fn calibrate_baseline(config: &SimConfig) -> f64 {
    if let Some(b0) = config.baseline_log_scale {
        return b0;
    }
    let draws = config.cohort_size.max(BASELINE_CALIBRATION_DRAWS);
    let mut rng = derive_rng(config.seed, &[stage::CALIBRATE_BASELINE]);
    let chol = latent_cholesky();
    let beta = config.generating_beta();
    let mut thresholds = Vec::with_capacity(draws);
    for _ in 0..draws {
        let unit = draw_unit(&chol, &mut rng);
        let e = exp_draw(&mut rng);
        let (c1, c2) = draw_censoring(&mut rng);
        let lp = unit.linear_predictor(&beta);
        thresholds.push(e.ln() - lp - config.alpha * c1.min(c2).ln());
    }
    let k = ((config.target_case_fraction * draws as f64).round() as usize).clamp(1, draws);
    let (_, kth, _) = thresholds.select_nth_unstable_by(k - 1, f64::total_cmp);
    *kth
}

/// Draws one complete cohort for `replicate` and assembles it into the
/// time-sorted dataset the analysis pipelines consume.
pub fn generate_cohort(config: &SimConfig, beta0: f64, replicate: usize) -> CohortDataset {
    let n = config.cohort_size;
    let mut rng = derive_rng(config.seed, &[stage::GENERATE, replicate as u64]);
    let chol = latent_cholesky();
    let beta = config.generating_beta();

    let mut time = Vec::with_capacity(n);
    let mut event = Vec::with_capacity(n);
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); 11];
    for _ in 0..n {
        let unit = draw_unit(&chol, &mut rng);
        let e = exp_draw(&mut rng);
        let (c1, c2) = draw_censoring(&mut rng);
        let lp = unit.linear_predictor(&beta);
        let t = draw_event_time(e, lp, config.alpha, beta0);
        let censor = c1.min(c2);
        time.push(t.min(censor).max(f64::MIN_POSITIVE));
        event.push(u8::from(t <= censor));
        let values = [
            unit.z0,
            unit.z1,
            unit.z2(),
            unit.z32(),
            unit.z33(),
            unit.xc[0],
            unit.xc[1],
            unit.xc[2],
            unit.xc[3],
            unit.xb[0],
            unit.xb[1],
        ];
        for (col, v) in cols.iter_mut().zip(values) {
            col.push(v);
        }
    }

    let stratum = config.stratified.then(|| {
        (0..n)
            .map(|i| {
                if cols[3][i] == 1.0 {
                    1
                } else if cols[4][i] == 1.0 {
                    2
                } else {
                    0
                }
            })
            .collect::<Vec<usize>>()
    });
    // Labels are the raw category codes, matching what validation derives
    // when an exported cohort file is read back.
    let stratum_labels = if config.stratified {
        vec!["1".into(), "2".into(), "3".into()]
    } else {
        Vec::new()
    };

    let schema = CovariateSchema {
        low_cost: vec![
            CovariateSpec::continuous("z0"),
            CovariateSpec::continuous("z1"),
            CovariateSpec::binary("z2"),
            CovariateSpec::categorical("z3", 3),
        ],
        expensive: vec![
            CovariateSpec::continuous("xc1"),
            CovariateSpec::continuous("xc2"),
            CovariateSpec::continuous("xc3"),
            CovariateSpec::continuous("xc4"),
            CovariateSpec::binary("xb1"),
            CovariateSpec::binary("xb2"),
        ],
        stratum_column: config.stratified.then(|| "z3".into()),
    };
    let ids = (0..n).map(|i| format!("u{i:06}")).collect();
    let z_names = ["z0", "z1", "z2", "z3.2", "z3.3"].map(String::from).to_vec();
    let x_names = ["xc1", "xc2", "xc3", "xc4", "xb1", "xb2"].map(String::from).to_vec();
    let mut it = cols.into_iter();
    let z_cols: Vec<Vec<f64>> = (0..5).map(|_| it.next().unwrap()).collect();
    let x_cols: Vec<Vec<f64>> = it.collect();
    CohortDataset::from_parts(
        schema,
        ids,
        time,
        event,
        z_names,
        z_cols,
        x_names,
        x_cols,
        stratum,
        stratum_labels,
    )
}

/// Weighted fit of `spec` on a row subset, plus the cohort-aligned influence
/// matrix of the fit (zero rows off the subset).
pub(crate) fn fit_subset(
    data: &CohortDataset,
    spec: &CoxModelSpec,
    rows: &[usize],
    cohort_weights: &[f64],
    x_override: Option<&[Vec<f64>]>,
) -> Result<(CoxFit, RowMat), SimError> {
    let gather = |col: &[f64]| rows.iter().map(|&i| col[i]).collect::<Vec<f64>>();
    let time = gather(data.time());
    let event: Vec<u8> = rows.iter().map(|&i| data.event()[i]).collect();
    let weights = gather(cohort_weights);
    let ids: Vec<String> = rows.iter().map(|&i| data.ids()[i].clone()).collect();

    let mut names: Vec<&str> = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for (j, name) in data.z_names().iter().enumerate() {
        names.push(name);
        cols.push(gather(data.z_col(j)));
    }
    for (k, name) in data.x_names().iter().enumerate() {
        names.push(name);
        match x_override {
            Some(xs) => cols.push(xs[k].clone()),
            None => cols.push(gather(data.x_col(k))),
        }
    }
    let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
    let columns = ColumnSet::new(names, refs, &ids);
    let design = build_design(spec, &columns)?;
    let cox = CoxData::new(&time, &event, &design, &weights)?;
    let fit = fit_weighted_cox(&cox, &spec.labels(), &FitOptions::default())?;
    let local = dfbeta(&cox, &fit);
    let mut psi = RowMat::zeros(data.n(), spec.len());
    for (r, &i) in rows.iter().enumerate() {
        psi.row_mut(i).copy_from_slice(local.row(r));
    }
    Ok((fit, psi))
}

/// Largest-remainder split of `total` across strata, proportional to cohort
/// stratum sizes; ties break toward the earlier label.
pub(crate) fn stratum_allocation(
    data: &CohortDataset,
    total: usize,
) -> Result<BTreeMap<String, usize>, SimError> {
    let stratum = data.stratum().ok_or_else(|| SimError::BadConfig {
        detail: "stratified design requested on an unstratified dataset".into(),
    })?;
    let labels = data.stratum_labels();
    let mut counts = vec![0usize; labels.len()];
    for &h in stratum {
        counts[h] += 1;
    }
    let n: usize = counts.iter().sum();
    let mut alloc: Vec<usize> = counts.iter().map(|&c| total * c / n).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        (total * counts[b] % n).cmp(&(total * counts[a] % n)).then(labels[a].cmp(&labels[b]))
    });
    let mut assigned: usize = alloc.iter().sum();
    for &h in order.iter().cycle() {
        if assigned == total {
            break;
        }
        alloc[h] += 1;
        assigned += 1;
    }
    Ok(labels.iter().cloned().zip(alloc).collect())
}

/// How the design variance beyond the model information is estimated.
pub(crate) enum DesignVariance {
    None,
    CaseCohort,
    Supersample,
    Stratified,
}

impl DesignVariance {
    pub(crate) fn covariance(
        &self,
        data: &CohortDataset,
        fit: &CoxFit,
        psi: &RowMat,
        assignment: Option<&SampleAssignment>,
    ) -> Result<DMatrix<f64>, SimError> {
        let a = assignment;
        Ok(match self {
            DesignVariance::None => fit.info_inv.clone(),
            DesignVariance::CaseCohort => {
                lin_ying_variance(&fit.info_inv, psi, a.unwrap())?.total
            }
            DesignVariance::Supersample => {
                supersample_variance(&fit.info_inv, psi, a.unwrap())?.total
            }
            DesignVariance::Stratified => {
                stratified_variance(data, &fit.info_inv, psi, a.unwrap())?.total
            }
        })
    }
}

struct MethodOutput {
    estimate: Vec<f64>,
    se: Vec<f64>,
    flagged: bool,
}

fn analyse_full(data: &CohortDataset, spec: &CoxModelSpec) -> Result<MethodOutput, SimError> {
    let rows: Vec<usize> = (0..data.n()).collect();
    let weights = vec![1.0; data.n()];
    let (fit, _) = fit_subset(data, spec, &rows, &weights, None)?;
    let se = (0..spec.len()).map(|j| fit.info_inv[(j, j)].sqrt()).collect();
    Ok(MethodOutput { estimate: fit.beta.iter().copied().collect(), se, flagged: false })
}

fn draw_phase_two(
    config: &SimConfig,
    data: &CohortDataset,
    rng: &mut Prng,
) -> Result<SampleAssignment, SimError> {
    if config.stratified {
        let alloc = stratum_allocation(data, config.subcohort_size)?;
        Ok(draw_stratified_case_cohort(data, &alloc, rng)?)
    } else {
        Ok(draw_case_cohort(data, config.subcohort_size, rng)?)
    }
}

fn analyse_case_cohort(
    config: &SimConfig,
    data: &CohortDataset,
    spec: &CoxModelSpec,
    replicate: usize,
) -> Result<MethodOutput, SimError> {
    let mut rng = derive_rng(config.seed, &[stage::SAMPLE, replicate as u64]);
    let assignment = draw_phase_two(config, data, &mut rng)?;
    let (variant, design) = if config.stratified {
        (WeightVariant::StratifiedSupersampled, DesignVariance::Stratified)
    } else {
        (WeightVariant::CaseCohort, DesignVariance::CaseCohort)
    };
    let weights = closed_form_weights(data, &assignment, variant)?;
    let rows = assignment.analysed_indices();
    let (fit, psi) = fit_subset(data, spec, &rows, &weights, None)?;
    let cov = design.covariance(data, &fit, &psi, Some(&assignment))?;
    let se = (0..spec.len()).map(|j| cov[(j, j)].sqrt()).collect();
    Ok(MethodOutput { estimate: fit.beta.iter().copied().collect(), se, flagged: false })
}

fn analyse_imputed(
    config: &SimConfig,
    data: &CohortDataset,
    spec: &CoxModelSpec,
    method: Method,
    replicate: usize,
) -> Result<MethodOutput, SimError> {
    let n = data.n();
    let mut rng = derive_rng(config.seed, &[stage::SAMPLE, replicate as u64]);
    let mut assignment = draw_phase_two(config, data, &mut rng)?;

    // Imputation scope: the sampled rows, their analysis weights, and the
    // matching design-variance estimator.
    let (rows, weights, design_variance) = if !method.uses_supersample() {
        // Whole-cohort imputation: everyone is analysed at unit weight and
        // the model variance is the only per-copy component.
        ((0..n).collect::<Vec<usize>>(), vec![1.0; n], DesignVariance::None)
    } else {
        let weights = if method.balanced() {
            // Influence-balanced selection: the low-cost working model is
            // fitted on the whole cohort and its per-unit influence drives
            // both the inclusion probabilities and the weight calibration.
            let sub_spec = CoxModelSpec::parse(&LOW_COST_TERMS)?;
            let all: Vec<usize> = (0..n).collect();
            let ones = vec![1.0; n];
            let (_, psi_low) = fit_subset(data, &sub_spec, &all, &ones, None)?;
            if config.stratified {
                let alloc = stratum_allocation(data, config.supersample_size)?;
                add_stratified_balanced_supersample(
                    data,
                    &mut assignment,
                    &psi_low,
                    &alloc,
                    &mut rng,
                )?;
            } else {
                add_balanced_supersample(
                    &mut assignment,
                    &psi_low,
                    config.supersample_size,
                    &mut rng,
                )?;
            }
            calibrate_iss_weights(data, &assignment, &psi_low)?.weights
        } else {
            if config.stratified {
                let alloc = stratum_allocation(data, config.supersample_size)?;
                add_stratified_random_supersample(data, &mut assignment, &alloc, &mut rng)?;
            } else {
                add_random_supersample(&mut assignment, config.supersample_size, &mut rng)?;
            }
            let variant = if config.stratified {
                WeightVariant::StratifiedSupersampled
            } else {
                WeightVariant::Supersampled
            };
            closed_form_weights(data, &assignment, variant)?
        };
        let kind = if config.stratified {
            DesignVariance::Stratified
        } else {
            DesignVariance::Supersample
        };
        (assignment.analysed_indices(), weights, kind)
    };

    let frame = frame_for_assignment(data, &rows, &assignment, &weights, &LOW_COST_TERMS)?;
    let imp_seed = derive_rng(
        config.seed,
        &[stage::IMPUTE, replicate as u64, method.stream_index()],
    )
    .random::<u64>();
    let imputed = if method.substantive() {
        let options = SmcOptions {
            copies: config.copies,
            cycles: config.cycles,
            reject_limit: config.reject_limit,
        };
        smcfcs_impute(&frame, spec, &options, imp_seed)?
    } else {
        mice_impute(&frame, config.copies, config.cycles, imp_seed)?
    };
    let flagged = imputed.copies.iter().any(|c| c.flagged);

    let mut estimates = Vec::with_capacity(config.copies);
    let mut covariances = Vec::with_capacity(config.copies);
    for copy in &imputed.copies {
        let (fit, psi) = fit_subset(data, spec, &rows, &weights, Some(&copy.x))?;
        let cov = design_variance.covariance(data, &fit, &psi, Some(&assignment))?;
        estimates.push(fit.beta.iter().copied().collect::<Vec<f64>>());
        covariances.push(cov);
    }
    let pooled = rubin_pool(&estimates, &covariances)?;
    Ok(MethodOutput { estimate: pooled.beta, se: pooled.se, flagged })
}

/// Outcome of one (replicate, method) cell.  Failures are recorded, not
/// propagated, so a long Monte Carlo run survives isolated fit problems.
#[derive(Debug, Clone)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub method: Method,
    /// Coefficient estimates in analysis-term order; empty on failure.
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    /// An imputation cycle had to fall back after a failed in-cycle fit.
    pub flagged: bool,
    pub error: Option<String>,
    /// Wall-clock time; reported separately and excluded from deterministic
    /// output files.
    pub seconds: f64,
}

pub fn run_replicate(
    config: &SimConfig,
    beta0: f64,
    method: Method,
    replicate: usize,
) -> ReplicateResult {
    let started = Instant::now();
    let data = generate_cohort(config, beta0, replicate);
    let spec = CoxModelSpec::parse(&config.analysis_terms()).expect("analysis terms are well formed");
    let outcome = match method {
        Method::Full => analyse_full(&data, &spec),
        Method::CaseCohort => analyse_case_cohort(config, &data, &spec, replicate),
        _ => analyse_imputed(config, &data, &spec, method, replicate),
    };
    match outcome {
        Ok(out) => ReplicateResult {
            replicate,
            method,
            estimate: out.estimate,
            se: out.se,
            flagged: out.flagged,
            error: None,
            seconds: started.elapsed().as_secs_f64(),
        },
        Err(e) => ReplicateResult {
            replicate,
            method,
            estimate: Vec::new(),
            se: Vec::new(),
            flagged: false,
            error: Some(e.to_string()),
            seconds: started.elapsed().as_secs_f64(),
        },
    }
}

/// Monte Carlo summary of one coefficient under one method.
#[derive(Debug, Clone, Serialize)]
pub struct CoefficientMetrics {
    pub term: String,
    pub truth: f64,
    pub mean: f64,
    /// Signed mean estimate minus truth.
    pub bias: f64,
    /// Standard deviation of the estimates across replicates.
    pub mc_se: f64,
    /// Average reported standard error.
    pub mean_se: f64,
    /// Fraction of replicates whose 95% interval covers the truth.
    pub coverage: f64,
    /// (mc_se of the full-cohort benchmark / mc_se of this method)²; absent
    /// when the benchmark was not run.
    pub rel_eff: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodMetrics {
    pub method: String,
    pub replicates_used: usize,
    pub replicates_failed: usize,
    /// Replicates whose imputation fell back after an in-cycle fit failure.
    pub flagged: usize,
    /// Wall-clock seconds per replicate.  Not deterministic; result writers
    /// keep these out of the byte-reproducible files.
    pub mean_seconds: f64,
    pub max_seconds: f64,
    pub min_seconds: f64,
    pub coefficients: Vec<CoefficientMetrics>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsTable {
    pub terms: Vec<String>,
    pub methods: Vec<MethodMetrics>,
}

impl MetricsTable {
    pub fn method(&self, label: &str) -> Option<&MethodMetrics> {
        self.methods.iter().find(|m| m.method == label)
    }
}

/// Aggregates per-replicate results into bias / spread / coverage metrics.
///
/// Methods appear in first-occurrence order.  Relative efficiency is filled
/// in against the full-cohort benchmark when present.
pub fn summarize(config: &SimConfig, results: &[ReplicateResult]) -> Result<MetricsTable, SimError> {
    let terms: Vec<String> = config.analysis_terms().iter().map(|s| s.to_string()).collect();
    let truth = config.truth();
    let k = terms.len();

    let mut order: Vec<Method> = Vec::new();
    for r in results {
        if !order.contains(&r.method) {
            order.push(r.method);
        }
    }

    let mut methods = Vec::with_capacity(order.len());
    for method in &order {
        let ok: Vec<&ReplicateResult> = results
            .iter()
            .filter(|r| r.method == *method && r.error.is_none())
            .collect();
        let failed = results
            .iter()
            .filter(|r| r.method == *method && r.error.is_some())
            .count();
        if ok.len() < 2 {
            return Err(SimError::TooFewReplicates {
                method: method.label().into(),
                found: ok.len(),
            });
        }
        let reps = ok.len() as f64;
        let mut coefficients = Vec::with_capacity(k);
        for j in 0..k {
            let mean = kahan_sum(ok.iter().map(|r| r.estimate[j])) / reps;
            let ss = kahan_sum(ok.iter().map(|r| (r.estimate[j] - mean).powi(2)));
            let mc_se = (ss / (reps - 1.0)).sqrt();
            let mean_se = kahan_sum(ok.iter().map(|r| r.se[j])) / reps;
            let covered = ok
                .iter()
                .filter(|r| (r.estimate[j] - truth[j]).abs() <= Z_975 * r.se[j])
                .count();
            coefficients.push(CoefficientMetrics {
                term: terms[j].clone(),
                truth: truth[j],
                mean,
                bias: mean - truth[j],
                mc_se,
                mean_se,
                coverage: covered as f64 / reps,
                rel_eff: None,
            });
        }
        methods.push(MethodMetrics {
            method: method.label().into(),
            replicates_used: ok.len(),
            replicates_failed: failed,
            flagged: ok.iter().filter(|r| r.flagged).count(),
            mean_seconds: kahan_sum(ok.iter().map(|r| r.seconds)) / reps,
            max_seconds: ok.iter().map(|r| r.seconds).fold(0.0, f64::max),
            min_seconds: ok.iter().map(|r| r.seconds).fold(f64::INFINITY, f64::min),
            coefficients,
        });
    }

    let benchmark: Option<Vec<f64>> = methods
        .iter()
        .find(|m| m.method == Method::Full.label())
        .map(|m| m.coefficients.iter().map(|c| c.mc_se).collect());
    if let Some(bench) = benchmark {
        for m in &mut methods {
            for (c, b) in m.coefficients.iter_mut().zip(&bench) {
                c.rel_eff = Some((b / c.mc_se).powi(2));
            }
        }
    }
    Ok(MetricsTable { terms, methods })
}

/// Everything one study run produces.
#[derive(Debug, Clone)]
pub struct StudyResult {
    /// Calibrated (or configured) baseline log scale used by every replicate.
    pub baseline_log_scale: f64,
    pub results: Vec<ReplicateResult>,
    pub metrics: MetricsTable,
}

/// Runs `methods` × `replicates` cells in parallel and summarizes them.
pub fn run_study(config: &SimConfig, methods: &[Method]) -> Result<StudyResult, SimError> {
    config.validate()?;
    if methods.is_empty() {
        return Err(SimError::BadConfig { detail: "no methods requested".into() });
    }
    let beta0 = calibrate_baseline(config);
    let jobs: Vec<(Method, usize)> = methods
        .iter()
        .flat_map(|&m| (0..config.replicates).map(move |r| (m, r)))
        .collect();
    let results: Vec<ReplicateResult> = jobs
        .par_iter()
        .map(|&(method, replicate)| run_replicate(config, beta0, method, replicate))
        .collect();
    let metrics = summarize(config, &results)?;
    Ok(StudyResult { baseline_log_scale: beta0, results, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> SimConfig {
        SimConfig {
            cohort_size: 1_200,
            subcohort_size: 80,
            supersample_size: 100,
            copies: 2,
            cycles: 2,
            replicates: 2,
            target_case_fraction: 0.03,
            seed: 9,
            ..SimConfig::default()
        }
    }

    #[test]
    fn covariate_moments_match_generating_targets() {
        let n = 1_000_000;
        let mut rng = derive_rng(5, &[99]);
        let chol = latent_cholesky();
        let mut z0 = Vec::with_capacity(n);
        let mut z1 = Vec::with_capacity(n);
        let mut z2 = Vec::with_capacity(n);
        for _ in 0..n {
            let u = draw_unit(&chol, &mut rng);
            z0.push(u.z0);
            z1.push(u.z1);
            z2.push(u.z2());
        }
        let corr = |a: &[f64], b: &[f64]| {
            let n = a.len() as f64;
            let ma = kahan_sum(a.iter().copied()) / n;
            let mb = kahan_sum(b.iter().copied()) / n;
            let cov = kahan_sum(a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb))) / n;
            let va = kahan_sum(a.iter().map(|x| (x - ma).powi(2))) / n;
            let vb = kahan_sum(b.iter().map(|y| (y - mb).powi(2))) / n;
            cov / (va * vb).sqrt()
        };
        // 3 Monte Carlo standard errors: correlations ~1/√n, the mean of a
        // fair coin √0.25/n.
        let tol = 3.0 / (n as f64).sqrt();
        assert!((corr(&z0, &z1) - CORR_Z0_Z1).abs() < tol, "{}", corr(&z0, &z1));
        assert!((corr(&z0, &z2) - CORR_Z0_Z2).abs() < tol, "{}", corr(&z0, &z2));
        assert!((corr(&z1, &z2) - CORR_Z1_Z2).abs() < tol, "{}", corr(&z1, &z2));
        let p2 = kahan_sum(z2.iter().copied()) / n as f64;
        assert!((p2 - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt(), "{p2}");
    }

    #[test]
    fn loss_to_follow_up_survival_matches_target() {
        let n = 1_000_000;
        let mut rng = derive_rng(6, &[1]);
        let mut beyond = 0usize;
        for _ in 0..n {
            let (_, c2) = draw_censoring(&mut rng);
            beyond += usize::from(c2 > HORIZON);
        }
        let p = beyond as f64 / n as f64;
        let se = (LTFU_SURVIVAL * (1.0 - LTFU_SURVIVAL) / n as f64).sqrt();
        assert!((p - LTFU_SURVIVAL).abs() < 3.0 * se, "{p}");
    }

    #[test]
    fn event_times_invert_the_target_survival_curve() {
        // With zeroed coefficients and unit shape, T is exponential with
        // rate e^{β0}; a Kolmogorov-Smirnov check against that law.
        let n = 100_000;
        let beta0 = -2.5_f64;
        let mut rng = derive_rng(7, &[2]);
        let mut t: Vec<f64> = (0..n)
            .map(|_| draw_event_time(exp_draw(&mut rng), 0.0, 1.0, beta0))
            .collect();
        t.sort_unstable_by(f64::total_cmp);
        let rate = beta0.exp();
        let mut d = 0.0_f64;
        for (i, ti) in t.iter().enumerate() {
            let f = 1.0 - (-rate * ti).exp();
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            d = d.max((f - lo).abs()).max((f - hi).abs());
        }
        assert!(d < 1.36 / (n as f64).sqrt() * 1.5, "KS statistic {d}");
    }

    #[test]
    fn baseline_calibration_hits_the_target_event_fraction() {
        let config = SimConfig::default();
        let beta0 = calibrate_baseline(&config);
        assert!(beta0.is_finite());
        let expected = config.target_case_fraction * config.cohort_size as f64;
        for rep in 0..3 {
            let data = generate_cohort(&config, beta0, rep);
            let cases = data.n_events() as f64;
            // ±5 binomial standard deviations around the target count.
            let sd = (expected * (1.0 - config.target_case_fraction)).sqrt();
            assert!(
                (cases - expected).abs() < 5.0 * sd,
                "replicate {rep}: {cases} cases vs target {expected}"
            );
        }
    }

    #[test]
    fn generated_cohorts_are_sorted_and_consistent() {
        let config = SimConfig { stratified: true, ..tiny_config() };
        let beta0 = calibrate_baseline(&config);
        let data = generate_cohort(&config, beta0, 0);
        assert_eq!(data.n(), config.cohort_size);
        for w in data.time().windows(2) {
            assert!(w[0] <= w[1]);
        }
        let z32 = data.column("z3.2").unwrap();
        let z33 = data.column("z3.3").unwrap();
        let stratum = data.stratum().unwrap();
        for i in 0..data.n() {
            assert!(z32[i] == 0.0 || z32[i] == 1.0);
            assert!(z32[i] + z33[i] <= 1.0);
            let level = if z32[i] == 1.0 {
                1
            } else if z33[i] == 1.0 {
                2
            } else {
                0
            };
            assert_eq!(stratum[i], level);
        }
        for name in ["xb1", "xb2"] {
            let col = data.column(name).unwrap();
            assert!(col.iter().all(|v| *v == 0.0 || *v == 1.0));
        }
        // Same replicate, same draw; different replicate, different draw.
        let again = generate_cohort(&config, beta0, 0);
        assert_eq!(again.time(), data.time());
        let other = generate_cohort(&config, beta0, 1);
        assert_ne!(other.time(), data.time());
    }

    #[test]
    fn interaction_toggle_changes_generation_and_truth() {
        let off = tiny_config();
        let on = SimConfig { interaction: true, ..tiny_config() };
        assert_eq!(off.analysis_terms().len(), 10);
        assert_eq!(on.analysis_terms().len(), 11);
        assert_eq!(on.truth()[10], 0.3);
        let b0 = calibrate_baseline(&off);
        let a = generate_cohort(&off, b0, 0);
        let b = generate_cohort(&on, b0, 0);
        // Covariates share the random stream (identical as multisets; the
        // time sort reorders rows), while event times differ through the lp.
        let sorted = |d: &CohortDataset, name: &str| {
            let mut v = d.column(name).unwrap().to_vec();
            v.sort_unstable_by(f64::total_cmp);
            v
        };
        assert_eq!(sorted(&a, "z1"), sorted(&b, "z1"));
        assert_eq!(sorted(&a, "xc1"), sorted(&b, "xc1"));
        let mut ta = a.time().to_vec();
        let mut tb = b.time().to_vec();
        ta.sort_unstable_by(f64::total_cmp);
        tb.sort_unstable_by(f64::total_cmp);
        assert_ne!(ta, tb);
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut c = tiny_config();
        c.copies = 1;
        assert!(matches!(c.validate(), Err(SimError::BadConfig { .. })));
        let mut c = tiny_config();
        c.subcohort_size = c.cohort_size;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.true_beta = Some(vec![0.0; 3]);
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.true_beta = Some(vec![0.0; 10]);
        assert!(c.validate().is_ok());
        assert_eq!(c.truth(), vec![0.0; 10]);
    }

    #[test]
    fn summarize_matches_hand_computation() {
        let config = SimConfig { true_beta: Some(vec![2.0; 10]), ..tiny_config() };
        let fake = |rep: usize, est: f64, se: f64| ReplicateResult {
            replicate: rep,
            method: Method::Full,
            estimate: vec![est; 10],
            se: vec![se; 10],
            flagged: false,
            error: None,
            seconds: 0.0,
        };
        let results = vec![fake(0, 1.0, 1.0), fake(1, 3.0, 1.0)];
        let table = summarize(&config, &results).unwrap();
        let m = table.method("full").unwrap();
        let c = &m.coefficients[0];
        assert!((c.mean - 2.0).abs() < 1e-15);
        assert!(c.bias.abs() < 1e-15);
        assert!((c.mc_se - 2.0_f64.sqrt()).abs() < 1e-15);
        assert!((c.mean_se - 1.0).abs() < 1e-15);
        // |1−2| = 1 ≤ 1.96·1 and |3−2| = 1 ≤ 1.96·1: both intervals cover.
        assert!((c.coverage - 1.0).abs() < 1e-15);
        assert_eq!(c.rel_eff, Some(1.0));
    }

    #[test]
    fn summarize_requires_two_usable_replicates() {
        let config = tiny_config();
        let results = vec![ReplicateResult {
            replicate: 0,
            method: Method::Full,
            estimate: vec![0.0; 10],
            se: vec![1.0; 10],
            flagged: false,
            error: None,
            seconds: 0.0,
        }];
        assert!(matches!(
            summarize(&config, &results),
            Err(SimError::TooFewReplicates { .. })
        ));
    }

    #[test]
    fn full_cohort_fit_recovers_truth_loosely() {
        let config = SimConfig { cohort_size: 4_000, ..tiny_config() };
        let beta0 = calibrate_baseline(&config);
        let r = run_replicate(&config, beta0, Method::Full, 0);
        assert!(r.error.is_none(), "{:?}", r.error);
        let truth = config.truth();
        // ~120 events; the strong z1 effect should be in the right region.
        assert!((r.estimate[0] - truth[0]).abs() < 0.8, "z1 = {}", r.estimate[0]);
        assert!(r.se.iter().all(|s| s.is_finite() && *s > 0.0));
    }

    #[test]
    fn every_method_runs_on_a_small_cohort() {
        let config = tiny_config();
        let beta0 = calibrate_baseline(&config);
        for method in Method::ALL {
            let r = run_replicate(&config, beta0, method, 0);
            assert!(r.error.is_none(), "{method}: {:?}", r.error);
            assert_eq!(r.estimate.len(), 10, "{method}");
            assert!(r.se.iter().all(|s| s.is_finite() && *s > 0.0), "{method}");
        }
    }

    #[test]
    fn stratified_methods_run_end_to_end() {
        let config = SimConfig { stratified: true, ..tiny_config() };
        let beta0 = calibrate_baseline(&config);
        for method in [Method::CaseCohort, Method::MiceRss, Method::SmcIss] {
            let r = run_replicate(&config, beta0, method, 0);
            assert!(r.error.is_none(), "{method}: {:?}", r.error);
        }
    }

    #[test]
    fn replicates_are_deterministic_and_thread_independent() {
        let config = tiny_config();
        let beta0 = calibrate_baseline(&config);
        let a = run_replicate(&config, beta0, Method::SmcIss, 1);
        let b = run_replicate(&config, beta0, Method::SmcIss, 1);
        assert_eq!(a.estimate, b.estimate);
        assert_eq!(a.se, b.se);
        // A study run (parallel) reproduces the sequential cell bit for bit.
        let study = run_study(
            &SimConfig { replicates: 2, ..config.clone() },
            &[Method::Full, Method::SmcIss],
        )
        .unwrap();
        let cell = study
            .results
            .iter()
            .find(|r| r.method == Method::SmcIss && r.replicate == 1)
            .unwrap();
        assert_eq!(cell.estimate, a.estimate);
        assert_eq!(cell.se, a.se);
    }
}
