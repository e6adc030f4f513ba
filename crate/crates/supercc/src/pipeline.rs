//! End-to-end analysis of a cohort supplied as a file: phase-two role
//! resolution, optional influence-balanced supersampling with weight
//! calibration, imputation of the expensive covariates, weighted model fits
//! with design variance, and Rubin pooling — plus the drivers behind the
//! `simulate`, `analyze`, and `sample` commands.
//!
//! The engine mirrors the simulation harness step for step so that running
//! `analyze` on an exported synthetic cohort exercises exactly the code the
//! Monte Carlo study measures.  Expensive covariates must be observed on
//! every phase-two row (cases and subcohort non-cases); missingness anywhere
//! else is what the imputing methods are for.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::calibrate::{
    calibrate_iss_weights, closed_form_weights, CalibrationError, ConstraintSystem, WeightVariant,
};
use crate::cohort::{CohortDataset, CohortError, CovariateSchema, RawTable};
use crate::config::{at_paper_scale, ConfigError, ExperimentConfig, PipelineConfig};
use crate::cox::FitError;
use crate::impute::{
    frame_for_assignment, mice_impute, smcfcs_impute, ImputationError, SmcOptions,
};
use crate::io::{self, AnalysisReport, IoError, RunMetadata, TermEstimate};
use crate::model::{CoxModelSpec, ModelError, Term};
use crate::numeric::Z_975;
use crate::rng::{derive_rng, stage, Prng};
use crate::sampling::{
    add_balanced_supersample, add_random_supersample, add_stratified_balanced_supersample,
    add_stratified_random_supersample, assignment_from_subcohort_flags, draw_case_cohort,
    draw_stratified_case_cohort, Role, SampleAssignment, SamplingError,
};
use crate::sim::{self, DesignVariance, Method, SimError};
use crate::variance::{rubin_pool, VarianceError};

/// Tolerance on the relative residual of each calibration constraint total,
/// re-checked (and echoed) after every weight calibration.
pub const CONSTRAINT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Imputation(#[from] ImputationError),
    #[error(transparent)]
    Variance(#[from] VarianceError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("subcohort column `{column}` is not in the cohort file")]
    MissingSubcohortColumn { column: String },
    #[error("subcohort column `{column}` must hold 0/1; row id `{id}` holds `{value}`")]
    BadSubcohortFlag {
        column: String,
        id: String,
        value: String,
    },
    #[error(
        "row id `{id}` is in the analysis sample but its expensive covariate \
         `{column}` is missing"
    )]
    MissingMeasured { column: String, id: String },
    #[error(
        "calibration constraint `{name}` missed its total: relative residual \
         {residual:e} exceeds {limit:e}"
    )]
    ConstraintDrift {
        name: String,
        residual: f64,
        limit: f64,
    },
}

/// Cohort file loaded for analysis: the validated dataset plus the recorded
/// subcohort membership flags when the config names a flag column.
pub struct LoadedCohort {
    pub dataset: CohortDataset,
    pub subcohort: Option<Vec<bool>>,
}

/// Reads and validates the cohort file named by `config`, extracting its
/// recorded subcohort flags when `subcohort_column` is set.
pub fn load_cohort(config: &PipelineConfig) -> Result<LoadedCohort, PipelineError> {
    let raw = io::read_table(&config.cohort)?;
    let schema = CovariateSchema {
        low_cost: config.low_cost.clone(),
        expensive: config.expensive.clone(),
        stratum_column: config.stratum_column.clone(),
    };
    let extra: Vec<&str> = config.subcohort_column.iter().map(String::as_str).collect();
    let dataset = CohortDataset::validate(&raw, &schema, &extra)?;
    let subcohort = match &config.subcohort_column {
        Some(column) => Some(subcohort_flags(&raw, &dataset, column)?),
        None => None,
    };
    Ok(LoadedCohort { dataset, subcohort })
}

/// Maps a 0/1 flag column onto the validated (time-sorted) dataset order.
fn subcohort_flags(
    raw: &RawTable,
    dataset: &CohortDataset,
    column: &str,
) -> Result<Vec<bool>, PipelineError> {
    let ci = raw
        .columns
        .iter()
        .position(|c| c == column)
        .ok_or_else(|| PipelineError::MissingSubcohortColumn {
            column: column.to_string(),
        })?;
    let idi = raw
        .columns
        .iter()
        .position(|c| c == "id")
        .expect("validated tables have an id column");
    let mut by_id: HashMap<&str, bool> = HashMap::with_capacity(raw.rows.len());
    for row in &raw.rows {
        let flag = match row[ci].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(PipelineError::BadSubcohortFlag {
                    column: column.to_string(),
                    id: row[idi].clone(),
                    value: other.to_string(),
                })
            }
        };
        by_id.insert(row[idi].as_str(), flag);
    }
    Ok(dataset
        .ids()
        .iter()
        .map(|id| by_id[id.as_str()])
        .collect())
}

/// Everything one method run on a cohort file produces.
#[derive(Debug)]
pub struct CohortAnalysis {
    pub report: AnalysisReport,
    /// Phase-two roles; absent for the full-cohort fit.
    pub assignment: Option<SampleAssignment>,
    /// Inverse-probability design weight per cohort unit (zero off-sample).
    pub design_weights: Vec<f64>,
    /// Weight each unit carried into the fit: calibrated for the balanced
    /// methods, the design weight otherwise.
    pub analysis_weights: Vec<f64>,
    /// Relative residual of each calibration constraint, by name; empty for
    /// uncalibrated methods.
    pub constraint_residuals: BTreeMap<String, f64>,
}

/// Runs the configured method on a validated cohort.
pub fn analyse_cohort(
    dataset: &CohortDataset,
    subcohort: Option<&[bool]>,
    config: &PipelineConfig,
) -> Result<CohortAnalysis, PipelineError> {
    config.validate()?;
    let method = config.method()?;
    let model_terms = config.model_terms();
    let refs: Vec<&str> = model_terms.iter().map(String::as_str).collect();
    let spec = CoxModelSpec::parse(&refs)?;
    let available: Vec<String> = dataset
        .z_names()
        .iter()
        .chain(dataset.x_names())
        .cloned()
        .collect();
    spec.validate_against(&available)?;

    match method {
        Method::Full => analyse_full(dataset, &spec),
        Method::CaseCohort => analyse_case_cohort(dataset, subcohort, config, &spec),
        _ => analyse_with_imputation(dataset, subcohort, config, &spec, method),
    }
}

fn analyse_full(
    dataset: &CohortDataset,
    spec: &CoxModelSpec,
) -> Result<CohortAnalysis, PipelineError> {
    let rows: Vec<usize> = (0..dataset.n()).collect();
    require_measured(dataset, spec, &rows)?;
    let weights = vec![1.0; dataset.n()];
    let (fit, _) = sim::fit_subset(dataset, spec, &rows, &weights, None)?;
    let se: Vec<f64> = (0..spec.len()).map(|j| fit.info_inv[(j, j)].sqrt()).collect();
    let estimate: Vec<f64> = fit.beta.iter().copied().collect();
    Ok(CohortAnalysis {
        report: report_from(Method::Full, 1, false, spec, &estimate, &se),
        assignment: None,
        design_weights: weights.clone(),
        analysis_weights: weights,
        constraint_residuals: BTreeMap::new(),
    })
}

fn analyse_case_cohort(
    dataset: &CohortDataset,
    subcohort: Option<&[bool]>,
    config: &PipelineConfig,
    spec: &CoxModelSpec,
) -> Result<CohortAnalysis, PipelineError> {
    let mut rng = sampling_rng(config);
    let assignment = resolve_phase_two(dataset, subcohort, config, &mut rng)?;
    let stratified = dataset.stratum().is_some();
    let (variant, design) = if stratified {
        (WeightVariant::StratifiedSupersampled, DesignVariance::Stratified)
    } else {
        (WeightVariant::CaseCohort, DesignVariance::CaseCohort)
    };
    let weights = closed_form_weights(dataset, &assignment, variant)?;
    let rows = assignment.analysed_indices();
    require_measured(dataset, spec, &rows)?;
    let (fit, psi) = sim::fit_subset(dataset, spec, &rows, &weights, None)?;
    let cov = design.covariance(dataset, &fit, &psi, Some(&assignment))?;
    let se: Vec<f64> = (0..spec.len()).map(|j| cov[(j, j)].sqrt()).collect();
    let estimate: Vec<f64> = fit.beta.iter().copied().collect();
    Ok(CohortAnalysis {
        report: report_from(Method::CaseCohort, 1, false, spec, &estimate, &se),
        assignment: Some(assignment),
        design_weights: weights.clone(),
        analysis_weights: weights,
        constraint_residuals: BTreeMap::new(),
    })
}

fn analyse_with_imputation(
    dataset: &CohortDataset,
    subcohort: Option<&[bool]>,
    config: &PipelineConfig,
    spec: &CoxModelSpec,
    method: Method,
) -> Result<CohortAnalysis, PipelineError> {
    let n = dataset.n();
    let mut rng = sampling_rng(config);
    let mut assignment = resolve_phase_two(dataset, subcohort, config, &mut rng)?;
    require_measured(dataset, spec, &assignment.phase_two_indices())?;
    let stratified = dataset.stratum().is_some();

    let mut residuals = BTreeMap::new();
    let (rows, design_weights, weights, design_variance) = if !method.uses_supersample() {
        // Whole-cohort imputation: everyone analysed at unit weight, model
        // variance only.
        let ones = vec![1.0; n];
        ((0..n).collect::<Vec<usize>>(), ones.clone(), ones, DesignVariance::None)
    } else {
        let variance = if stratified {
            DesignVariance::Stratified
        } else {
            DesignVariance::Supersample
        };
        let (design_weights, weights) = if method.balanced() {
            let psi_low = submodel_influence(dataset, config)?;
            if stratified {
                let alloc = sim::stratum_allocation(dataset, config.supersample_size)?;
                add_stratified_balanced_supersample(
                    dataset,
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
            let calibrated = calibrate_iss_weights(dataset, &assignment, &psi_low)?;
            residuals = constraint_residuals(&calibrated.system, &calibrated.weights);
            check_constraints(&residuals)?;
            (initial_weights(dataset, &assignment, &calibrated.system), calibrated.weights)
        } else {
            if stratified {
                let alloc = sim::stratum_allocation(dataset, config.supersample_size)?;
                add_stratified_random_supersample(dataset, &mut assignment, &alloc, &mut rng)?;
            } else {
                add_random_supersample(&mut assignment, config.supersample_size, &mut rng)?;
            }
            let variant = if stratified {
                WeightVariant::StratifiedSupersampled
            } else {
                WeightVariant::Supersampled
            };
            let w = closed_form_weights(dataset, &assignment, variant)?;
            (w.clone(), w)
        };
        (assignment.analysed_indices(), design_weights, weights, variance)
    };

    let z_columns = conditioning_columns(config)?;
    let z_refs: Vec<&str> = z_columns.iter().map(String::as_str).collect();
    let frame = frame_for_assignment(dataset, &rows, &assignment, &weights, &z_refs)?;
    let imp_seed = derive_rng(
        config.seed,
        &[stage::IMPUTE, 0, method.stream_index()],
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
        let (fit, psi) = sim::fit_subset(dataset, spec, &rows, &weights, Some(&copy.x))?;
        let cov = design_variance.covariance(dataset, &fit, &psi, Some(&assignment))?;
        estimates.push(fit.beta.iter().copied().collect::<Vec<f64>>());
        covariances.push(cov);
    }
    let pooled = rubin_pool(&estimates, &covariances)?;

    let terms = spec
        .labels()
        .into_iter()
        .enumerate()
        .map(|(j, term)| TermEstimate {
            term,
            estimate: pooled.beta[j],
            se: pooled.se[j],
            lo95: pooled.lo95[j],
            hi95: pooled.hi95[j],
        })
        .collect();
    Ok(CohortAnalysis {
        report: AnalysisReport {
            method: method.label().to_string(),
            copies: pooled.copies,
            flagged,
            terms,
        },
        assignment: Some(assignment),
        design_weights,
        analysis_weights: weights,
        constraint_residuals: residuals,
    })
}

/// Influence-guided sampling design for a cohort file, without the analysis:
/// submodel fit, balanced supersample draw, and weight calibration.
#[derive(Debug)]
pub struct SamplingDesign {
    pub assignment: SampleAssignment,
    pub design_weights: Vec<f64>,
    pub calibrated_weights: Vec<f64>,
    /// (target, achieved) totals per calibration constraint.
    pub constraint_totals: BTreeMap<String, (f64, f64)>,
    pub constraint_residuals: BTreeMap<String, f64>,
}

/// Runs the selection-and-weighting stage alone: working-model influence,
/// balanced supersample, calibration.  This is what the `sample` command
/// writes out.
pub fn design_sample(
    dataset: &CohortDataset,
    subcohort: Option<&[bool]>,
    config: &PipelineConfig,
) -> Result<SamplingDesign, PipelineError> {
    let mut rng = sampling_rng(config);
    let mut assignment = resolve_phase_two(dataset, subcohort, config, &mut rng)?;
    let psi_low = submodel_influence(dataset, config)?;
    if dataset.stratum().is_some() {
        let alloc = sim::stratum_allocation(dataset, config.supersample_size)?;
        add_stratified_balanced_supersample(dataset, &mut assignment, &psi_low, &alloc, &mut rng)?;
    } else {
        add_balanced_supersample(&mut assignment, &psi_low, config.supersample_size, &mut rng)?;
    }
    let calibrated = calibrate_iss_weights(dataset, &assignment, &psi_low)?;
    let residuals = constraint_residuals(&calibrated.system, &calibrated.weights);
    check_constraints(&residuals)?;
    let totals = constraint_totals(&calibrated.system, &calibrated.weights);
    Ok(SamplingDesign {
        design_weights: initial_weights(dataset, &assignment, &calibrated.system),
        calibrated_weights: calibrated.weights,
        assignment,
        constraint_totals: totals,
        constraint_residuals: residuals,
    })
}

/// The sampling stream: fixed path so a cohort-file run is reproducible from
/// the seed alone (and matches replicate 0 of a same-seed simulation).
fn sampling_rng(config: &PipelineConfig) -> Prng {
    derive_rng(config.seed, &[stage::SAMPLE, 0])
}

/// Phase-two roles: taken from the recorded flag column when present,
/// otherwise drawn here.
fn resolve_phase_two(
    dataset: &CohortDataset,
    subcohort: Option<&[bool]>,
    config: &PipelineConfig,
    rng: &mut Prng,
) -> Result<SampleAssignment, PipelineError> {
    if let Some(flags) = subcohort {
        return Ok(assignment_from_subcohort_flags(dataset, flags)?);
    }
    let n_sc = config.subcohort_size.ok_or_else(|| {
        ConfigError::Invalid {
            detail: "phase-two design unknown: give `subcohort_column` or `subcohort_size`"
                .into(),
        }
    })?;
    if dataset.stratum().is_some() {
        let alloc = sim::stratum_allocation(dataset, n_sc)?;
        Ok(draw_stratified_case_cohort(dataset, &alloc, rng)?)
    } else {
        Ok(draw_case_cohort(dataset, n_sc, rng)?)
    }
}

/// Unweighted fit of the low-cost working model on the whole cohort; its
/// per-unit influence drives inclusion probabilities and calibration.
fn submodel_influence(
    dataset: &CohortDataset,
    config: &PipelineConfig,
) -> Result<crate::numeric::RowMat, PipelineError> {
    let terms = config.submodel_terms();
    let refs: Vec<&str> = terms.iter().map(String::as_str).collect();
    let sub_spec = CoxModelSpec::parse(&refs)?;
    let all: Vec<usize> = (0..dataset.n()).collect();
    require_measured(dataset, &sub_spec, &all)?;
    let ones = vec![1.0; dataset.n()];
    let (_, psi_low) = sim::fit_subset(dataset, &sub_spec, &all, &ones, None)?;
    Ok(psi_low)
}

/// Imputer conditioning set: the columns the low-cost working model uses.
/// Interaction terms contribute their component columns.
fn conditioning_columns(config: &PipelineConfig) -> Result<Vec<String>, PipelineError> {
    let mut out: Vec<String> = Vec::new();
    let push = |name: &str, out: &mut Vec<String>| {
        if !out.iter().any(|c| c == name) {
            out.push(name.to_string());
        }
    };
    for label in config.submodel_terms() {
        match Term::parse(&label)? {
            Term::Main(a) => push(&a, &mut out),
            Term::Interaction(a, b) => {
                push(&a, &mut out);
                push(&b, &mut out);
            }
        }
    }
    Ok(out)
}

/// Errors if any row in `rows` is missing an expensive covariate the model
/// (or submodel) needs.
fn require_measured(
    dataset: &CohortDataset,
    spec: &CoxModelSpec,
    rows: &[usize],
) -> Result<(), PipelineError> {
    let mut needed: Vec<usize> = Vec::new();
    let add = |name: &str, needed: &mut Vec<usize>| {
        if let Some(j) = dataset.x_names().iter().position(|c| c == name) {
            if !needed.contains(&j) {
                needed.push(j);
            }
        }
    };
    for term in spec.terms() {
        match term {
            Term::Main(a) => add(a, &mut needed),
            Term::Interaction(a, b) => {
                add(a, &mut needed);
                add(b, &mut needed);
            }
        }
    }
    for &j in &needed {
        for &i in rows {
            if !dataset.x_observed(i, j) {
                return Err(PipelineError::MissingMeasured {
                    column: dataset.x_names()[j].clone(),
                    id: dataset.ids()[i].clone(),
                });
            }
        }
    }
    Ok(())
}

/// Scatter of the calibration system's initial (inverse-probability) weights
/// onto the cohort: cases 1, sampled non-cases their starting weight, others
/// zero.
fn initial_weights(
    dataset: &CohortDataset,
    assignment: &SampleAssignment,
    system: &ConstraintSystem,
) -> Vec<f64> {
    let mut out = vec![0.0; dataset.n()];
    for i in 0..dataset.n() {
        if assignment.role[i] == Role::Case {
            out[i] = 1.0;
        }
    }
    for (r, &i) in system.units.iter().enumerate() {
        out[i] = system.problem.initial_weights[r];
    }
    out
}

const CONSTRAINT_NAMES: [&str; 3] = [
    "subcohort_noncase_total",
    "supersample_total",
    "case_total",
];

/// Achieved versus target weighted totals for the three calibration
/// constraints (the case total is exact by construction).
fn constraint_totals(
    system: &ConstraintSystem,
    weights: &[f64],
) -> BTreeMap<String, (f64, f64)> {
    let mut achieved = [0.0_f64; 3];
    for (r, &i) in system.units.iter().enumerate() {
        for c in 0..2 {
            achieved[c] += system.problem.aux.get(r, c) * weights[i];
        }
    }
    achieved[2] = system.targets[2];
    CONSTRAINT_NAMES
        .iter()
        .zip(system.targets.iter().zip(achieved))
        .map(|(name, (&target, got))| (name.to_string(), (target, got)))
        .collect()
}

fn constraint_residuals(system: &ConstraintSystem, weights: &[f64]) -> BTreeMap<String, f64> {
    constraint_totals(system, weights)
        .into_iter()
        .map(|(name, (target, got))| (name, (got - target).abs() / target.abs().max(1.0)))
        .collect()
}

fn check_constraints(residuals: &BTreeMap<String, f64>) -> Result<(), PipelineError> {
    for (name, &residual) in residuals {
        if !(residual <= CONSTRAINT_TOLERANCE) {
            return Err(PipelineError::ConstraintDrift {
                name: name.clone(),
                residual,
                limit: CONSTRAINT_TOLERANCE,
            });
        }
    }
    Ok(())
}

fn report_from(
    method: Method,
    copies: usize,
    flagged: bool,
    spec: &CoxModelSpec,
    estimate: &[f64],
    se: &[f64],
) -> AnalysisReport {
    let terms = spec
        .labels()
        .into_iter()
        .enumerate()
        .map(|(j, term)| TermEstimate {
            term,
            estimate: estimate[j],
            se: se[j],
            lo95: estimate[j] - Z_975 * se[j],
            hi95: estimate[j] + Z_975 * se[j],
        })
        .collect();
    AnalysisReport {
        method: method.label().to_string(),
        copies,
        flagged,
        terms,
    }
}

fn ensure_dir(dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(|e| IoError::File {
        path: dir.display().to_string(),
        source: e,
    })?;
    Ok(())
}

/// Resolved configuration serialized into the metadata sidecar, so a result
/// directory records the exact design that produced it.  The `[output]`
/// section (directory, thread count) is an execution detail with no bearing
/// on the results and is excluded from both the record and its hash.
fn metadata_for(
    command: &str,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<RunMetadata, PipelineError> {
    let mut stripped = config.clone();
    stripped.output = crate::config::OutputConfig::default();
    let text = stripped.canonical_toml();
    let mut value = serde_json::to_value(&stripped).map_err(IoError::Json)?;
    value
        .as_object_mut()
        .expect("config serializes to an object")
        .remove("output");
    Ok(RunMetadata::new(command, &text, value, seed))
}

/// Runs the Monte Carlo study described by `config.simulate` and writes
/// `results.csv`, `metrics.csv`, `timings.csv`, `table.txt`, and
/// `metadata.json` into the output directory.  Returns the rendered
/// comparison table.
pub fn cmd_simulate(
    config: &ExperimentConfig,
    paper_scale: bool,
) -> Result<String, PipelineError> {
    let mut resolved = config.clone();
    let mut sim_config = config.simulate_config();
    if paper_scale {
        sim_config = at_paper_scale(&sim_config);
    }
    let methods = config.method_list()?;
    resolved.simulate = Some(sim_config.clone());
    resolved.methods = methods.iter().map(|m| m.label().to_string()).collect();

    let out = resolved.output.directory.clone();
    ensure_dir(&out)?;
    eprintln!(
        "simulate: cohort {} / subcohort {} / supersample {}, {} replicates, {} methods",
        sim_config.cohort_size,
        sim_config.subcohort_size,
        sim_config.supersample_size,
        sim_config.replicates,
        methods.len(),
    );
    let study = sim::run_study(&sim_config, &methods)?;
    eprintln!("simulate: writing results to {}", out.display());

    let terms: Vec<String> = sim_config
        .analysis_terms()
        .iter()
        .map(|s| s.to_string())
        .collect();
    io::write_results_csv(&out.join("results.csv"), &terms, &study.results)?;
    io::write_metrics_csv(&out.join("metrics.csv"), &study.metrics)?;
    io::write_timings_csv(&out.join("timings.csv"), &study.metrics)?;
    io::write_table_txt(&out.join("table.txt"), &study.metrics)?;

    let mut metadata = metadata_for("simulate", &resolved, sim_config.seed)?;
    metadata.methods = resolved.methods.clone();
    metadata.baseline_log_scale = Some(study.baseline_log_scale);
    io::write_json(&out.join("metadata.json"), &metadata)?;
    Ok(io::render_metrics_table(&study.metrics))
}

/// Analyzes the configured cohort file and writes `estimates.csv`,
/// `estimates.json`, and `metadata.json`.  Returns the report.
pub fn cmd_analyze(config: &ExperimentConfig) -> Result<AnalysisReport, PipelineError> {
    let pipeline = config.pipeline_config()?;
    pipeline.validate()?;
    let out = config.output.directory.clone();
    ensure_dir(&out)?;

    eprintln!("analyze: reading {}", pipeline.cohort.display());
    let loaded = load_cohort(pipeline)?;
    eprintln!(
        "analyze: {} units, {} events, method {}",
        loaded.dataset.n(),
        loaded.dataset.n_events(),
        pipeline.method,
    );
    let analysis = analyse_cohort(&loaded.dataset, loaded.subcohort.as_deref(), pipeline)?;

    io::write_estimates_csv(&out.join("estimates.csv"), &analysis.report)?;
    io::write_estimates_json(&out.join("estimates.json"), &analysis.report)?;
    let mut metadata = metadata_for("analyze", config, pipeline.seed)?;
    metadata.methods = vec![analysis.report.method.clone()];
    metadata.constraint_residuals = analysis.constraint_residuals.clone();
    io::write_json(&out.join("metadata.json"), &metadata)?;
    eprintln!("analyze: wrote estimates to {}", out.display());
    Ok(analysis.report)
}

/// Lines echoed by the `sample` command: achieved calibration totals.
pub fn describe_constraints(design: &SamplingDesign) -> Vec<String> {
    design
        .constraint_totals
        .iter()
        .map(|(name, (target, got))| {
            format!(
                "constraint {name}: target {target:.6}, achieved {got:.6}, \
                 relative residual {:.3e}",
                design.constraint_residuals[name],
            )
        })
        .collect()
}

/// Draws and calibrates the influence-balanced design for the configured
/// cohort file, writing `assignment.csv`, `weights.csv`, and
/// `metadata.json`.  Returns the design (echo lines come from
/// [`describe_constraints`]).
pub fn cmd_sample(config: &ExperimentConfig) -> Result<SamplingDesign, PipelineError> {
    let pipeline = config.pipeline_config()?;
    pipeline.validate()?;
    if pipeline.supersample_size == 0 {
        return Err(ConfigError::Invalid {
            detail: "`sample` draws a supersample; set a positive `supersample_size`".into(),
        }
        .into());
    }
    let out = config.output.directory.clone();
    ensure_dir(&out)?;

    eprintln!("sample: reading {}", pipeline.cohort.display());
    let loaded = load_cohort(pipeline)?;
    let design = design_sample(&loaded.dataset, loaded.subcohort.as_deref(), pipeline)?;
    eprintln!(
        "sample: {} cases, {} subcohort non-cases, {} supersampled",
        design.assignment.sizes.cases,
        design.assignment.sizes.subcohort_noncases,
        design.assignment.sizes.supersample,
    );

    io::write_assignment_csv(&out.join("assignment.csv"), &loaded.dataset, &design.assignment)?;
    io::write_weights_csv(
        &out.join("weights.csv"),
        &loaded.dataset,
        &design.design_weights,
        &design.calibrated_weights,
    )?;
    let mut metadata = metadata_for("sample", config, pipeline.seed)?;
    metadata.methods = vec![pipeline.method.clone()];
    metadata.constraint_residuals = design.constraint_residuals.clone();
    io::write_json(&out.join("metadata.json"), &metadata)?;
    eprintln!("sample: wrote design to {}", out.display());
    Ok(design)
}
