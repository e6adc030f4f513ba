//! Result-file writers and readers.
//!
//! Every statistical output (replicate results, metric tables, estimates,
//! assignments, weights, metadata) is written with deterministic field
//! ordering and shortest-round-trip float formatting, so a rerun with the
//! same configuration and seed reproduces the files byte for byte at any
//! parallelism degree.  Wall-clock timings are the one exception; they are
//! confined to `timings.csv` and the time rows of the rendered text table.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cohort::{CohortDataset, CovariateKind, RawTable};
use crate::sampling::SampleAssignment;
use crate::sim::{Method, MetricsTable, ReplicateResult};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: record {record}: {detail}")]
    BadRecord {
        path: String,
        record: usize,
        detail: String,
    },
    #[error("metadata serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

fn file_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::File {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path, source: csv::Error) -> IoError {
    IoError::Csv {
        path: path.display().to_string(),
        source,
    }
}

/// Shortest decimal string that round-trips to the same `f64`.
fn fmt(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format!("{v}")
    }
}

fn open_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, IoError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| file_err(path, e))?;
        }
    }
    let file = File::create(path).map_err(|e| file_err(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

/// Reads a delimited file into an unvalidated table of strings.
pub fn read_table(path: &Path) -> Result<RawTable, IoError> {
    let file = File::open(path).map_err(|e| file_err(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(file));
    let columns: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        rows.push(record.iter().map(str::to_string).collect());
    }
    Ok(RawTable { columns, rows })
}

/// Writes a cohort back to a delimited file: `id,time,event`, the low-cost
/// columns, the expensive columns (`NA` where unmeasured), and the stratum
/// label when the design is stratified.
pub fn write_cohort_csv(path: &Path, dataset: &CohortDataset) -> Result<(), IoError> {
    // Categorical covariates are stored dummy-expanded but the file format
    // (and the validator) use one integer-coded column, so collapse the
    // dummies back: code l when dummy `name.l` is 1, reference level 1
    // otherwise.
    enum Export {
        Plain(usize),
        Coded(Vec<usize>),
    }
    let mut header = vec!["id".to_string(), "time".into(), "event".into()];
    let mut z_fields: Vec<Export> = Vec::new();
    for spec in &dataset.schema().low_cost {
        match spec.kind {
            CovariateKind::Categorical { levels } => {
                let dummies = (2..=levels)
                    .map(|l| {
                        let name = format!("{}.{}", spec.name, l);
                        dataset
                            .z_names()
                            .iter()
                            .position(|c| *c == name)
                            .expect("expanded column exists")
                    })
                    .collect();
                header.push(spec.name.clone());
                z_fields.push(Export::Coded(dummies));
            }
            _ => {
                let j = dataset
                    .z_names()
                    .iter()
                    .position(|c| *c == spec.name)
                    .expect("expanded column exists");
                header.push(spec.name.clone());
                z_fields.push(Export::Plain(j));
            }
        }
    }
    header.extend(dataset.x_names().iter().cloned());
    // A design stratified on one of the covariates already has its column;
    // only a separate label column needs writing.
    let covariate_names = |schema: &crate::cohort::CovariateSchema| {
        schema
            .low_cost
            .iter()
            .chain(&schema.expensive)
            .map(|s| s.name.clone())
            .collect::<Vec<String>>()
    };
    let stratum_extra = dataset
        .schema()
        .stratum_column
        .as_ref()
        .filter(|col| !covariate_names(dataset.schema()).contains(col))
        .cloned();
    if let Some(col) = &stratum_extra {
        header.push(col.clone());
    }

    let mut w = open_writer(path)?;
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for i in 0..dataset.n() {
        let mut row = vec![
            dataset.ids()[i].clone(),
            fmt(dataset.time()[i]),
            dataset.event()[i].to_string(),
        ];
        for field in &z_fields {
            match field {
                Export::Plain(j) => row.push(fmt(dataset.z_col(*j)[i])),
                Export::Coded(dummies) => {
                    let code = dummies
                        .iter()
                        .enumerate()
                        .find(|(_, &j)| dataset.z_col(j)[i] == 1.0)
                        .map_or(1, |(k, _)| k + 2);
                    row.push(code.to_string());
                }
            }
        }
        for j in 0..dataset.x_names().len() {
            row.push(fmt(dataset.x_col(j)[i]));
        }
        if stratum_extra.is_some() {
            let h = dataset.stratum().expect("stratified dataset")[i];
            row.push(dataset.stratum_labels()[h].clone());
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| file_err(path, e))
}

/// Writes one row per replicate, method, and coefficient.  Failed
/// replicates appear as a single row with empty estimate fields and the
/// error message.  Wall-clock seconds are deliberately absent.
pub fn write_results_csv(
    path: &Path,
    terms: &[String],
    results: &[ReplicateResult],
) -> Result<(), IoError> {
    let mut w = open_writer(path)?;
    w.write_record(["replicate", "method", "term", "estimate", "se", "flagged", "error"])
        .map_err(|e| csv_err(path, e))?;
    for r in results {
        let rep = r.replicate.to_string();
        let method = r.method.label();
        let flagged = if r.flagged { "1" } else { "0" };
        if let Some(msg) = &r.error {
            w.write_record([rep.as_str(), method, "", "", "", flagged, msg])
                .map_err(|e| csv_err(path, e))?;
            continue;
        }
        for (j, term) in terms.iter().enumerate() {
            w.write_record([
                rep.as_str(),
                method,
                term,
                &fmt(r.estimate[j]),
                &fmt(r.se[j]),
                flagged,
                "",
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| file_err(path, e))
}

/// Reads a replicate-result file back for re-summarization.  Wall-clock
/// seconds are not stored in the file and come back as zero.
pub fn read_results_csv(path: &Path) -> Result<Vec<ReplicateResult>, IoError> {
    let table = read_table(path)?;
    let idx = |name: &str| -> Result<usize, IoError> {
        table
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| IoError::BadRecord {
                path: path.display().to_string(),
                record: 0,
                detail: format!("missing column `{name}`"),
            })
    };
    let c_rep = idx("replicate")?;
    let c_method = idx("method")?;
    let c_term = idx("term")?;
    let c_est = idx("estimate")?;
    let c_se = idx("se")?;
    let c_flag = idx("flagged")?;
    let c_err = idx("error")?;
    let mut out: Vec<ReplicateResult> = Vec::new();
    for (line, row) in table.rows.iter().enumerate() {
        let bad = |detail: String| IoError::BadRecord {
            path: path.display().to_string(),
            record: line + 1,
            detail,
        };
        let replicate: usize = row[c_rep]
            .parse()
            .map_err(|_| bad(format!("bad replicate `{}`", row[c_rep])))?;
        let method = Method::parse(&row[c_method])
            .ok_or_else(|| bad(format!("unknown method `{}`", row[c_method])))?;
        let flagged = row[c_flag] == "1";
        let error = if row[c_err].is_empty() {
            None
        } else {
            Some(row[c_err].clone())
        };
        let fresh = match out.last() {
            Some(prev) => prev.replicate != replicate || prev.method != method,
            None => true,
        };
        if fresh {
            out.push(ReplicateResult {
                replicate,
                method,
                estimate: Vec::new(),
                se: Vec::new(),
                flagged,
                error,
                seconds: 0.0,
            });
        }
        let current = out.last_mut().expect("just pushed");
        if row[c_term].is_empty() {
            continue; // failed replicate carries no coefficients
        }
        let estimate: f64 = row[c_est]
            .parse()
            .map_err(|_| bad(format!("bad estimate `{}`", row[c_est])))?;
        let se: f64 = row[c_se]
            .parse()
            .map_err(|_| bad(format!("bad se `{}`", row[c_se])))?;
        current.estimate.push(estimate);
        current.se.push(se);
    }
    Ok(out)
}

/// Writes the per-coefficient metric table: one row per method and term.
pub fn write_metrics_csv(path: &Path, table: &MetricsTable) -> Result<(), IoError> {
    let mut w = open_writer(path)?;
    w.write_record([
        "method",
        "term",
        "truth",
        "mean",
        "bias",
        "mc_se",
        "mean_se",
        "coverage",
        "rel_eff",
        "replicates_used",
        "replicates_failed",
        "flagged",
    ])
    .map_err(|e| csv_err(path, e))?;
    for m in &table.methods {
        for c in &m.coefficients {
            w.write_record([
                m.method.as_str(),
                c.term.as_str(),
                &fmt(c.truth),
                &fmt(c.mean),
                &fmt(c.bias),
                &fmt(c.mc_se),
                &fmt(c.mean_se),
                &fmt(c.coverage),
                &c.rel_eff.map(fmt).unwrap_or_default(),
                &m.replicates_used.to_string(),
                &m.replicates_failed.to_string(),
                &m.flagged.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| file_err(path, e))
}

/// Writes wall-clock summaries per method.  This file is not byte-stable
/// across reruns; keep it apart from the statistical results.
pub fn write_timings_csv(path: &Path, table: &MetricsTable) -> Result<(), IoError> {
    let mut w = open_writer(path)?;
    w.write_record(["method", "replicates_used", "mean_seconds", "max_seconds", "min_seconds"])
        .map_err(|e| csv_err(path, e))?;
    for m in &table.methods {
        w.write_record([
            m.method.as_str(),
            &m.replicates_used.to_string(),
            &fmt(m.mean_seconds),
            &fmt(m.max_seconds),
            &fmt(m.min_seconds),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| file_err(path, e))
}

fn round3(v: f64) -> String {
    format!("{v:.3}")
}

/// Renders the method-comparison table as aligned text: timing rows, then
/// per-coefficient bias, Monte Carlo standard error with relative
/// efficiency, and mean estimated standard error with empirical coverage.
/// The timing rows make this rendering non-reproducible across reruns.
pub fn render_metrics_table(table: &MetricsTable) -> String {
    let titles: Vec<String> = table
        .methods
        .iter()
        .map(|m| {
            Method::parse(&m.method)
                .map(|m| m.title().to_string())
                .unwrap_or_else(|| m.method.clone())
        })
        .collect();
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["statistic".to_string()];
    header.extend(titles);
    rows.push(header);

    for (label, pick) in [
        ("avg.time", 0usize),
        ("max.time", 1),
        ("min.time", 2),
    ] {
        let mut row = vec![label.to_string()];
        for m in &table.methods {
            let v = match pick {
                0 => m.mean_seconds,
                1 => m.max_seconds,
                _ => m.min_seconds,
            };
            row.push(round3(v));
        }
        rows.push(row);
    }
    for (j, term) in table.terms.iter().enumerate() {
        let mut row = vec![format!("bias {term}")];
        for m in &table.methods {
            row.push(round3(m.coefficients[j].bias.abs()));
        }
        rows.push(row);
    }
    for (j, term) in table.terms.iter().enumerate() {
        let mut row = vec![format!("mc.se {term}")];
        for m in &table.methods {
            let c = &m.coefficients[j];
            row.push(match c.rel_eff {
                Some(r) => format!("{}({:.1}%)", round3(c.mc_se), 100.0 * r),
                None => round3(c.mc_se),
            });
        }
        rows.push(row);
    }
    for (j, term) in table.terms.iter().enumerate() {
        let mut row = vec![format!("est.se {term}")];
        for m in &table.methods {
            let c = &m.coefficients[j];
            row.push(format!("{}({:.3})", round3(c.mean_se), c.coverage));
        }
        rows.push(row);
    }

    let cols = rows[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                out.push_str("  ");
            }
            out.push_str(cell);
            for _ in cell.len()..widths[c] {
                out.push(' ');
            }
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    }
    out
}

/// Writes `render_metrics_table` output to a file.
pub fn write_table_txt(path: &Path, table: &MetricsTable) -> Result<(), IoError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| file_err(path, e))?;
        }
    }
    let mut file = BufWriter::new(File::create(path).map_err(|e| file_err(path, e))?);
    file.write_all(render_metrics_table(table).as_bytes())
        .map_err(|e| file_err(path, e))?;
    file.flush().map_err(|e| file_err(path, e))
}

/// One analysed coefficient of a finished pipeline run.
#[derive(Debug, Clone, Serialize)]
pub struct TermEstimate {
    pub term: String,
    pub estimate: f64,
    pub se: f64,
    pub lo95: f64,
    pub hi95: f64,
}

/// Pooled (or single-fit) estimates of one analysis run.
#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub method: String,
    /// Imputed copies pooled; 1 for direct fits.
    pub copies: usize,
    /// An imputation stage skipped a proposal fit or fell back mid-cycle.
    pub flagged: bool,
    pub terms: Vec<TermEstimate>,
}

/// The estimates file as text: `term,estimate,se,lo95,hi95` rows.
pub fn render_estimates_csv(report: &AnalysisReport) -> String {
    let quote = |s: &str| {
        if s.contains([',', '"', '\n']) {
            format!("\"{}\"", s.replace('"', "\"\""))
        } else {
            s.to_string()
        }
    };
    let mut out = String::from("term,estimate,se,lo95,hi95\n");
    for t in &report.terms {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            quote(&t.term),
            fmt(t.estimate),
            fmt(t.se),
            fmt(t.lo95),
            fmt(t.hi95),
        ));
    }
    out
}

/// Writes `term,estimate,se,lo95,hi95` rows.
pub fn write_estimates_csv(path: &Path, report: &AnalysisReport) -> Result<(), IoError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| file_err(path, e))?;
        }
    }
    std::fs::write(path, render_estimates_csv(report)).map_err(|e| file_err(path, e))
}

/// Writes the same report as pretty-printed JSON.
pub fn write_estimates_json(path: &Path, report: &AnalysisReport) -> Result<(), IoError> {
    write_json(path, report)
}

/// Writes the design produced by a sampling run: one row per cohort unit
/// with its role, subcohort membership, and supersample inclusion
/// probability (blank outside the supersample pool).
pub fn write_assignment_csv(
    path: &Path,
    dataset: &CohortDataset,
    assignment: &SampleAssignment,
) -> Result<(), IoError> {
    let mut w = open_writer(path)?;
    w.write_record(["id", "role", "in_subcohort", "inclusion_prob"])
        .map_err(|e| csv_err(path, e))?;
    for i in 0..dataset.n() {
        let p = assignment.inclusion_prob[i];
        w.write_record([
            dataset.ids()[i].as_str(),
            assignment.role[i].as_str(),
            if assignment.in_subcohort[i] { "1" } else { "0" },
            &if p > 0.0 { fmt(p) } else { String::new() },
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| file_err(path, e))
}

/// Writes design and calibrated weights per cohort unit; unsampled units
/// carry zeros.
pub fn write_weights_csv(
    path: &Path,
    dataset: &CohortDataset,
    design_weights: &[f64],
    calibrated_weights: &[f64],
) -> Result<(), IoError> {
    let mut w = open_writer(path)?;
    w.write_record(["id", "design_weight", "calibrated_weight"])
        .map_err(|e| csv_err(path, e))?;
    for i in 0..dataset.n() {
        w.write_record([
            dataset.ids()[i].as_str(),
            &fmt(design_weights[i]),
            &fmt(calibrated_weights[i]),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| file_err(path, e))
}

/// Fixed algorithm choices recorded with every run so a result file can be
/// traced to the exact variant that produced it.
#[derive(Debug, Clone, Serialize)]
pub struct DecisionRecord {
    pub tie_handling: &'static str,
    pub balanced_sampling: &'static str,
    pub calibration: &'static str,
    pub confidence_intervals: &'static str,
    pub imputation_start: &'static str,
    pub proposal_fit_guard: &'static str,
    pub low_cost_submodel: &'static str,
    pub baseline_calibration: &'static str,
}

impl Default for DecisionRecord {
    fn default() -> Self {
        DecisionRecord {
            tie_handling: "breslow",
            balanced_sampling: "cube flight on (inclusion, influence) with landing by constraint suppression",
            calibration: "exponential tilting solved by newton with column pruning",
            confidence_intervals: "wald 95%",
            imputation_start: "marginal draws from the observed subcohort values",
            proposal_fit_guard: "drop constant columns and two-valued columns with minor level under 3 rows; skip and flag on residual separation",
            low_cost_submodel: "unweighted fit of the low-cost terms on the full cohort",
            baseline_calibration: "order statistic of per-unit thresholds over max(500000, cohort) draws",
        }
    }
}

/// Reproducibility sidecar written next to every command's outputs.
///
/// Thread count and output directory are deliberately absent: results do
/// not depend on them.
#[derive(Debug, Clone, Serialize)]
pub struct RunMetadata {
    pub command: String,
    pub package_version: String,
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub methods: Vec<String>,
    pub seed: u64,
    /// Baseline log-scale used by the generator (simulation runs only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_log_scale: Option<f64>,
    pub decisions: DecisionRecord,
    /// Constraint residual echo for sampling runs, keyed by constraint name.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub constraint_residuals: BTreeMap<String, f64>,
}

impl RunMetadata {
    pub fn new(command: &str, config_text: &str, config: serde_json::Value, seed: u64) -> Self {
        RunMetadata {
            command: command.to_string(),
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: sha256_hex(config_text.as_bytes()),
            config,
            methods: Vec::new(),
            seed,
            baseline_log_scale: None,
            decisions: DecisionRecord::default(),
            constraint_residuals: BTreeMap::new(),
        }
    }
}

/// Hex digest of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Writes any serializable value as pretty-printed JSON with a trailing
/// newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| file_err(path, e))?;
        }
    }
    let mut file = BufWriter::new(File::create(path).map_err(|e| file_err(path, e))?);
    let text = serde_json::to_string_pretty(value)?;
    file.write_all(text.as_bytes()).map_err(|e| file_err(path, e))?;
    file.write_all(b"\n").map_err(|e| file_err(path, e))?;
    file.flush().map_err(|e| file_err(path, e))
}
