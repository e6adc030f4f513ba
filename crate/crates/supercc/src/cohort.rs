//! Cohort data model: covariate schema, validated survival dataset, and the
//! nonparametric hazard estimators every downstream module leans on.
//!
//! A cohort row is `(id, follow-up time, event indicator, low-cost
//! covariates, expensive covariates)`.  Low-cost covariates are observed for
//! everyone; expensive covariates may be missing outside the measured
//! subsample.  Categorical covariates are dummy-expanded at validation time
//! (`name.level` columns, first level as reference) so the rest of the crate
//! only ever sees numeric columns.

use std::collections::HashMap;

use thiserror::Error;

/// Scale of a declared covariate column.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    Continuous,
    Binary,
    /// Integer-coded `1..=levels`; expands to `levels - 1` dummy columns.
    Categorical { levels: u32 },
}

/// One declared covariate column.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub kind: CovariateKind,
}

impl CovariateSpec {
    pub fn continuous(name: &str) -> Self {
        CovariateSpec { name: name.into(), kind: CovariateKind::Continuous }
    }

    pub fn binary(name: &str) -> Self {
        CovariateSpec { name: name.into(), kind: CovariateKind::Binary }
    }

    pub fn categorical(name: &str, levels: u32) -> Self {
        CovariateSpec { name: name.into(), kind: CovariateKind::Categorical { levels } }
    }

    /// Column names after dummy expansion.
    fn expanded_names(&self) -> Vec<String> {
        match self.kind {
            CovariateKind::Continuous | CovariateKind::Binary => vec![self.name.clone()],
            CovariateKind::Categorical { levels } => {
                (2..=levels).map(|l| format!("{}.{}", self.name, l)).collect()
            }
        }
    }
}

/// Declares the covariate layout of a cohort file or generated cohort.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CovariateSchema {
    /// Fully observed block, available on every cohort member.
    pub low_cost: Vec<CovariateSpec>,
    /// Expensive block, measured only on the phase-two sample; may be
    /// missing elsewhere.  Categorical kinds are not supported here because
    /// the imputation engines model continuous and binary targets only.
    pub expensive: Vec<CovariateSpec>,
    /// Optional stratum label column for stratified designs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stratum_column: Option<String>,
}

/// Sentinel strings accepted as a missing expensive value.
fn is_missing_token(s: &str) -> bool {
    s.is_empty() || s == "NA"
}

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("missing required column `{0}` in cohort table")]
    MissingColumn(String),
    #[error("unknown column `{0}` in cohort table; declare it in the schema or remove it")]
    UnknownColumn(String),
    #[error("row {row}: follow-up time must be positive and finite, got `{value}`")]
    BadTime { row: usize, value: String },
    #[error("row {row}: event indicator must be 0 or 1, got `{value}`")]
    BadEvent { row: usize, value: String },
    #[error("row {row}: duplicate id `{id}`")]
    DuplicateId { row: usize, id: String },
    #[error("row {row}, column `{column}`: low-cost covariates may not be missing")]
    MissingLowCost { row: usize, column: String },
    #[error("row {row}, column `{column}`: expected a number, got `{value}`")]
    NotNumeric { row: usize, column: String, value: String },
    #[error("row {row}, column `{column}`: binary values must be 0 or 1, got `{value}`")]
    NotBinary { row: usize, column: String, value: String },
    #[error(
        "row {row}, column `{column}`: categorical level must be an integer in 1..={levels}, got `{value}`"
    )]
    BadLevel { row: usize, column: String, levels: u32, value: String },
    #[error("row {row}: stratum label may not be empty")]
    EmptyStratum { row: usize },
    #[error("expensive covariate `{0}` is declared categorical; only continuous and binary expensive covariates are supported")]
    CategoricalExpensive(String),
    #[error("duplicate covariate name `{0}` in schema")]
    DuplicateCovariate(String),
    #[error("cohort table has no rows")]
    Empty,
    #[error("risk-set total is not positive at event time {time}; cannot form a baseline hazard jump")]
    NonPositiveRiskTotal { time: f64 },
}

/// A parsed-but-unvalidated table: column names plus string cells, exactly as
/// read from a delimited file.
#[derive(Debug, Clone)]
pub struct RawTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

/// Validated, sorted cohort.
///
/// Rows are ordered by follow-up time ascending with events before
/// censorings at tied times, the order every risk-set scan in the crate
/// assumes.  Expensive covariate cells that are missing hold `NaN`; use
/// [`CohortDataset::x_observed`] rather than testing for `NaN` directly.
#[derive(Debug, Clone)]
pub struct CohortDataset {
    schema: CovariateSchema,
    ids: Vec<String>,
    time: Vec<f64>,
    event: Vec<u8>,
    z_names: Vec<String>,
    x_names: Vec<String>,
    z_cols: Vec<Vec<f64>>,
    x_cols: Vec<Vec<f64>>,
    stratum: Option<Vec<usize>>,
    stratum_labels: Vec<String>,
}

impl CohortDataset {
    /// Validates a raw table against `schema` and produces a sorted cohort.
    ///
    /// Columns listed in `allowed_extra` (for example a sampling-role column
    /// managed by the caller) are ignored; any other undeclared column is an
    /// error.  Validation of an exported cohort reproduces the same dataset,
    /// because sorting is stable and already-sorted input is left untouched.
    pub fn validate(
        raw: &RawTable,
        schema: &CovariateSchema,
        allowed_extra: &[&str],
    ) -> Result<Self, CohortError> {
        if raw.rows.is_empty() {
            return Err(CohortError::Empty);
        }
        let mut seen = HashMap::new();
        for spec in schema.low_cost.iter().chain(&schema.expensive) {
            if seen.insert(spec.name.clone(), ()).is_some() {
                return Err(CohortError::DuplicateCovariate(spec.name.clone()));
            }
        }
        for spec in &schema.expensive {
            if matches!(spec.kind, CovariateKind::Categorical { .. }) {
                return Err(CohortError::CategoricalExpensive(spec.name.clone()));
            }
        }

        let mut declared: Vec<&str> = vec!["id", "time", "event"];
        declared.extend(schema.low_cost.iter().map(|s| s.name.as_str()));
        declared.extend(schema.expensive.iter().map(|s| s.name.as_str()));
        if let Some(sc) = &schema.stratum_column {
            declared.push(sc.as_str());
        }
        for col in &raw.columns {
            if !declared.contains(&col.as_str()) && !allowed_extra.contains(&col.as_str()) {
                return Err(CohortError::UnknownColumn(col.clone()));
            }
        }
        let require = |name: &str| {
            raw.column_index(name).ok_or_else(|| CohortError::MissingColumn(name.to_string()))
        };
        let id_ix = require("id")?;
        let time_ix = require("time")?;
        let event_ix = require("event")?;

        let n = raw.rows.len();
        let mut ids = Vec::with_capacity(n);
        let mut time = Vec::with_capacity(n);
        let mut event = Vec::with_capacity(n);
        let mut id_seen: HashMap<String, ()> = HashMap::with_capacity(n);
        for (row, cells) in raw.rows.iter().enumerate() {
            let id = cells[id_ix].clone();
            if id_seen.insert(id.clone(), ()).is_some() {
                return Err(CohortError::DuplicateId { row, id });
            }
            ids.push(id);
            let t: f64 = cells[time_ix]
                .parse()
                .map_err(|_| CohortError::BadTime { row, value: cells[time_ix].clone() })?;
            if !t.is_finite() || t <= 0.0 {
                return Err(CohortError::BadTime { row, value: cells[time_ix].clone() });
            }
            time.push(t);
            match cells[event_ix].as_str() {
                "0" => event.push(0),
                "1" => event.push(1),
                other => {
                    return Err(CohortError::BadEvent { row, value: other.to_string() });
                }
            }
        }

        let parse_block = |specs: &[CovariateSpec],
                           missing_ok: bool|
         -> Result<(Vec<String>, Vec<Vec<f64>>), CohortError> {
            let mut names = Vec::new();
            let mut cols: Vec<Vec<f64>> = Vec::new();
            for spec in specs {
                let src = require(&spec.name)?;
                let expanded = spec.expanded_names();
                let base = cols.len();
                for name in &expanded {
                    names.push(name.clone());
                    cols.push(vec![0.0; n]);
                }
                for (row, cells) in raw.rows.iter().enumerate() {
                    let cell = cells[src].trim();
                    if is_missing_token(cell) {
                        if !missing_ok {
                            return Err(CohortError::MissingLowCost {
                                row,
                                column: spec.name.clone(),
                            });
                        }
                        for c in 0..expanded.len() {
                            cols[base + c][row] = f64::NAN;
                        }
                        continue;
                    }
                    match spec.kind {
                        CovariateKind::Continuous => {
                            let v: f64 = cell.parse().map_err(|_| CohortError::NotNumeric {
                                row,
                                column: spec.name.clone(),
                                value: cell.to_string(),
                            })?;
                            if !v.is_finite() {
                                return Err(CohortError::NotNumeric {
                                    row,
                                    column: spec.name.clone(),
                                    value: cell.to_string(),
                                });
                            }
                            cols[base][row] = v;
                        }
                        CovariateKind::Binary => match cell {
                            "0" => cols[base][row] = 0.0,
                            "1" => cols[base][row] = 1.0,
                            _ => {
                                return Err(CohortError::NotBinary {
                                    row,
                                    column: spec.name.clone(),
                                    value: cell.to_string(),
                                });
                            }
                        },
                        CovariateKind::Categorical { levels } => {
                            let bad = || CohortError::BadLevel {
                                row,
                                column: spec.name.clone(),
                                levels,
                                value: cell.to_string(),
                            };
                            let lvl: u32 = cell.parse().map_err(|_| bad())?;
                            if lvl < 1 || lvl > levels {
                                return Err(bad());
                            }
                            if lvl >= 2 {
                                cols[base + (lvl as usize - 2)][row] = 1.0;
                            }
                        }
                    }
                }
            }
            Ok((names, cols))
        };

        let (z_names, z_cols) = parse_block(&schema.low_cost, false)?;
        let (x_names, x_cols) = parse_block(&schema.expensive, true)?;

        let (stratum, stratum_labels) = match &schema.stratum_column {
            None => (None, Vec::new()),
            Some(name) => {
                let ix = require(name)?;
                let mut labels: Vec<String> = Vec::new();
                let mut map: HashMap<String, usize> = HashMap::new();
                let mut assign = Vec::with_capacity(n);
                for (row, cells) in raw.rows.iter().enumerate() {
                    let label = cells[ix].trim();
                    if label.is_empty() {
                        return Err(CohortError::EmptyStratum { row });
                    }
                    let next = labels.len();
                    let h = *map.entry(label.to_string()).or_insert_with(|| {
                        labels.push(label.to_string());
                        next
                    });
                    assign.push(h);
                }
                (Some(assign), labels)
            }
        };

        Ok(Self::assemble(
            schema.clone(),
            ids,
            time,
            event,
            z_names,
            z_cols,
            x_names,
            x_cols,
            stratum,
            stratum_labels,
        ))
    }

    /// Builds a cohort from already-typed columns (used by the simulation
    /// generator).  Applies the same ordering as [`CohortDataset::validate`];
    /// callers guarantee value validity.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        schema: CovariateSchema,
        ids: Vec<String>,
        time: Vec<f64>,
        event: Vec<u8>,
        z_names: Vec<String>,
        z_cols: Vec<Vec<f64>>,
        x_names: Vec<String>,
        x_cols: Vec<Vec<f64>>,
        stratum: Option<Vec<usize>>,
        stratum_labels: Vec<String>,
    ) -> Self {
        assert!(time.iter().all(|t| t.is_finite() && *t > 0.0), "nonpositive follow-up time");
        assert!(event.iter().all(|e| *e <= 1), "event indicator must be 0/1");
        Self::assemble(
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

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        schema: CovariateSchema,
        ids: Vec<String>,
        time: Vec<f64>,
        event: Vec<u8>,
        z_names: Vec<String>,
        mut z_cols: Vec<Vec<f64>>,
        x_names: Vec<String>,
        mut x_cols: Vec<Vec<f64>>,
        stratum: Option<Vec<usize>>,
        stratum_labels: Vec<String>,
    ) -> Self {
        let n = time.len();
        // Stable order: time ascending, events before censorings at ties.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            time[a]
                .partial_cmp(&time[b])
                .unwrap()
                .then_with(|| event[b].cmp(&event[a]))
        });
        let permute_f = |col: &Vec<f64>| -> Vec<f64> { order.iter().map(|&i| col[i]).collect() };
        let ids: Vec<String> = order.iter().map(|&i| ids[i].clone()).collect();
        let event_sorted: Vec<u8> = order.iter().map(|&i| event[i]).collect();
        let time_sorted = permute_f(&time);
        for c in z_cols.iter_mut() {
            *c = permute_f(c);
        }
        for c in x_cols.iter_mut() {
            *c = permute_f(c);
        }
        let stratum = stratum.map(|s| order.iter().map(|&i| s[i]).collect());
        CohortDataset {
            schema,
            ids,
            time: time_sorted,
            event: event_sorted,
            z_names,
            x_names,
            z_cols,
            x_cols,
            stratum,
            stratum_labels,
        }
    }

    pub fn n(&self) -> usize {
        self.time.len()
    }

    pub fn n_events(&self) -> usize {
        self.event.iter().map(|&e| e as usize).sum()
    }

    pub fn schema(&self) -> &CovariateSchema {
        &self.schema
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn time(&self) -> &[f64] {
        &self.time
    }

    pub fn event(&self) -> &[u8] {
        &self.event
    }

    /// Expanded low-cost column names.
    pub fn z_names(&self) -> &[String] {
        &self.z_names
    }

    /// Expanded expensive column names.
    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    pub fn z_col(&self, j: usize) -> &[f64] {
        &self.z_cols[j]
    }

    pub fn x_col(&self, j: usize) -> &[f64] {
        &self.x_cols[j]
    }

    /// Looks up an expanded column by name, low-cost block first.
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        if let Some(j) = self.z_names.iter().position(|c| c == name) {
            return Some(&self.z_cols[j]);
        }
        self.x_names
            .iter()
            .position(|c| c == name)
            .map(|j| self.x_cols[j].as_slice())
    }

    pub fn x_observed(&self, row: usize, col: usize) -> bool {
        !self.x_cols[col][row].is_nan()
    }

    /// True when every expensive cell in `row` is observed.
    pub fn row_complete(&self, row: usize) -> bool {
        (0..self.x_cols.len()).all(|j| self.x_observed(row, j))
    }

    pub fn stratum(&self) -> Option<&[usize]> {
        self.stratum.as_deref()
    }

    pub fn stratum_labels(&self) -> &[String] {
        &self.stratum_labels
    }

    pub fn n_strata(&self) -> usize {
        if self.stratum.is_some() {
            self.stratum_labels.len()
        } else {
            1
        }
    }
}

/// Right-continuous nondecreasing step function, zero before the first jump.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFunction {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl StepFunction {
    /// `times` strictly increasing, `values` the nondecreasing cumulative
    /// value attained at each jump.
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Self {
        assert_eq!(times.len(), values.len());
        assert!(times.windows(2).all(|w| w[0] < w[1]), "jump times must strictly increase");
        assert!(
            values.windows(2).all(|w| w[0] <= w[1]),
            "cumulative values must be nondecreasing"
        );
        StepFunction { times, values }
    }

    pub fn zero() -> Self {
        StepFunction { times: Vec::new(), values: Vec::new() }
    }

    /// Value at `t` (right-continuous; 0 before the first jump).
    pub fn evaluate(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&u| u <= t);
        if k == 0 {
            0.0
        } else {
            self.values[k - 1]
        }
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Marginal Nelson-Aalen cumulative hazard: at each distinct event time,
/// jump = (events at that time) / (units still at risk).
pub fn nelson_aalen(time: &[f64], event: &[u8]) -> StepFunction {
    let n = time.len();
    debug_assert!(time.windows(2).all(|w| w[0] <= w[1]), "input must be time-sorted");
    let mut jump_times = Vec::new();
    let mut jumps = Vec::new();
    let mut i = 0;
    while i < n {
        let t = time[i];
        let mut j = i;
        let mut deaths = 0usize;
        while j < n && time[j] == t {
            deaths += usize::from(event[j] == 1);
            j += 1;
        }
        if deaths > 0 {
            // Everyone with follow-up >= t is at risk, i.e. rows i..n.
            jump_times.push(t);
            jumps.push(deaths as f64 / (n - i) as f64);
        }
        i = j;
    }
    let mut cum = 0.0;
    let values = jumps
        .iter()
        .map(|d| {
            cum += d;
            cum
        })
        .collect();
    StepFunction::new(jump_times, values)
}

/// Weighted baseline cumulative hazard with fixed linear predictors: at each
/// distinct event time, jump = (events at that time) / Σ_{at risk} w·exp(lp).
///
/// The numerator counts events unweighted, so with β = 0 and unit weights
/// this reduces exactly to [`nelson_aalen`], and scaling all weights by `c`
/// scales every jump by `1/c`.
pub fn weighted_breslow_cumhaz(
    time: &[f64],
    event: &[u8],
    weights: &[f64],
    lp: &[f64],
) -> Result<StepFunction, CohortError> {
    let n = time.len();
    assert_eq!(event.len(), n);
    assert_eq!(weights.len(), n);
    assert_eq!(lp.len(), n);
    debug_assert!(time.windows(2).all(|w| w[0] <= w[1]), "input must be time-sorted");
    // Scan from the largest time downward, growing the risk-set total.
    let mut risk_total = 0.0;
    let mut rev_times = Vec::new();
    let mut rev_jumps = Vec::new();
    let mut i = n;
    while i > 0 {
        let t = time[i - 1];
        let mut j = i;
        let mut deaths = 0usize;
        while j > 0 && time[j - 1] == t {
            j -= 1;
            deaths += usize::from(event[j] == 1);
            risk_total += weights[j] * lp[j].min(700.0).exp();
        }
        if deaths > 0 {
            if risk_total <= 0.0 {
                return Err(CohortError::NonPositiveRiskTotal { time: t });
            }
            rev_times.push(t);
            rev_jumps.push(deaths as f64 / risk_total);
        }
        i = j;
    }
    rev_times.reverse();
    rev_jumps.reverse();
    let mut cum = 0.0;
    let values = rev_jumps
        .iter()
        .map(|d| {
            cum += d;
            cum
        })
        .collect();
    Ok(StepFunction::new(rev_times, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy_schema() -> CovariateSchema {
        CovariateSchema {
            low_cost: vec![
                CovariateSpec::continuous("z1"),
                CovariateSpec::categorical("z3", 3),
            ],
            expensive: vec![CovariateSpec::continuous("x1")],
            stratum_column: None,
        }
    }

    fn toy_raw() -> RawTable {
        RawTable {
            columns: ["id", "time", "event", "z1", "z3", "x1"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            rows: vec![
                vec!["a", "3.0", "0", "1.5", "2", "NA"],
                vec!["b", "1.0", "0", "0.5", "1", "0.7"],
                vec!["c", "1.0", "1", "-1.0", "3", "2.0"],
            ]
            .into_iter()
            .map(|r| r.into_iter().map(String::from).collect())
            .collect(),
        }
    }

    #[test]
    fn validate_sorts_events_first_and_expands_dummies() {
        let ds = CohortDataset::validate(&toy_raw(), &toy_schema(), &[]).unwrap();
        // Sorted by time ascending, the tied pair at t=1 with the event first.
        assert_eq!(ds.ids(), ["c", "b", "a"]);
        assert_eq!(ds.event(), &[1, 0, 0]);
        assert_eq!(ds.z_names(), ["z1", "z3.2", "z3.3"]);
        assert_eq!(ds.column("z3.2").unwrap(), &[0.0, 0.0, 1.0]);
        assert_eq!(ds.column("z3.3").unwrap(), &[1.0, 0.0, 0.0]);
        assert!(ds.x_observed(0, 0) && ds.x_observed(1, 0));
        assert!(!ds.x_observed(2, 0)); // "NA" cell
    }

    #[test]
    fn validate_is_idempotent_on_sorted_input() {
        let ds = CohortDataset::validate(&toy_raw(), &toy_schema(), &[]).unwrap();
        let resorted = RawTable {
            columns: ["id", "time", "event", "z1", "z3", "x1"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            rows: (0..ds.n())
                .map(|i| {
                    vec![
                        ds.ids()[i].clone(),
                        format!("{}", ds.time()[i]),
                        format!("{}", ds.event()[i]),
                        format!("{}", ds.column("z1").unwrap()[i]),
                        if ds.column("z3.3").unwrap()[i] == 1.0 {
                            "3".into()
                        } else if ds.column("z3.2").unwrap()[i] == 1.0 {
                            "2".into()
                        } else {
                            "1".into()
                        },
                        if ds.x_observed(i, 0) {
                            format!("{}", ds.x_col(0)[i])
                        } else {
                            "NA".into()
                        },
                    ]
                })
                .collect(),
        };
        let ds2 = CohortDataset::validate(&resorted, &toy_schema(), &[]).unwrap();
        assert_eq!(ds2.ids(), ds.ids());
        assert_eq!(ds2.time(), ds.time());
        assert_eq!(ds2.column("z1").unwrap(), ds.column("z1").unwrap());
    }

    #[test]
    fn validate_rejects_bad_rows_with_row_index() {
        let mut raw = toy_raw();
        raw.rows[1][1] = "0".into();
        match CohortDataset::validate(&raw, &toy_schema(), &[]) {
            Err(CohortError::BadTime { row: 1, .. }) => {}
            other => panic!("expected BadTime for row 1, got {other:?}"),
        }
        let mut raw = toy_raw();
        raw.rows[2][3] = "NA".into();
        match CohortDataset::validate(&raw, &toy_schema(), &[]) {
            Err(CohortError::MissingLowCost { row: 2, column }) => assert_eq!(column, "z1"),
            other => panic!("expected MissingLowCost, got {other:?}"),
        }
        let mut raw = toy_raw();
        raw.rows[0][4] = "4".into();
        assert!(matches!(
            CohortDataset::validate(&raw, &toy_schema(), &[]),
            Err(CohortError::BadLevel { row: 0, levels: 3, .. })
        ));
        let mut raw = toy_raw();
        raw.columns.push("mystery".into());
        for r in &mut raw.rows {
            r.push("1".into());
        }
        assert!(matches!(
            CohortDataset::validate(&raw, &toy_schema(), &[]),
            Err(CohortError::UnknownColumn(c)) if c == "mystery"
        ));
    }

    #[test]
    fn step_function_is_right_continuous_with_zero_head() {
        let f = StepFunction::new(vec![1.0, 2.0], vec![0.5, 1.25]);
        assert_eq!(f.evaluate(0.999), 0.0);
        assert_eq!(f.evaluate(1.0), 0.5);
        assert_eq!(f.evaluate(1.5), 0.5);
        assert_eq!(f.evaluate(2.0), 1.25);
        assert_eq!(f.evaluate(9.0), 1.25);
    }

    #[test]
    fn nelson_aalen_hand_example() {
        // times {1,2,3}, events {1,1,0}: jump 1/3 at t=1 (3 at risk), then
        // 1/2 at t=2 (2 at risk); cumulative 1/3 and 5/6.
        let f = nelson_aalen(&[1.0, 2.0, 3.0], &[1, 1, 0]);
        assert_eq!(f.jump_times(), &[1.0, 2.0]);
        assert_relative_eq!(f.evaluate(1.0), 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(f.evaluate(2.5), 5.0 / 6.0, epsilon = 1e-15);
        assert_relative_eq!(f.evaluate(3.0), 5.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn nelson_aalen_edge_cases() {
        let all_censored = nelson_aalen(&[1.0, 2.0], &[0, 0]);
        assert_eq!(all_censored.evaluate(5.0), 0.0);
        let single = nelson_aalen(&[5.0], &[1]);
        assert_eq!(single.evaluate(5.0), 1.0);
        assert_eq!(single.evaluate(4.9), 0.0);
    }

    #[test]
    fn breslow_hand_example() {
        // Two units: (t=1, event, lp=ln 2) and (t=2, censored, lp=0).
        // Jump at t=1 is 1/(1*2 + 1*1) = 1/3.
        let f = weighted_breslow_cumhaz(
            &[1.0, 2.0],
            &[1, 0],
            &[1.0, 1.0],
            &[2.0f64.ln(), 0.0],
        )
        .unwrap();
        assert_eq!(f.jump_times(), &[1.0]);
        assert_relative_eq!(f.evaluate(1.0), 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn breslow_reduces_to_nelson_aalen_at_null() {
        let time = [1.0, 1.0, 2.0, 3.0, 3.0, 4.0];
        let event = [1, 0, 1, 1, 1, 0];
        let na = nelson_aalen(&time, &event);
        let b =
            weighted_breslow_cumhaz(&time, &event, &[1.0; 6], &[0.0; 6]).unwrap();
        assert_eq!(na.jump_times(), b.jump_times());
        for (a, c) in na.values().iter().zip(b.values()) {
            assert_relative_eq!(a, c, epsilon = 1e-15);
        }
    }

    #[test]
    fn breslow_weight_doubling_halves_jumps() {
        let time = [1.0, 2.0, 3.0, 4.0];
        let event = [1, 0, 1, 0];
        let lp = [0.3, -0.2, 0.1, 0.5];
        let w1 = [1.0, 2.0, 0.5, 1.5];
        let w2: Vec<f64> = w1.iter().map(|w| 2.0 * w).collect();
        let f1 = weighted_breslow_cumhaz(&time, &event, &w1, &lp).unwrap();
        let f2 = weighted_breslow_cumhaz(&time, &event, &w2, &lp).unwrap();
        for (a, b) in f1.values().iter().zip(f2.values()) {
            assert_relative_eq!(*b, a / 2.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn breslow_zero_risk_total_is_an_error() {
        let r = weighted_breslow_cumhaz(&[1.0, 2.0], &[1, 0], &[0.0, 0.0], &[0.0, 0.0]);
        assert!(matches!(r, Err(CohortError::NonPositiveRiskTotal { .. })));
    }
}
