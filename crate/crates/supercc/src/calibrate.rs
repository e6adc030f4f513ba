//! Generalized raking of design weights: exponential tilting of initial
//! weights to match auxiliary totals, the constraint systems used by the
//! supersampled designs, and the closed-form weights each design variant
//! starts from.

use thiserror::Error;

use crate::cohort::CohortDataset;
use crate::numeric::{kahan_sum, RowMat};
use crate::sampling::{Role, SampleAssignment};

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("initial weight at row {row} is {value}; must be strictly positive and finite")]
    BadInitialWeight { row: usize, value: f64 },
    #[error("constraint column {index} is identically zero")]
    AllZeroColumn { index: usize },
    #[error("raking did not converge in {iterations} iterations; {detail}")]
    NotConverged { iterations: usize, detail: String },
    #[error("total influence mass of sampled non-cases is zero; cannot split the non-case total")]
    ZeroInfluenceMass,
    #[error("no sampled non-cases{context}; closed-form weight undefined")]
    ZeroDenominator { context: String },
}

/// Weight-calibration inputs: one row per unit whose weight is being solved.
#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    pub initial_weights: Vec<f64>,
    /// rows = units, columns = constraints.
    pub aux: RowMat,
    /// Target total per constraint column.
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CalibratedWeights {
    pub weights: Vec<f64>,
    /// One multiplier per constraint; zero for pruned columns.
    pub multipliers: Vec<f64>,
    /// Achieved-minus-target per constraint, including pruned columns.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    /// Columns pruned as linearly dependent before solving.
    pub dropped_columns: Vec<usize>,
}

/// Greedy Gram–Schmidt sweep keeping the earliest linearly independent
/// columns (so higher-priority constraints survive pruning).
fn independent_columns(a: &RowMat) -> Vec<usize> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut kept = Vec::new();
    for c in 0..a.ncols() {
        let mut v = a.column(c);
        let original = norm(&v);
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= proj * bi;
            }
        }
        let left = norm(&v);
        if left > 1e-10 * original.max(1e-300) {
            for vi in v.iter_mut() {
                *vi /= left;
            }
            basis.push(v);
            kept.push(c);
        }
    }
    kept
}

fn attainable_range(col: &[f64]) -> &'static str {
    let any_pos = col.iter().any(|&v| v > 0.0);
    let any_neg = col.iter().any(|&v| v < 0.0);
    match (any_pos, any_neg) {
        (true, true) => "(-inf, inf)",
        (true, false) => "(0, inf)",
        (false, true) => "(-inf, 0)",
        (false, false) => "{0}",
    }
}

/// Calibrates weights by exponential tilting: w_i = w0_i · exp(A_i·λ), with
/// λ solved by Newton iteration (step-halving on the residual norm) so the
/// weighted column totals match `targets` to 1e-8 relative.  Linearly
/// dependent constraint columns are pruned before solving and reported.
pub fn rake(problem: &CalibrationProblem) -> Result<CalibratedWeights, CalibrationError> {
    let n = problem.initial_weights.len();
    let k = problem.aux.ncols();
    assert_eq!(problem.aux.nrows(), n, "aux rows must match weights");
    assert_eq!(problem.targets.len(), k, "one target per constraint");
    for (row, &w) in problem.initial_weights.iter().enumerate() {
        if !w.is_finite() || w <= 0.0 {
            return Err(CalibrationError::BadInitialWeight { row, value: w });
        }
    }
    for c in 0..k {
        if (0..n).all(|i| problem.aux.get(i, c) == 0.0) {
            return Err(CalibrationError::AllZeroColumn { index: c });
        }
    }
    let retained = independent_columns(&problem.aux);
    let dropped: Vec<usize> = (0..k).filter(|c| !retained.contains(c)).collect();
    let r = retained.len();

    let tol = 1e-8
        * problem
            .targets
            .iter()
            .fold(0.0_f64, |a, &t| a.max(t.abs()))
            .max(1e-12);
    let tilt = |lambda: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let e: f64 = retained
                    .iter()
                    .zip(lambda)
                    .map(|(&c, &l)| problem.aux.get(i, c) * l)
                    .sum();
                problem.initial_weights[i] * e.exp()
            })
            .collect()
    };
    let residual = |w: &[f64]| -> Vec<f64> {
        retained
            .iter()
            .map(|&c| kahan_sum((0..n).map(|i| problem.aux.get(i, c) * w[i])) - problem.targets[c])
            .collect()
    };
    let inf_norm = |v: &[f64]| v.iter().fold(0.0_f64, |a, &x| a.max(x.abs()));

    let mut lambda = vec![0.0; r];
    let mut weights = problem.initial_weights.clone();
    let mut resid = residual(&weights);
    let mut norm = inf_norm(&resid);
    let mut iterations = 0;
    while norm > tol {
        if iterations >= 100 {
            return Err(not_converged(problem, &weights, iterations));
        }
        iterations += 1;
        let mut gram = nalgebra::DMatrix::zeros(r, r);
        for (a_idx, &ca) in retained.iter().enumerate() {
            for (b_idx, &cb) in retained.iter().enumerate().skip(a_idx) {
                let v: f64 = (0..n)
                    .map(|i| problem.aux.get(i, ca) * problem.aux.get(i, cb) * weights[i])
                    .sum();
                gram[(a_idx, b_idx)] = v;
                gram[(b_idx, a_idx)] = v;
            }
        }
        let rhs = nalgebra::DVector::from_column_slice(&resid);
        let delta = crate::numeric::spd_solve(&gram, &rhs)
            .ok_or_else(|| not_converged(problem, &weights, iterations))?;
        let mut step = 1.0;
        loop {
            let cand: Vec<f64> = lambda
                .iter()
                .zip(delta.iter())
                .map(|(l, d)| l - step * d)
                .collect();
            let w = tilt(&cand);
            if w.iter().all(|v| v.is_finite()) {
                let res = residual(&w);
                let cand_norm = inf_norm(&res);
                if cand_norm < norm {
                    lambda = cand;
                    weights = w;
                    resid = res;
                    norm = cand_norm;
                    break;
                }
            }
            step /= 2.0;
            if step < 1e-12 {
                return Err(not_converged(problem, &weights, iterations));
            }
        }
    }

    let mut multipliers = vec![0.0; k];
    for (idx, &c) in retained.iter().enumerate() {
        multipliers[c] = lambda[idx];
    }
    let residuals: Vec<f64> = (0..k)
        .map(|c| {
            kahan_sum((0..n).map(|i| problem.aux.get(i, c) * weights[i])) - problem.targets[c]
        })
        .collect();
    Ok(CalibratedWeights {
        weights,
        multipliers,
        residuals,
        iterations,
        dropped_columns: dropped,
    })
}

fn not_converged(
    problem: &CalibrationProblem,
    weights: &[f64],
    iterations: usize,
) -> CalibrationError {
    let n = problem.initial_weights.len();
    let detail = (0..problem.aux.ncols())
        .map(|c| {
            let achieved = kahan_sum((0..n).map(|i| problem.aux.get(i, c) * weights[i]));
            format!(
                "constraint {c}: target {}, reached {achieved:.6}, attainable {}",
                problem.targets[c],
                attainable_range(&problem.aux.column(c))
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    CalibrationError::NotConverged { iterations, detail }
}

/// Closed-form design-weight variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightVariant {
    /// Cases 1, subcohort non-cases (N−D)/m.
    CaseCohort,
    /// Cases 1, sampled non-cases (N−D)/(m+n1).
    Supersampled,
    /// Cases 1, sampled non-cases (N_h−D_h)/(m_h+n_{1h}) within each stratum.
    StratifiedSupersampled,
}

/// Cohort-aligned design weights for one variant; unsampled units get 0.
pub fn closed_form_weights(
    dataset: &CohortDataset,
    assignment: &SampleAssignment,
    variant: WeightVariant,
) -> Result<Vec<f64>, CalibrationError> {
    let n = dataset.n();
    let sizes = &assignment.sizes;
    let noncases = (sizes.cohort - sizes.cases) as f64;
    let mut weights = vec![0.0; n];
    let noncase_weight: Box<dyn Fn(usize) -> Result<f64, CalibrationError>> = match variant {
        WeightVariant::CaseCohort => {
            if sizes.subcohort_noncases == 0 {
                return Err(CalibrationError::ZeroDenominator {
                    context: " in the subcohort".into(),
                });
            }
            let w = noncases / sizes.subcohort_noncases as f64;
            Box::new(move |_| Ok(w))
        }
        WeightVariant::Supersampled => {
            let denom = sizes.subcohort_noncases + sizes.supersample;
            if denom == 0 {
                return Err(CalibrationError::ZeroDenominator {
                    context: " in the analysis sample".into(),
                });
            }
            let w = noncases / denom as f64;
            Box::new(move |_| Ok(w))
        }
        WeightVariant::StratifiedSupersampled => {
            let stratum = dataset
                .stratum()
                .expect("stratified weights need a stratified cohort")
                .to_vec();
            let summaries = assignment
                .strata
                .clone()
                .expect("stratified weights need per-stratum sizes");
            Box::new(move |i: usize| {
                let s = &summaries[stratum[i]].sizes;
                let denom = s.subcohort_noncases + s.supersample;
                if denom == 0 {
                    return Err(CalibrationError::ZeroDenominator {
                        context: format!(" in stratum `{}`", summaries[stratum[i]].label),
                    });
                }
                Ok((s.cohort - s.cases) as f64 / denom as f64)
            })
        }
    };
    for i in 0..n {
        weights[i] = match assignment.role[i] {
            Role::Case => 1.0,
            Role::SubcohortNoncase => noncase_weight(i)?,
            Role::Supersample => match variant {
                WeightVariant::CaseCohort => 0.0,
                _ => noncase_weight(i)?,
            },
            Role::Unsampled => 0.0,
        };
    }
    Ok(weights)
}

/// A two-group constraint system over the sampled non-cases; case weights
/// are held at 1 (their group total D is already exact, so solving for them
/// would only add a degenerate direction).
#[derive(Debug, Clone)]
pub struct ConstraintSystem {
    /// Rows of `problem` map to these cohort indices.
    pub units: Vec<usize>,
    pub problem: CalibrationProblem,
    /// Subcohort-non-case, supersample, and (fixed) case totals.
    pub targets: [f64; 3],
    /// Influence mass (or count mass) of each non-case group.
    pub mass: [f64; 2],
}

fn group_constraints(
    dataset: &CohortDataset,
    assignment: &SampleAssignment,
    mass0: f64,
    mass1: f64,
) -> Result<ConstraintSystem, CalibrationError> {
    if mass0 + mass1 <= 0.0 {
        return Err(CalibrationError::ZeroInfluenceMass);
    }
    let sizes = &assignment.sizes;
    let noncases = (sizes.cohort - sizes.cases) as f64;
    let t0 = noncases * mass0 / (mass0 + mass1);
    let t1 = noncases * mass1 / (mass0 + mass1);
    let mut units = Vec::new();
    let mut w0 = Vec::new();
    let mut is_supersample = Vec::new();
    let stratum = dataset.stratum();
    for i in 0..dataset.n() {
        match assignment.role[i] {
            Role::SubcohortNoncase => {
                let init = match (&assignment.strata, stratum) {
                    (Some(summaries), Some(stratum)) => {
                        let s = &summaries[stratum[i]].sizes;
                        s.cohort as f64 / s.subcohort as f64
                    }
                    _ => sizes.cohort as f64 / sizes.subcohort as f64,
                };
                units.push(i);
                w0.push(init);
                is_supersample.push(0.0);
            }
            Role::Supersample => {
                units.push(i);
                w0.push(1.0 / assignment.inclusion_prob[i]);
                is_supersample.push(1.0);
            }
            _ => {}
        }
    }
    let sc_col: Vec<f64> = is_supersample.iter().map(|s| 1.0 - s).collect();
    let aux = RowMat::from_columns(&[&sc_col, &is_supersample]);
    Ok(ConstraintSystem {
        units,
        problem: CalibrationProblem {
            initial_weights: w0,
            aux,
            targets: vec![t0, t1],
        },
        targets: [t0, t1, sizes.cases as f64],
        mass: [mass0, mass1],
    })
}

/// Influence-guided constraints: non-case group totals split the non-case
/// count in proportion to each group's total influence norm.
pub fn build_iss_constraints(
    dataset: &CohortDataset,
    assignment: &SampleAssignment,
    psi: &RowMat,
) -> Result<ConstraintSystem, CalibrationError> {
    let db0 = kahan_sum(
        assignment
            .indices(Role::SubcohortNoncase)
            .into_iter()
            .map(|i| psi.row_norm(i)),
    );
    let db1 = kahan_sum(
        assignment
            .indices(Role::Supersample)
            .into_iter()
            .map(|i| psi.row_norm(i)),
    );
    group_constraints(dataset, assignment, db0, db1)
}

/// Count-proportional constraints for randomly supersampled designs: group
/// totals split the non-case count by sampled group size.
pub fn build_rss_constraints(
    dataset: &CohortDataset,
    assignment: &SampleAssignment,
) -> Result<ConstraintSystem, CalibrationError> {
    group_constraints(
        dataset,
        assignment,
        assignment.sizes.subcohort_noncases as f64,
        assignment.sizes.supersample as f64,
    )
}

/// Calibrated weights over the whole cohort: raked weights for sampled
/// non-cases, exactly 1 for cases, 0 for unsampled units.
#[derive(Debug, Clone)]
pub struct CohortWeights {
    pub weights: Vec<f64>,
    pub system: ConstraintSystem,
    pub detail: CalibratedWeights,
}

pub fn calibrate_iss_weights(
    dataset: &CohortDataset,
    assignment: &SampleAssignment,
    psi: &RowMat,
) -> Result<CohortWeights, CalibrationError> {
    let system = build_iss_constraints(dataset, assignment, psi)?;
    let detail = rake(&system.problem)?;
    let mut weights = vec![0.0; dataset.n()];
    for i in 0..dataset.n() {
        if assignment.role[i] == Role::Case {
            weights[i] = 1.0;
        }
    }
    for (row, &unit) in system.units.iter().enumerate() {
        weights[unit] = detail.weights[row];
    }
    Ok(CohortWeights {
        weights,
        system,
        detail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{CovariateSchema, CovariateSpec};
    use crate::rng::derive_rng;
    use crate::sampling::{
        add_balanced_supersample, add_random_supersample, draw_case_cohort,
    };

    #[test]
    fn satisfied_constraints_are_a_fixed_point() {
        let aux = RowMat::from_columns(&[&[1.0, 1.0, 1.0], &[2.0, 0.0, 1.0]]);
        let w0 = vec![1.5, 2.5, 2.0];
        let targets = vec![6.0, 5.0];
        let problem = CalibrationProblem {
            initial_weights: w0.clone(),
            aux,
            targets,
        };
        let out = rake(&problem).unwrap();
        assert_eq!(out.weights, w0);
        assert_eq!(out.iterations, 0);
        assert!(out.multipliers.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn uniform_tilt_doubles_weights() {
        let aux = RowMat::from_columns(&[&[1.0, 1.0, 1.0]]);
        let problem = CalibrationProblem {
            initial_weights: vec![1.0; 3],
            aux,
            targets: vec![6.0],
        };
        let out = rake(&problem).unwrap();
        for w in &out.weights {
            assert!((w - 2.0).abs() < 1e-9, "weight {w}");
        }
        assert!((out.multipliers[0] - 2.0_f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn raking_is_invariant_to_constraint_rescaling() {
        let aux = RowMat::from_columns(&[&[1.0, 1.0, 1.0, 1.0], &[0.5, -0.2, 0.9, 0.1]]);
        let base = CalibrationProblem {
            initial_weights: vec![1.0, 2.0, 0.5, 1.5],
            aux: aux.clone(),
            targets: vec![7.0, 1.3],
        };
        let gamma = 7.0;
        let col0 = aux.column(0);
        let col1: Vec<f64> = aux.column(1).iter().map(|v| v * gamma).collect();
        let scaled = CalibrationProblem {
            initial_weights: base.initial_weights.clone(),
            aux: RowMat::from_columns(&[&col0, &col1]),
            targets: vec![7.0, 1.3 * gamma],
        };
        let a = rake(&base).unwrap();
        let b = rake(&scaled).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - y).abs() < 1e-8, "{x} vs {y}");
        }
        assert!((a.multipliers[1] - b.multipliers[1] * gamma).abs() < 1e-8);
    }

    #[test]
    fn dependent_columns_are_pruned() {
        // Column 2 duplicates column 0 with a consistent target.
        let aux = RowMat::from_columns(&[
            &[1.0, 1.0, 1.0],
            &[1.0, 0.0, 2.0],
            &[1.0, 1.0, 1.0],
        ]);
        let problem = CalibrationProblem {
            initial_weights: vec![1.0; 3],
            aux,
            targets: vec![4.0, 5.0, 4.0],
        };
        let out = rake(&problem).unwrap();
        assert_eq!(out.dropped_columns, vec![2]);
        assert_eq!(out.multipliers[2], 0.0);
        assert!(out.residuals[0].abs() < 1e-7 && out.residuals[2].abs() < 1e-7);
        assert!(out.weights.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn infeasible_targets_report_attainable_range() {
        let aux = RowMat::from_columns(&[&[1.0, 1.0]]);
        let problem = CalibrationProblem {
            initial_weights: vec![1.0, 1.0],
            aux,
            targets: vec![-5.0],
        };
        match rake(&problem) {
            Err(CalibrationError::NotConverged { detail, .. }) => {
                assert!(detail.contains("(0, inf)"), "detail: {detail}");
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let aux = RowMat::from_columns(&[&[1.0, 1.0]]);
        let problem = CalibrationProblem {
            initial_weights: vec![1.0, 0.0],
            aux: aux.clone(),
            targets: vec![3.0],
        };
        assert!(matches!(
            rake(&problem),
            Err(CalibrationError::BadInitialWeight { row: 1, .. })
        ));
        let zero_col = CalibrationProblem {
            initial_weights: vec![1.0, 1.0],
            aux: RowMat::from_columns(&[&[1.0, 1.0], &[0.0, 0.0]]),
            targets: vec![3.0, 0.0],
        };
        assert!(matches!(
            rake(&zero_col),
            Err(CalibrationError::AllZeroColumn { index: 1 })
        ));
    }

    fn toy_cohort(n: usize, every_kth_case: usize, stratified: bool) -> CohortDataset {
        let ids: Vec<String> = (0..n).map(|i| format!("u{i}")).collect();
        let time: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let event: Vec<u8> = (0..n).map(|i| u8::from(i % every_kth_case == 0)).collect();
        let z: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let (stratum, labels, column) = if stratified {
            (
                Some((0..n).map(|i| usize::from(i % 4 == 0)).collect()),
                vec!["a".to_string(), "b".to_string()],
                Some("g".to_string()),
            )
        } else {
            (None, Vec::new(), None)
        };
        let schema = CovariateSchema {
            low_cost: vec![CovariateSpec::continuous("z")],
            expensive: vec![CovariateSpec::continuous("x")],
            stratum_column: column,
        };
        CohortDataset::from_parts(
            schema,
            ids,
            time,
            event,
            vec!["z".into()],
            vec![z.clone()],
            vec!["x".into()],
            vec![z],
            stratum,
            labels,
        )
    }

    #[test]
    fn closed_form_weight_arithmetic() {
        let data = toy_cohort(60, 6, false);
        let mut rng = derive_rng(31, &[1]);
        let mut a = draw_case_cohort(&data, 12, &mut rng).unwrap();
        let w_cc = closed_form_weights(&data, &a, WeightVariant::CaseCohort).unwrap();
        let noncases = (60 - a.sizes.cases) as f64;
        for i in 0..60 {
            match a.role[i] {
                Role::Case => assert_eq!(w_cc[i], 1.0),
                Role::SubcohortNoncase => assert!(
                    (w_cc[i] - noncases / a.sizes.subcohort_noncases as f64).abs() < 1e-12
                ),
                _ => assert_eq!(w_cc[i], 0.0),
            }
        }
        add_random_supersample(&mut a, 15, &mut rng).unwrap();
        let w_ss = closed_form_weights(&data, &a, WeightVariant::Supersampled).unwrap();
        let denom = (a.sizes.subcohort_noncases + 15) as f64;
        for i in a.indices(Role::Supersample) {
            assert!((w_ss[i] - noncases / denom).abs() < 1e-12);
        }
        // Spot-check the arithmetic at a realistic scale.
        assert!((24750.0_f64 / 248.0 - 99.798_387_096_774_19).abs() < 1e-10);
        assert!((24750.0_f64 / 998.0 - 24.799_599_198_396_79).abs() < 1e-10);
    }

    #[test]
    fn stratified_weights_use_per_stratum_sizes() {
        use std::collections::BTreeMap;
        let data = toy_cohort(80, 8, true);
        let sc: BTreeMap<String, usize> = [("a".to_string(), 5), ("b".to_string(), 10)].into();
        let n1: BTreeMap<String, usize> = [("a".to_string(), 4), ("b".to_string(), 6)].into();
        let mut rng = derive_rng(31, &[2]);
        let mut a =
            crate::sampling::draw_stratified_case_cohort(&data, &sc, &mut rng).unwrap();
        crate::sampling::add_stratified_random_supersample(&data, &mut a, &n1, &mut rng)
            .unwrap();
        let w = closed_form_weights(&data, &a, WeightVariant::StratifiedSupersampled).unwrap();
        let stratum = data.stratum().unwrap();
        let summaries = a.strata.as_ref().unwrap();
        for i in 0..80 {
            if matches!(a.role[i], Role::SubcohortNoncase | Role::Supersample) {
                let s = &summaries[stratum[i]].sizes;
                let expect =
                    (s.cohort - s.cases) as f64 / (s.subcohort_noncases + s.supersample) as f64;
                assert!((w[i] - expect).abs() < 1e-12, "unit {i}");
            }
        }
    }

    #[test]
    fn rss_constraints_recover_pooled_weight() {
        let data = toy_cohort(60, 6, false);
        let mut rng = derive_rng(31, &[3]);
        let mut a = draw_case_cohort(&data, 12, &mut rng).unwrap();
        add_random_supersample(&mut a, 15, &mut rng).unwrap();
        let system = build_rss_constraints(&data, &a).unwrap();
        let out = rake(&system.problem).unwrap();
        let pooled = (60.0 - a.sizes.cases as f64)
            / (a.sizes.subcohort_noncases + a.sizes.supersample) as f64;
        for w in &out.weights {
            assert!((w - pooled).abs() < 1e-8, "{w} vs {pooled}");
        }
        // Starting AT the pooled weight is a fixed point of the same system.
        let fixed = CalibrationProblem {
            initial_weights: vec![pooled; system.units.len()],
            aux: system.problem.aux.clone(),
            targets: system.problem.targets.clone(),
        };
        let out2 = rake(&fixed).unwrap();
        assert_eq!(out2.iterations, 0);
    }

    /// N=100 cohort with D=10 cases (first 10 units), m=20 subcohort
    /// non-cases, n1=15 supersampled units at inclusion probability 1/2.
    fn fixed_assignment(data: &CohortDataset) -> SampleAssignment {
        let n = data.n();
        let mut role = vec![Role::Unsampled; n];
        let mut pi = vec![0.0; n];
        for i in 0..10 {
            role[i] = Role::Case;
            pi[i] = 1.0;
        }
        for i in 10..30 {
            role[i] = Role::SubcohortNoncase;
            pi[i] = 22.0 / 100.0;
        }
        for i in 30..45 {
            role[i] = Role::Supersample;
            pi[i] = 0.5;
        }
        let mut in_subcohort = vec![false; n];
        for flag in in_subcohort.iter_mut().take(30).skip(8) {
            *flag = true;
        }
        SampleAssignment {
            role,
            inclusion_prob: pi,
            sizes: crate::sampling::SampleSizes {
                cohort: n,
                cases: 10,
                subcohort: 22,
                subcohort_cases: 2,
                subcohort_noncases: 20,
                supersample: 15,
                phase_two: 37,
                analysed: 45,
            },
            in_subcohort,
            strata: None,
        }
    }

    #[test]
    fn iss_targets_split_by_influence_mass() {
        // N=100, D=10, m=20, n1=15, db0=4, db1=6 → targets {36, 54, 10}.
        let data = toy_cohort(100, 10, false);
        let a = fixed_assignment(&data);
        let mut psi = RowMat::zeros(100, 1);
        for i in a.indices(Role::SubcohortNoncase) {
            psi.set(i, 0, 0.2);
        }
        for i in a.indices(Role::Supersample) {
            psi.set(i, 0, -0.4); // sign must not matter: mass is a norm
        }
        let system = build_iss_constraints(&data, &a, &psi).unwrap();
        assert!((system.targets[0] - 36.0).abs() < 1e-9);
        assert!((system.targets[1] - 54.0).abs() < 1e-9);
        assert!((system.targets[2] - 10.0).abs() < 1e-12);
        assert!((system.mass[0] - 4.0).abs() < 1e-12);
        assert!((system.mass[1] - 6.0).abs() < 1e-12);
        assert!(
            (system.targets[0] + system.targets[1] - 90.0).abs() < 1e-9,
            "non-case totals must add to N-D"
        );
        // Initial weights follow the design: N/n_sc and 1/pi*.
        assert!((system.problem.initial_weights[0] - 100.0 / 22.0).abs() < 1e-12);
        assert!((system.problem.initial_weights[20] - 2.0).abs() < 1e-12);

        let zero = RowMat::zeros(100, 1);
        assert!(matches!(
            build_iss_constraints(&data, &a, &zero),
            Err(CalibrationError::ZeroInfluenceMass)
        ));
    }

    #[test]
    fn calibrated_cohort_weights_meet_group_totals() {
        let data = toy_cohort(120, 6, false);
        let mut rng = derive_rng(37, &[7]);
        let mut a = draw_case_cohort(&data, 24, &mut rng).unwrap();
        let mut psi = RowMat::zeros(120, 2);
        for i in 0..120 {
            psi.set(i, 0, ((i * 7 % 13) as f64 - 6.0) * 0.05);
            psi.set(i, 1, ((i * 5 % 11) as f64 - 5.0) * 0.08);
        }
        add_balanced_supersample(&mut a, &psi, 18, &mut rng).unwrap();
        let out = calibrate_iss_weights(&data, &a, &psi).unwrap();
        let noncase_total = kahan_sum(
            (0..120)
                .filter(|&i| matches!(a.role[i], Role::SubcohortNoncase | Role::Supersample))
                .map(|i| out.weights[i]),
        );
        let expected = 120.0 - a.sizes.cases as f64;
        assert!(
            (noncase_total - expected).abs() < 1e-6 * expected,
            "{noncase_total} vs {expected}"
        );
        for i in a.indices(Role::Case) {
            assert_eq!(out.weights[i], 1.0);
        }
        for i in a.pool_indices() {
            assert_eq!(out.weights[i], 0.0);
        }
        assert!(out.weights.iter().all(|&w| w >= 0.0));
        let sc_total = kahan_sum(
            a.indices(Role::SubcohortNoncase).into_iter().map(|i| out.weights[i]),
        );
        assert!((sc_total - out.system.targets[0]).abs() < 1e-6 * expected);
    }
}
