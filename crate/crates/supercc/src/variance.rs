//! Two-phase variance for weighted partial-likelihood fits and Rubin
//! pooling across imputed copies.
//!
//! The total variance splits into the inverse information of the weighted
//! fit (phase one) plus a finite-population correction term built from the
//! centered influence contributions of the sampled non-cases (phase two);
//! cases are sampled with probability one and contribute no phase-two term.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::cohort::CohortDataset;
use crate::numeric::{RowMat, Z_975};
use crate::sampling::{Role, SampleAssignment};

#[derive(Debug, Error)]
pub enum VarianceError {
    #[error("phase-two variance needs at least two sampled non-cases (found {found})")]
    TooFewUnits { found: usize },
    #[error("stratum `{label}` has {found} sampled non-cases; need at least two")]
    TooFewInStratum { label: String, found: usize },
    #[error("sample is not stratified")]
    NotStratified,
    #[error("pooling needs at least two completed-data fits (found {found})")]
    TooFewCopies { found: usize },
    #[error("pooled fits disagree in dimension: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Variance of a two-phase weighted fit, split into its additive parts.
#[derive(Debug, Clone)]
pub struct PhaseTwoVariance {
    pub total: DMatrix<f64>,
    /// Inverse information of the weighted fit.
    pub phase1: DMatrix<f64>,
    /// Finite-population sampling contribution.
    pub phase2: DMatrix<f64>,
    /// Finite-population factor per stratum (one entry when unstratified).
    pub factors: Vec<f64>,
}

/// Σ_i (ψ_i − ψ̄)(ψ_i − ψ̄)ᵀ over the given cohort rows.
fn centered_outer_sum(psi: &RowMat, idx: &[usize]) -> DMatrix<f64> {
    let p = psi.ncols();
    let mut mean = vec![0.0; p];
    for &i in idx {
        for c in 0..p {
            mean[c] += psi.get(i, c);
        }
    }
    for m in mean.iter_mut() {
        *m /= idx.len() as f64;
    }
    let mut out = DMatrix::zeros(p, p);
    for &i in idx {
        for a in 0..p {
            let da = psi.get(i, a) - mean[a];
            for b in a..p {
                out[(a, b)] += da * (psi.get(i, b) - mean[b]);
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            out[(a, b)] = out[(b, a)];
        }
    }
    out
}

fn assemble(
    phase1: &DMatrix<f64>,
    phase2: DMatrix<f64>,
    factors: Vec<f64>,
) -> PhaseTwoVariance {
    PhaseTwoVariance {
        total: phase1 + &phase2,
        phase1: phase1.clone(),
        phase2,
        factors,
    }
}

/// Classic case-cohort variance: phase two sums centered influences over the
/// subcohort non-cases, scaled by 1 − m/(N−D).
pub fn lin_ying_variance(
    phase1: &DMatrix<f64>,
    psi: &RowMat,
    assignment: &SampleAssignment,
) -> Result<PhaseTwoVariance, VarianceError> {
    let idx = assignment.indices(Role::SubcohortNoncase);
    if idx.len() < 2 {
        return Err(VarianceError::TooFewUnits { found: idx.len() });
    }
    let noncases = (assignment.sizes.cohort - assignment.sizes.cases) as f64;
    let factor = 1.0 - idx.len() as f64 / noncases;
    Ok(assemble(phase1, centered_outer_sum(psi, &idx) * factor, vec![factor]))
}

/// Supersampled variance: the phase-two sum runs over all sampled non-cases
/// (subcohort plus supersample), scaled by 1 − (m+n1)/(N−D).
pub fn supersample_variance(
    phase1: &DMatrix<f64>,
    psi: &RowMat,
    assignment: &SampleAssignment,
) -> Result<PhaseTwoVariance, VarianceError> {
    let mut idx = assignment.indices(Role::SubcohortNoncase);
    idx.extend(assignment.indices(Role::Supersample));
    idx.sort_unstable();
    if idx.len() < 2 {
        return Err(VarianceError::TooFewUnits { found: idx.len() });
    }
    let noncases = (assignment.sizes.cohort - assignment.sizes.cases) as f64;
    let factor = 1.0 - idx.len() as f64 / noncases;
    Ok(assemble(phase1, centered_outer_sum(psi, &idx) * factor, vec![factor]))
}

/// Stratified supersampled variance: each stratum contributes its own
/// centered sum with a small-sample factor k_h/(k_h−1) and finite-population
/// factor 1 − k_h/(N_h−D_h), where k_h = m_h + n_{1h}.  Strata whose
/// non-cases were exhausted by the case set contribute nothing.
pub fn stratified_variance(
    dataset: &CohortDataset,
    phase1: &DMatrix<f64>,
    psi: &RowMat,
    assignment: &SampleAssignment,
) -> Result<PhaseTwoVariance, VarianceError> {
    let summaries = assignment
        .strata
        .as_ref()
        .ok_or(VarianceError::NotStratified)?;
    let stratum = dataset.stratum().ok_or(VarianceError::NotStratified)?;
    let p = psi.ncols();
    let mut phase2 = DMatrix::zeros(p, p);
    let mut factors = Vec::with_capacity(summaries.len());
    for (h, summary) in summaries.iter().enumerate() {
        let noncases_h = (summary.sizes.cohort - summary.sizes.cases) as f64;
        let idx: Vec<usize> = (0..dataset.n())
            .filter(|&i| {
                stratum[i] == h
                    && matches!(
                        assignment.role[i],
                        Role::SubcohortNoncase | Role::Supersample
                    )
            })
            .collect();
        if noncases_h == 0.0 && idx.is_empty() {
            factors.push(0.0);
            continue;
        }
        if idx.len() < 2 {
            return Err(VarianceError::TooFewInStratum {
                label: summary.label.clone(),
                found: idx.len(),
            });
        }
        let k = idx.len() as f64;
        let factor = k / (k - 1.0) * (1.0 - k / noncases_h);
        phase2 += centered_outer_sum(psi, &idx) * factor;
        factors.push(factor);
    }
    Ok(assemble(phase1, phase2, factors))
}

/// Pooled estimate across imputed copies: mean coefficients, within/between
/// split, and normal-quantile 95% intervals.
#[derive(Debug, Clone)]
pub struct PooledEstimate {
    pub beta: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub within: DMatrix<f64>,
    pub between: DMatrix<f64>,
    pub se: Vec<f64>,
    pub lo95: Vec<f64>,
    pub hi95: Vec<f64>,
    pub copies: usize,
}

/// Combines per-copy estimates: cov = W̄ + (1 + 1/M)·B with B the sample
/// covariance of the copy estimates.
pub fn rubin_pool(
    estimates: &[Vec<f64>],
    covariances: &[DMatrix<f64>],
) -> Result<PooledEstimate, VarianceError> {
    let m = estimates.len();
    if m < 2 {
        return Err(VarianceError::TooFewCopies { found: m });
    }
    assert_eq!(covariances.len(), m, "one covariance per estimate");
    let p = estimates[0].len();
    for est in estimates {
        if est.len() != p {
            return Err(VarianceError::DimensionMismatch {
                expected: p,
                found: est.len(),
            });
        }
    }
    for cov in covariances {
        if cov.nrows() != p || cov.ncols() != p {
            return Err(VarianceError::DimensionMismatch {
                expected: p,
                found: cov.nrows(),
            });
        }
    }
    let mf = m as f64;
    let mut beta = vec![0.0; p];
    for est in estimates {
        for (b, e) in beta.iter_mut().zip(est) {
            *b += e / mf;
        }
    }
    let mut within = DMatrix::zeros(p, p);
    for cov in covariances {
        within += cov / mf;
    }
    let mut between = DMatrix::zeros(p, p);
    for est in estimates {
        for a in 0..p {
            for b in 0..p {
                between[(a, b)] += (est[a] - beta[a]) * (est[b] - beta[b]) / (mf - 1.0);
            }
        }
    }
    let cov = &within + &between * (1.0 + 1.0 / mf);
    let se: Vec<f64> = (0..p).map(|j| cov[(j, j)].sqrt()).collect();
    let lo95: Vec<f64> = beta.iter().zip(&se).map(|(b, s)| b - Z_975 * s).collect();
    let hi95: Vec<f64> = beta.iter().zip(&se).map(|(b, s)| b + Z_975 * s).collect();
    Ok(PooledEstimate {
        beta,
        cov,
        within,
        between,
        se,
        lo95,
        hi95,
        copies: m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{SampleSizes, StratumSummary};

    /// Assignment with explicit roles; cohort size n, first `cases` units
    /// are cases, then `m` subcohort non-cases, then `n1` supersampled.
    fn manual_assignment(n: usize, cases: usize, m: usize, n1: usize) -> SampleAssignment {
        let mut role = vec![Role::Unsampled; n];
        let mut pi = vec![0.0; n];
        for i in 0..cases {
            role[i] = Role::Case;
            pi[i] = 1.0;
        }
        for i in cases..cases + m {
            role[i] = Role::SubcohortNoncase;
            pi[i] = 0.5;
        }
        for i in cases + m..cases + m + n1 {
            role[i] = Role::Supersample;
            pi[i] = 0.5;
        }
        let mut in_subcohort = vec![false; n];
        for flag in in_subcohort.iter_mut().take(cases + m).skip(cases) {
            *flag = true;
        }
        SampleAssignment {
            role,
            inclusion_prob: pi,
            sizes: SampleSizes {
                cohort: n,
                cases,
                subcohort: m,
                subcohort_cases: 0,
                subcohort_noncases: m,
                supersample: n1,
                phase_two: m + n1,
                analysed: cases + m + n1,
            },
            in_subcohort,
            strata: None,
        }
    }

    #[test]
    fn subcohort_variance_matches_hand_computation() {
        // m=2 influences {1, 3}, N−D=10: factor 0.8, centered sum 2 → 1.6.
        let a = manual_assignment(12, 2, 2, 0);
        let mut psi = RowMat::zeros(12, 1);
        psi.set(2, 0, 1.0);
        psi.set(3, 0, 3.0);
        let phase1 = DMatrix::from_element(1, 1, 0.7);
        let v = lin_ying_variance(&phase1, &psi, &a).unwrap();
        assert!((v.phase2[(0, 0)] - 1.6).abs() < 1e-12);
        assert!((v.total[(0, 0)] - 2.3).abs() < 1e-12);
        assert!((v.factors[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn supersample_variance_matches_hand_computation() {
        // m=2 {1,3} plus n1=2 {2,2}: mean 2, centered sum 2, factor 0.6.
        let a = manual_assignment(12, 2, 2, 2);
        let mut psi = RowMat::zeros(12, 1);
        psi.set(2, 0, 1.0);
        psi.set(3, 0, 3.0);
        psi.set(4, 0, 2.0);
        psi.set(5, 0, 2.0);
        let phase1 = DMatrix::from_element(1, 1, 0.7);
        let v = supersample_variance(&phase1, &psi, &a).unwrap();
        assert!((v.phase2[(0, 0)] - 1.2).abs() < 1e-12);
        assert!((v.factors[0] - 0.6).abs() < 1e-12);
    }

    fn one_stratum_cohort(n: usize) -> CohortDataset {
        use crate::cohort::{CovariateSchema, CovariateSpec};
        let schema = CovariateSchema {
            low_cost: vec![CovariateSpec::continuous("z")],
            expensive: vec![CovariateSpec::continuous("x")],
            stratum_column: Some("g".into()),
        };
        let z: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
        CohortDataset::from_parts(
            schema,
            (0..n).map(|i| format!("u{i}")).collect(),
            (0..n).map(|i| 1.0 + i as f64).collect(),
            (0..n).map(|i| u8::from(i < 2)).collect(),
            vec!["z".into()],
            vec![z.clone()],
            vec!["x".into()],
            vec![z],
            Some(vec![0; n]),
            vec!["only".into()],
        )
    }

    #[test]
    fn single_stratum_applies_small_sample_factor() {
        let data = one_stratum_cohort(12);
        let mut a = manual_assignment(12, 2, 2, 2);
        a.strata = Some(vec![StratumSummary {
            label: "only".into(),
            sizes: a.sizes,
        }]);
        let mut psi = RowMat::zeros(12, 1);
        psi.set(2, 0, 1.0);
        psi.set(3, 0, 3.0);
        psi.set(4, 0, 2.0);
        psi.set(5, 0, 2.0);
        let phase1 = DMatrix::from_element(1, 1, 0.7);
        let pooled = supersample_variance(&phase1, &psi, &a).unwrap();
        let strat = stratified_variance(&data, &phase1, &psi, &a).unwrap();
        // Same sum and population factor, multiplied by k/(k−1) = 4/3.
        let expect = pooled.phase2[(0, 0)] * 4.0 / 3.0;
        assert!((strat.phase2[(0, 0)] - expect).abs() < 1e-12);
        assert!((strat.factors[0] - 0.6 * 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn two_strata_sum_their_contributions() {
        use crate::cohort::{CovariateSchema, CovariateSpec};
        let n = 14;
        let schema = CovariateSchema {
            low_cost: vec![CovariateSpec::continuous("z")],
            expensive: vec![CovariateSpec::continuous("x")],
            stratum_column: Some("g".into()),
        };
        let z: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
        // Stratum 0 = units 0..7 (one case), stratum 1 = units 7..14 (one case).
        let stratum: Vec<usize> = (0..n).map(|i| usize::from(i >= 7)).collect();
        let data = CohortDataset::from_parts(
            schema,
            (0..n).map(|i| format!("u{i}")).collect(),
            (0..n).map(|i| 1.0 + i as f64).collect(),
            (0..n).map(|i| u8::from(i == 0 || i == 7)).collect(),
            vec!["z".into()],
            vec![z.clone()],
            vec!["x".into()],
            vec![z],
            Some(stratum),
            vec!["s0".into(), "s1".into()],
        );
        let mut role = vec![Role::Unsampled; n];
        role[0] = Role::Case;
        role[7] = Role::Case;
        role[1] = Role::SubcohortNoncase;
        role[2] = Role::SubcohortNoncase;
        role[8] = Role::SubcohortNoncase;
        role[9] = Role::Supersample;
        let sizes_h = |cohort: usize, m: usize, n1: usize| SampleSizes {
            cohort,
            cases: 1,
            subcohort: m,
            subcohort_cases: 0,
            subcohort_noncases: m,
            supersample: n1,
            phase_two: m + n1,
            analysed: 1 + m + n1,
        };
        let mut in_subcohort = vec![false; n];
        for i in [1, 2, 8] {
            in_subcohort[i] = true;
        }
        let a = SampleAssignment {
            role,
            inclusion_prob: vec![1.0; n],
            sizes: sizes_h(n, 3, 1),
            in_subcohort,
            strata: Some(vec![
                StratumSummary { label: "s0".into(), sizes: sizes_h(7, 2, 0) },
                StratumSummary { label: "s1".into(), sizes: sizes_h(7, 1, 1) },
            ]),
        };
        let mut psi = RowMat::zeros(n, 1);
        psi.set(1, 0, 1.0);
        psi.set(2, 0, 3.0);
        psi.set(8, 0, 2.0);
        psi.set(9, 0, 6.0);
        let phase1 = DMatrix::from_element(1, 1, 0.0);
        let v = stratified_variance(&data, &phase1, &psi, &a).unwrap();
        // Stratum 0: k=2, N−D=6 → 2·(1−2/6)·2 = 8/3; stratum 1: k=2,
        // N−D=6 → 2·(1−1/3)·8 = 32/3.
        assert!((v.phase2[(0, 0)] - (8.0 / 3.0 + 32.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_samples_are_rejected() {
        let a = manual_assignment(12, 2, 1, 0);
        let psi = RowMat::zeros(12, 1);
        let phase1 = DMatrix::from_element(1, 1, 0.7);
        assert!(matches!(
            lin_ying_variance(&phase1, &psi, &a),
            Err(VarianceError::TooFewUnits { found: 1 })
        ));
        assert!(matches!(
            supersample_variance(&phase1, &psi, &a),
            Err(VarianceError::TooFewUnits { found: 1 })
        ));
        let data = one_stratum_cohort(12);
        let mut a1 = manual_assignment(12, 2, 1, 0);
        a1.strata = Some(vec![StratumSummary {
            label: "only".into(),
            sizes: a1.sizes,
        }]);
        assert!(matches!(
            stratified_variance(&data, &phase1, &psi, &a1),
            Err(VarianceError::TooFewInStratum { found: 1, .. })
        ));
        let unstruck = manual_assignment(12, 2, 2, 0);
        assert!(matches!(
            stratified_variance(&data, &phase1, &psi, &unstruck),
            Err(VarianceError::NotStratified)
        ));
    }

    #[test]
    fn pooling_matches_hand_computation() {
        // M=2, estimates 1 and 2, within 0.5 each → cov 0.5 + 1.5·0.5 = 1.25.
        let estimates = vec![vec![1.0], vec![2.0]];
        let covs = vec![
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 0.5),
        ];
        let pooled = rubin_pool(&estimates, &covs).unwrap();
        assert!((pooled.beta[0] - 1.5).abs() < 1e-12);
        assert!((pooled.cov[(0, 0)] - 1.25).abs() < 1e-12);
        assert!((pooled.within[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((pooled.between[(0, 0)] - 0.5).abs() < 1e-12);
        let se = 1.25_f64.sqrt();
        assert!((pooled.se[0] - se).abs() < 1e-12);
        assert!((pooled.lo95[0] - (1.5 - Z_975 * se)).abs() < 1e-12);
        assert!((pooled.hi95[0] - (1.5 + Z_975 * se)).abs() < 1e-12);
        assert_eq!(pooled.copies, 2);
    }

    #[test]
    fn pooling_rejects_bad_shapes() {
        let covs = vec![DMatrix::from_element(1, 1, 0.5)];
        assert!(matches!(
            rubin_pool(&[vec![1.0]], &covs),
            Err(VarianceError::TooFewCopies { found: 1 })
        ));
        let mixed = vec![vec![1.0], vec![2.0, 3.0]];
        let covs2 = vec![
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 0.5),
        ];
        assert!(matches!(
            rubin_pool(&mixed, &covs2),
            Err(VarianceError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn variance_invariants_hold_in_higher_dimension() {
        let p = 3;
        let a = manual_assignment(40, 5, 12, 8);
        let mut psi = RowMat::zeros(40, p);
        for i in 0..40 {
            for c in 0..p {
                psi.set(i, c, ((i * (c + 3)) as f64 * 0.37).sin() * 0.2);
            }
        }
        let mut phase1 = DMatrix::zeros(p, p);
        for j in 0..p {
            phase1[(j, j)] = 0.1 + j as f64 * 0.05;
        }
        let v = supersample_variance(&phase1, &psi, &a).unwrap();
        for i in 0..p {
            for j in 0..p {
                assert!((v.total[(i, j)] - v.total[(j, i)]).abs() < 1e-12);
                assert!((v.phase2[(i, j)] - v.phase2[(j, i)]).abs() < 1e-12);
            }
        }
        let eig = v.phase2.clone().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-10), "phase2 PSD");
        assert!(v.factors[0] >= 0.0 && v.factors[0] < 1.0);

        // Pooled covariance dominates the mean within-copy covariance.
        let estimates = vec![
            vec![0.1, 0.2, 0.3],
            vec![0.2, 0.1, 0.4],
            vec![0.15, 0.25, 0.2],
        ];
        let covs = vec![v.total.clone(), v.total.clone(), v.total.clone()];
        let pooled = rubin_pool(&estimates, &covs).unwrap();
        for j in 0..p {
            assert!(pooled.cov[(j, j)] >= pooled.within[(j, j)]);
        }
    }
}
