//! Phase-two sample selection: simple random subcohorts, random
//! supersamples, and influence-guided balanced supersamples drawn with
//! probability-proportional-to-size inclusion probabilities and the cube
//! method, with stratified variants of each design.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::cohort::CohortDataset;
use crate::numeric::{kahan_sum, null_space_vector, RowMat};
use crate::rng::Prng;

/// Units whose influence norm is exactly zero get an adjusted size of this
/// fraction of the largest norm, so they stay samplable (with negligible
/// probability) and their design weights stay finite.
pub const SIZE_FLOOR_FRACTION: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("requested a subcohort of {requested} from a cohort of {cohort}")]
    SubcohortTooLarge { requested: usize, cohort: usize },
    #[error("stratum `{label}` allocation {requested} exceeds its {size} members")]
    StratumAllocationTooLarge {
        label: String,
        requested: usize,
        size: usize,
    },
    #[error("no allocation given for stratum `{label}`")]
    MissingStratumAllocation { label: String },
    #[error("allocation names stratum `{label}`, which is not present in the cohort")]
    UnknownStratum { label: String },
    #[error("a stratified design was requested but the cohort has no stratum column")]
    NotStratified,
    #[error("requested a supersample of {requested} from a pool of {pool}")]
    SupersampleTooLarge { requested: usize, pool: usize },
    #[error("need {needed} units with positive size but only {available} are available")]
    NotEnoughPositiveSizes { needed: usize, available: usize },
    #[error("inclusion probability at index {index} is {value}; must be in (0, 1]")]
    BadInclusionProbability { index: usize, value: f64 },
    #[error("{flags} subcohort flags for a cohort of {cohort}")]
    FlagLengthMismatch { flags: usize, cohort: usize },
    #[error("the recorded subcohort is empty")]
    EmptySubcohort,
    #[error("stratum `{label}` has no recorded subcohort members")]
    EmptyStratumSubcohort { label: String },
}

/// Design role of one cohort unit after phase-two selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Event unit; always in phase two regardless of subcohort membership.
    Case,
    /// Censored unit selected into the subcohort.
    SubcohortNoncase,
    /// Censored unit outside the case-cohort sample, selected for imputation.
    Supersample,
    /// Not selected at any phase.
    Unsampled,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Case => "case",
            Role::SubcohortNoncase => "subcohort_noncase",
            Role::Supersample => "supersample",
            Role::Unsampled => "unsampled",
        }
    }
}

/// Counts describing one realized design (globally or within a stratum).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SampleSizes {
    /// N: cohort units.
    pub cohort: usize,
    /// D: event units.
    pub cases: usize,
    /// n_sc: subcohort draw size.
    pub subcohort: usize,
    /// d: cases that landed inside the subcohort.
    pub subcohort_cases: usize,
    /// m: censored subcohort units.
    pub subcohort_noncases: usize,
    /// n1: supersampled units.
    pub supersample: usize,
    /// n0 = m + D: case-cohort sample size.
    pub phase_two: usize,
    /// n = n0 + n1.
    pub analysed: usize,
}

#[derive(Debug, Clone)]
pub struct StratumSummary {
    pub label: String,
    pub sizes: SampleSizes,
}

/// Per-unit design roles and inclusion probabilities for one realized draw.
/// Indices align with the (sorted) cohort dataset rows.
#[derive(Debug, Clone)]
pub struct SampleAssignment {
    pub role: Vec<Role>,
    /// 1 for cases, the design probability for sampled non-cases, 0 for
    /// unsampled units.
    pub inclusion_prob: Vec<f64>,
    pub sizes: SampleSizes,
    /// True for every unit drawn into the subcohort, including cases; the
    /// subcohort is the only subset that is a simple random sample of the
    /// cohort, which downstream model fits rely on.
    pub in_subcohort: Vec<bool>,
    /// Per-stratum counterparts when the design is stratified.
    pub strata: Option<Vec<StratumSummary>>,
}

impl SampleAssignment {
    pub fn indices(&self, role: Role) -> Vec<usize> {
        (0..self.role.len()).filter(|&i| self.role[i] == role).collect()
    }

    /// Case-cohort sample: cases plus censored subcohort members.
    pub fn phase_two_indices(&self) -> Vec<usize> {
        (0..self.role.len())
            .filter(|&i| matches!(self.role[i], Role::Case | Role::SubcohortNoncase))
            .collect()
    }

    /// Everything carrying analysis weight: phase two plus the supersample.
    pub fn analysed_indices(&self) -> Vec<usize> {
        (0..self.role.len())
            .filter(|&i| self.role[i] != Role::Unsampled)
            .collect()
    }

    /// Units still eligible for supersampling.
    pub fn pool_indices(&self) -> Vec<usize> {
        self.indices(Role::Unsampled)
    }
}

/// Sorted simple random sample of `k` indices out of `0..n`.
fn srs(n: usize, k: usize, rng: &mut Prng) -> Vec<usize> {
    let mut picked = rand::seq::index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    picked
}

fn base_assignment(dataset: &CohortDataset) -> SampleAssignment {
    let n = dataset.n();
    SampleAssignment {
        role: vec![Role::Unsampled; n],
        inclusion_prob: vec![0.0; n],
        sizes: SampleSizes {
            cohort: n,
            cases: dataset.n_events(),
            ..SampleSizes::default()
        },
        in_subcohort: vec![false; n],
        strata: None,
    }
}

fn fill_case_cohort_roles(
    dataset: &CohortDataset,
    assignment: &mut SampleAssignment,
    in_subcohort: &[bool],
    sc_prob: impl Fn(usize) -> f64,
) {
    let mut d = 0usize;
    let mut m = 0usize;
    for i in 0..dataset.n() {
        if dataset.event()[i] == 1 {
            assignment.role[i] = Role::Case;
            assignment.inclusion_prob[i] = 1.0;
            if in_subcohort[i] {
                d += 1;
            }
        } else if in_subcohort[i] {
            assignment.role[i] = Role::SubcohortNoncase;
            assignment.inclusion_prob[i] = sc_prob(i);
            m += 1;
        }
    }
    assignment.sizes.subcohort = d + m;
    assignment.sizes.subcohort_cases = d;
    assignment.sizes.subcohort_noncases = m;
    assignment.sizes.phase_two = m + assignment.sizes.cases;
    assignment.sizes.analysed = assignment.sizes.phase_two;
    assignment.in_subcohort = in_subcohort.to_vec();
}

/// Draws a simple random subcohort of size `n_sc` and adds every case.
pub fn draw_case_cohort(
    dataset: &CohortDataset,
    n_sc: usize,
    rng: &mut Prng,
) -> Result<SampleAssignment, SamplingError> {
    let n = dataset.n();
    if n_sc > n {
        return Err(SamplingError::SubcohortTooLarge {
            requested: n_sc,
            cohort: n,
        });
    }
    let mut assignment = base_assignment(dataset);
    let mut in_sc = vec![false; n];
    for i in srs(n, n_sc, rng) {
        in_sc[i] = true;
    }
    let p = n_sc as f64 / n as f64;
    fill_case_cohort_roles(dataset, &mut assignment, &in_sc, |_| p);
    Ok(assignment)
}

fn stratum_members(dataset: &CohortDataset) -> Result<Vec<Vec<usize>>, SamplingError> {
    let stratum = dataset.stratum().ok_or(SamplingError::NotStratified)?;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_strata()];
    for (i, &h) in stratum.iter().enumerate() {
        members[h].push(i);
    }
    Ok(members)
}

fn stratum_allocations(
    dataset: &CohortDataset,
    alloc: &BTreeMap<String, usize>,
) -> Result<Vec<usize>, SamplingError> {
    let labels = dataset.stratum_labels();
    for label in alloc.keys() {
        if !labels.contains(label) {
            return Err(SamplingError::UnknownStratum {
                label: label.clone(),
            });
        }
    }
    labels
        .iter()
        .map(|label| {
            alloc
                .get(label)
                .copied()
                .ok_or_else(|| SamplingError::MissingStratumAllocation {
                    label: label.clone(),
                })
        })
        .collect()
}

fn per_stratum_sizes(
    dataset: &CohortDataset,
    assignment: &SampleAssignment,
) -> Result<Vec<StratumSummary>, SamplingError> {
    let stratum = dataset.stratum().ok_or(SamplingError::NotStratified)?;
    let labels = dataset.stratum_labels();
    let mut out: Vec<StratumSummary> = labels
        .iter()
        .map(|label| StratumSummary {
            label: label.clone(),
            sizes: SampleSizes::default(),
        })
        .collect();
    for (i, &h) in stratum.iter().enumerate() {
        let s = &mut out[h].sizes;
        s.cohort += 1;
        match assignment.role[i] {
            Role::Case => {
                s.cases += 1;
            }
            Role::SubcohortNoncase => {
                s.subcohort_noncases += 1;
            }
            Role::Supersample => {
                s.supersample += 1;
            }
            Role::Unsampled => {}
        }
    }
    Ok(out)
}

/// Draws an independent simple random subcohort within each stratum and adds
/// every case.  `alloc` maps stratum label to its subcohort size.
pub fn draw_stratified_case_cohort(
    dataset: &CohortDataset,
    alloc: &BTreeMap<String, usize>,
    rng: &mut Prng,
) -> Result<SampleAssignment, SamplingError> {
    let members = stratum_members(dataset)?;
    let wanted = stratum_allocations(dataset, alloc)?;
    for (h, label) in dataset.stratum_labels().iter().enumerate() {
        if wanted[h] > members[h].len() {
            return Err(SamplingError::StratumAllocationTooLarge {
                label: label.clone(),
                requested: wanted[h],
                size: members[h].len(),
            });
        }
    }
    let mut assignment = base_assignment(dataset);
    let mut in_sc = vec![false; dataset.n()];
    let mut sc_prob = vec![0.0; dataset.n()];
    for (h, units) in members.iter().enumerate() {
        let p = wanted[h] as f64 / units.len() as f64;
        for local in srs(units.len(), wanted[h], rng) {
            in_sc[units[local]] = true;
        }
        for &i in units {
            sc_prob[i] = p;
        }
    }
    fill_case_cohort_roles(dataset, &mut assignment, &in_sc, |i| sc_prob[i]);
    attach_stratum_summaries(dataset, &mut assignment, &in_sc)?;
    Ok(assignment)
}

fn attach_stratum_summaries(
    dataset: &CohortDataset,
    assignment: &mut SampleAssignment,
    in_sc: &[bool],
) -> Result<(), SamplingError> {
    let mut summaries = per_stratum_sizes(dataset, assignment)?;
    let stratum = dataset.stratum().ok_or(SamplingError::NotStratified)?;
    for (i, &h) in stratum.iter().enumerate() {
        if dataset.event()[i] == 1 && in_sc[i] {
            summaries[h].sizes.subcohort_cases += 1;
        }
    }
    for s in summaries.iter_mut() {
        s.sizes.subcohort = s.sizes.subcohort_cases + s.sizes.subcohort_noncases;
        s.sizes.phase_two = s.sizes.subcohort_noncases + s.sizes.cases;
        s.sizes.analysed = s.sizes.phase_two;
    }
    assignment.strata = Some(summaries);
    Ok(())
}

/// Builds phase-two roles from a recorded subcohort membership flag, for
/// cohort files whose subcohort was drawn upstream.  Inclusion probabilities
/// are reconstructed from the realised counts: per stratum when the dataset
/// is stratified, whole-cohort otherwise.
pub fn assignment_from_subcohort_flags(
    dataset: &CohortDataset,
    in_subcohort: &[bool],
) -> Result<SampleAssignment, SamplingError> {
    if in_subcohort.len() != dataset.n() {
        return Err(SamplingError::FlagLengthMismatch {
            flags: in_subcohort.len(),
            cohort: dataset.n(),
        });
    }
    let mut assignment = base_assignment(dataset);
    if let Some(stratum) = dataset.stratum() {
        let mut total = vec![0usize; dataset.n_strata()];
        let mut picked = vec![0usize; dataset.n_strata()];
        for (i, &h) in stratum.iter().enumerate() {
            total[h] += 1;
            if in_subcohort[i] {
                picked[h] += 1;
            }
        }
        if let Some(h) = (0..picked.len()).find(|&h| picked[h] == 0) {
            return Err(SamplingError::EmptyStratumSubcohort {
                label: dataset.stratum_labels()[h].clone(),
            });
        }
        let prob: Vec<f64> = stratum
            .iter()
            .map(|&h| picked[h] as f64 / total[h] as f64)
            .collect();
        fill_case_cohort_roles(dataset, &mut assignment, in_subcohort, |i| prob[i]);
        attach_stratum_summaries(dataset, &mut assignment, in_subcohort)?;
    } else {
        let n_sc = in_subcohort.iter().filter(|&&b| b).count();
        if n_sc == 0 {
            return Err(SamplingError::EmptySubcohort);
        }
        let p = n_sc as f64 / dataset.n() as f64;
        fill_case_cohort_roles(dataset, &mut assignment, in_subcohort, |_| p);
    }
    Ok(assignment)
}

fn mark_supersample(assignment: &mut SampleAssignment, unit: usize, prob: f64) {
    debug_assert_eq!(assignment.role[unit], Role::Unsampled);
    assignment.role[unit] = Role::Supersample;
    assignment.inclusion_prob[unit] = prob;
    assignment.sizes.supersample += 1;
    assignment.sizes.analysed += 1;
}

/// Adds a simple random supersample of size `n1` from the unsampled pool.
pub fn add_random_supersample(
    assignment: &mut SampleAssignment,
    n1: usize,
    rng: &mut Prng,
) -> Result<(), SamplingError> {
    let pool = assignment.pool_indices();
    if n1 > pool.len() {
        return Err(SamplingError::SupersampleTooLarge {
            requested: n1,
            pool: pool.len(),
        });
    }
    let p = n1 as f64 / pool.len() as f64;
    for local in srs(pool.len(), n1, rng) {
        mark_supersample(assignment, pool[local], p);
    }
    Ok(())
}

/// Adds an independent simple random supersample within each stratum.
pub fn add_stratified_random_supersample(
    dataset: &CohortDataset,
    assignment: &mut SampleAssignment,
    alloc: &BTreeMap<String, usize>,
    rng: &mut Prng,
) -> Result<(), SamplingError> {
    let members = stratum_members(dataset)?;
    let wanted = stratum_allocations(dataset, alloc)?;
    for (h, units) in members.iter().enumerate() {
        let pool: Vec<usize> = units
            .iter()
            .copied()
            .filter(|&i| assignment.role[i] == Role::Unsampled)
            .collect();
        if wanted[h] > pool.len() {
            return Err(SamplingError::StratumAllocationTooLarge {
                label: dataset.stratum_labels()[h].clone(),
                requested: wanted[h],
                size: pool.len(),
            });
        }
        let p = wanted[h] as f64 / pool.len() as f64;
        for local in srs(pool.len(), wanted[h], rng) {
            mark_supersample(assignment, pool[local], p);
        }
    }
    refresh_stratum_supersample_counts(dataset, assignment)?;
    Ok(())
}

fn refresh_stratum_supersample_counts(
    dataset: &CohortDataset,
    assignment: &mut SampleAssignment,
) -> Result<(), SamplingError> {
    let stratum = dataset.stratum().ok_or(SamplingError::NotStratified)?;
    if let Some(summaries) = assignment.strata.as_mut() {
        for s in summaries.iter_mut() {
            s.sizes.supersample = 0;
        }
        for (i, &h) in stratum.iter().enumerate() {
            if assignment.role[i] == Role::Supersample {
                summaries[h].sizes.supersample += 1;
            }
        }
        for s in summaries.iter_mut() {
            s.sizes.analysed = s.sizes.phase_two + s.sizes.supersample;
        }
    }
    Ok(())
}

/// Solves π_i = min{λ·size_i, 1} subject to Σπ = n1.
///
/// Zero sizes are floored at [`SIZE_FLOOR_FRACTION`] of the largest size
/// before solving, so every unit stays samplable with finite weight.  The
/// solution is exact: sizes are sorted descending, the capped set is a prefix
/// of that order, and λ for each candidate prefix is closed-form, so the
/// smallest prefix whose λ leaves the next unit under 1 is the fixed point of
/// cap-and-resolve iteration.
pub fn solve_inclusion_probabilities(
    sizes: &[f64],
    n1: usize,
) -> Result<Vec<f64>, SamplingError> {
    let n = sizes.len();
    debug_assert!(sizes.iter().all(|s| s.is_finite() && *s >= 0.0));
    if n1 == 0 {
        return Ok(vec![0.0; n]);
    }
    if n1 > n {
        return Err(SamplingError::NotEnoughPositiveSizes {
            needed: n1,
            available: n,
        });
    }
    let max = sizes.iter().fold(0.0_f64, |a, &b| a.max(b));
    if max <= 0.0 {
        return Err(SamplingError::NotEnoughPositiveSizes {
            needed: n1,
            available: 0,
        });
    }
    let floor = SIZE_FLOOR_FRACTION * max;
    let adjusted: Vec<f64> = sizes.iter().map(|s| s.max(floor)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| adjusted[b].partial_cmp(&adjusted[a]).unwrap().then(a.cmp(&b)));
    let mut tail = vec![0.0; n + 1];
    for r in (0..n).rev() {
        tail[r] = tail[r + 1] + adjusted[order[r]];
    }
    let mut capped = 0usize;
    let lambda = loop {
        // Always breaks before `capped` reaches n1: once n1 - 1 units are
        // capped, λ·(largest uncapped) = adjusted/tail ≤ 1 by construction.
        let lam = (n1 - capped) as f64 / tail[capped];
        if lam * adjusted[order[capped]] <= 1.0 + 1e-15 {
            break lam;
        }
        capped += 1;
    };
    let mut pi = vec![0.0; n];
    for (r, &i) in order.iter().enumerate() {
        pi[i] = if r < capped {
            1.0
        } else {
            (lambda * adjusted[i]).min(1.0)
        };
    }
    // One compensated correction pass squeezes float error out of Σπ.
    let uncapped_sum = kahan_sum(order[capped..].iter().map(|&i| pi[i]));
    if uncapped_sum > 0.0 {
        let scale = (n1 - capped) as f64 / uncapped_sum;
        for &i in &order[capped..] {
            pi[i] = (pi[i] * scale).min(1.0);
        }
    }
    Ok(pi)
}

/// Builds the per-unit balancing rows (π_i, ψ_i1, …, ψ_iq).
pub fn balancing_matrix(pi: &[f64], psi: &RowMat) -> RowMat {
    assert_eq!(pi.len(), psi.nrows());
    let q = psi.ncols();
    let mut b = RowMat::zeros(pi.len(), q + 1);
    for i in 0..pi.len() {
        b.set(i, 0, pi[i]);
        for j in 0..q {
            b.set(i, j + 1, psi.get(i, j));
        }
    }
    b
}

/// Diagnostics from one cube-method draw.
#[derive(Debug, Clone)]
pub struct CubeOutcome {
    pub selected: Vec<bool>,
    /// Largest relative gap, over constraints retained through landing,
    /// between the realized Horvitz–Thompson total and its target.
    pub flight_residual_rel: f64,
    /// Balancing coordinates still enforced when the draw completed.
    pub constraints_retained: usize,
}

const FACE_TOL: f64 = 1e-10;

/// Selects a sample honoring inclusion probabilities `pi` while balancing
/// the Horvitz–Thompson totals of `balance` (whose first column must be π
/// itself, which pins the sample size when Σπ is an integer).
///
/// Flight phase: units in random order, a (k+1)-unit active window, moves
/// along a null-space direction of the window's constraint matrix to the
/// nearest cube face, choosing the face by the martingale probability that
/// keeps each unit's selection indicator unbiased.  Landing phase: when too
/// few fractional units remain, balancing coordinates are dropped in reverse
/// declaration order (π last) and the flight resumes.
pub fn cube_select(pi: &[f64], balance: &RowMat, rng: &mut Prng) -> CubeOutcome {
    let n = pi.len();
    assert_eq!(balance.nrows(), n);
    let k = balance.ncols();
    let mut s: Vec<f64> = pi.to_vec();
    // HT-scaled rows a_i = B_i / π_i for fractional units.
    let mut active: Vec<usize> = Vec::new();
    for (i, &p) in pi.iter().enumerate() {
        debug_assert!((0.0..=1.0).contains(&p));
        if p > 0.0 && p < 1.0 {
            active.push(i);
        }
    }
    let a = |i: usize| -> Vec<f64> { balance.row(i).iter().map(|v| v / pi[i]).collect() };
    let rows: BTreeMap<usize, Vec<f64>> = active.iter().map(|&i| (i, a(i))).collect();

    use rand::seq::SliceRandom;
    active.shuffle(rng);
    let mut stream = active.into_iter();
    let mut window: Vec<usize> = Vec::new();
    let mut k_cur = k;
    loop {
        while window.len() < k_cur + 1 {
            match stream.next() {
                Some(i) => window.push(i),
                None => break,
            }
        }
        if window.len() < k_cur + 1 {
            if k_cur > 1 {
                k_cur -= 1;
                continue;
            }
            break;
        }
        // Null direction of the k_cur × (k_cur+1) window constraint matrix.
        let mut m = RowMat::zeros(k_cur, k_cur + 1);
        for (col, &unit) in window.iter().enumerate() {
            for (row, v) in rows[&unit][..k_cur].iter().enumerate() {
                m.set(row, col, *v);
            }
        }
        let u = null_space_vector(&m);
        // Distances to the nearest face in each direction.
        let mut lambda_plus = f64::INFINITY;
        let mut lambda_minus = f64::INFINITY;
        for (j, &unit) in window.iter().enumerate() {
            if u[j] > 0.0 {
                lambda_plus = lambda_plus.min((1.0 - s[unit]) / u[j]);
                lambda_minus = lambda_minus.min(s[unit] / u[j]);
            } else if u[j] < 0.0 {
                lambda_plus = lambda_plus.min(s[unit] / -u[j]);
                lambda_minus = lambda_minus.min((1.0 - s[unit]) / -u[j]);
            }
        }
        debug_assert!(lambda_plus.is_finite() && lambda_minus.is_finite());
        let step = if (rng.random::<f64>()) * (lambda_plus + lambda_minus) < lambda_minus {
            lambda_plus
        } else {
            -lambda_minus
        };
        for (j, &unit) in window.iter().enumerate() {
            s[unit] = (s[unit] + step * u[j]).clamp(0.0, 1.0);
            if s[unit] < FACE_TOL {
                s[unit] = 0.0;
            } else if s[unit] > 1.0 - FACE_TOL {
                s[unit] = 1.0;
            }
        }
        window.retain(|&unit| s[unit] > 0.0 && s[unit] < 1.0);
    }
    // With only the π coordinate retained, Σs over the remaining fractional
    // units is integral, so at most one unit can remain and it must sit at
    // an integer already (up to float noise).
    for &unit in &window {
        s[unit] = s[unit].round();
    }
    let selected: Vec<bool> = s.iter().map(|&v| v >= 0.5).collect();
    let mut worst = 0.0_f64;
    for c in 0..k_cur {
        let target = kahan_sum((0..n).map(|i| balance.get(i, c)));
        let got = kahan_sum(
            (0..n)
                .filter(|&i| selected[i])
                .map(|i| rows.get(&i).map_or(balance.get(i, c), |r| r[c])),
        );
        let rel = (got - target).abs() / (1.0 + target.abs());
        worst = worst.max(rel);
    }
    CubeOutcome {
        selected,
        flight_residual_rel: worst,
        constraints_retained: k_cur,
    }
}

/// Adds an influence-balanced supersample: inclusion probabilities
/// proportional to per-unit influence norms (capped at 1), then a cube draw
/// balanced on (π, ψ).  `psi` rows align with the full cohort.
pub fn add_balanced_supersample(
    assignment: &mut SampleAssignment,
    psi: &RowMat,
    n1: usize,
    rng: &mut Prng,
) -> Result<CubeOutcome, SamplingError> {
    let pool = assignment.pool_indices();
    if n1 > pool.len() {
        return Err(SamplingError::SupersampleTooLarge {
            requested: n1,
            pool: pool.len(),
        });
    }
    let outcome = balanced_pick(&pool, psi, n1, rng, assignment)?;
    Ok(outcome)
}

/// Per-stratum influence-balanced supersampling: probabilities solved and
/// the cube run independently within each stratum.
pub fn add_stratified_balanced_supersample(
    dataset: &CohortDataset,
    assignment: &mut SampleAssignment,
    psi: &RowMat,
    alloc: &BTreeMap<String, usize>,
    rng: &mut Prng,
) -> Result<Vec<(String, CubeOutcome)>, SamplingError> {
    let members = stratum_members(dataset)?;
    let wanted = stratum_allocations(dataset, alloc)?;
    let mut outcomes = Vec::new();
    for (h, units) in members.iter().enumerate() {
        let pool: Vec<usize> = units
            .iter()
            .copied()
            .filter(|&i| assignment.role[i] == Role::Unsampled)
            .collect();
        if wanted[h] > pool.len() {
            return Err(SamplingError::StratumAllocationTooLarge {
                label: dataset.stratum_labels()[h].clone(),
                requested: wanted[h],
                size: pool.len(),
            });
        }
        let outcome = balanced_pick(&pool, psi, wanted[h], rng, assignment)?;
        outcomes.push((dataset.stratum_labels()[h].clone(), outcome));
    }
    refresh_stratum_supersample_counts(dataset, assignment)?;
    Ok(outcomes)
}

fn balanced_pick(
    pool: &[usize],
    psi: &RowMat,
    n1: usize,
    rng: &mut Prng,
    assignment: &mut SampleAssignment,
) -> Result<CubeOutcome, SamplingError> {
    let sizes: Vec<f64> = pool.iter().map(|&i| psi.row_norm(i)).collect();
    let pi = solve_inclusion_probabilities(&sizes, n1)?;
    let pool_psi = {
        let mut m = RowMat::zeros(pool.len(), psi.ncols());
        for (local, &unit) in pool.iter().enumerate() {
            for j in 0..psi.ncols() {
                m.set(local, j, psi.get(unit, j));
            }
        }
        m
    };
    let balance = balancing_matrix(&pi, &pool_psi);
    let outcome = cube_select(&pi, &balance, rng);
    for (local, &unit) in pool.iter().enumerate() {
        if outcome.selected[local] {
            mark_supersample(assignment, unit, pi[local]);
        }
    }
    Ok(outcome)
}

/// First-order approximation of the sampling variance a design with
/// probabilities `pi` adds to the influence totals: (1/N²)·Σ (1−π)/π·ψψᵀ.
/// Diagnostic only.
pub fn approx_design_variance(pi: &[f64], psi: &RowMat) -> Result<RowMat, SamplingError> {
    assert_eq!(pi.len(), psi.nrows());
    let q = psi.ncols();
    let n = pi.len();
    let mut v = RowMat::zeros(q, q);
    for (i, &p) in pi.iter().enumerate() {
        if !(p > 0.0 && p <= 1.0) {
            return Err(SamplingError::BadInclusionProbability { index: i, value: p });
        }
        let f = (1.0 - p) / p;
        for a in 0..q {
            for b in 0..q {
                v.set(a, b, v.get(a, b) + f * psi.get(i, a) * psi.get(i, b));
            }
        }
    }
    let scale = 1.0 / (n as f64 * n as f64);
    for a in 0..q {
        for b in 0..q {
            v.set(a, b, v.get(a, b) * scale);
        }
    }
    Ok(v)
}
