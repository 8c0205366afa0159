//! Dense diagonalization of Hamiltonian snapshots, localization-based state
//! classification, spectral flow in the well depth lambda, the critical
//! depth, and avoided-crossing gap measurements.

use crate::lattice::{
    build_hamiltonian, GaussianPotential, HermitianOperator, LatticeError, LatticeSpec,
};
use ndarray::{Array2, ArrayView1};
use ndarray_linalg::{EigValsh, Eigh, UPLO};
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("eigensolver failed: {0}")]
    Solver(String),
    #[error("eigenpair residual {residual:.3e} exceeds 1e-8 of the spectral radius bound {bound:.3e}")]
    BadResidual { residual: f64, bound: f64 },
    #[error("state norm {0} is not 1 within 1e-10")]
    NonNormalized(f64),
    #[error("lambda grid must be finite, strictly ascending, and non-empty")]
    BadGrid,
    #[error("tolerance must be positive and finite, got {0}")]
    BadTolerance(f64),
    #[error("lambda must be finite and >= 0, got {0}")]
    NegativeLambda(f64),
    #[error("invalid bracket ({0}, {1}): need 0 <= lo < hi, both finite")]
    BadBracket(f64, f64),
    #[error("no bound state appears anywhere in bracket ({0}, {1})")]
    NoBoundState(f64, f64),
    #[error("deepest bound state only reaches {deepest:.6} > -M within bracket ({lo}, {hi})")]
    NotReached { lo: f64, hi: f64, deepest: f64 },
    #[error("bracket lower end {0} already has {1} dived state(s)")]
    BracketSupercritical(f64, usize),
    #[error("window ({lambda_lo}, {lambda_hi}) x ({energy_lo}, {energy_hi}) contains no near-degeneracy")]
    NoCrossing {
        lambda_lo: f64,
        lambda_hi: f64,
        energy_lo: f64,
        energy_hi: f64,
    },
    #[error("window contains {count} near-degeneracies; narrow it to isolate one")]
    MultipleCrossings { count: usize },
}

/// Full spectral decomposition of one Hamiltonian snapshot H(lambda):
/// ascending energies with the matching orthonormal eigenvector columns.
#[derive(Clone, Debug)]
pub struct EigenSystem {
    energies: Vec<f64>,
    states: Array2<Complex64>,
    source_lambda: f64,
}

impl EigenSystem {
    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    /// Eigenvectors as columns, aligned with `energies`.
    pub fn states(&self) -> &Array2<Complex64> {
        &self.states
    }

    pub fn state(&self, i: usize) -> ArrayView1<'_, Complex64> {
        self.states.column(i)
    }

    pub fn source_lambda(&self) -> f64 {
        self.source_lambda
    }

    pub fn dimension(&self) -> usize {
        self.energies.len()
    }

    /// max |S^dagger S - I|.
    pub fn orthonormality_defect(&self) -> f64 {
        let gram = adjoint(&self.states).dot(&self.states);
        let mut worst = 0.0f64;
        for ((i, j), v) in gram.indexed_iter() {
            let target = if i == j { Complex64::ONE } else { Complex64::ZERO };
            worst = worst.max((v - target).norm());
        }
        worst
    }

    /// max_i max-norm of (H v_i - E_i v_i).
    pub fn residual(&self, h: &HermitianOperator) -> f64 {
        let n = self.dimension();
        let mut hv = vec![Complex64::ZERO; n];
        let mut worst = 0.0f64;
        let mut col = vec![Complex64::ZERO; n];
        for i in 0..n {
            for (c, v) in col.iter_mut().zip(self.states.column(i)) {
                *c = *v;
            }
            h.apply(&col, &mut hv);
            for (hvj, vj) in hv.iter().zip(&col) {
                worst = worst.max((hvj - self.energies[i] * vj).norm());
            }
        }
        worst
    }
}

pub(crate) fn adjoint(a: &Array2<Complex64>) -> Array2<Complex64> {
    a.t().mapv(|z| z.conj())
}

/// Dense Hermitian eigendecomposition, LAPACK-backed. The eigenpair residual
/// is audited on every call; energies come back ascending.
pub fn diagonalize(h: &HermitianOperator, source_lambda: f64) -> Result<EigenSystem, SpectralError> {
    let (vals, vecs) = h
        .to_dense()
        .eigh(UPLO::Lower)
        .map_err(|e| SpectralError::Solver(e.to_string()))?;
    let energies: Vec<f64> = vals.to_vec();
    debug_assert!(energies.windows(2).all(|w| w[0] <= w[1]));
    // The LAPACK call sees the row-major buffer as column-major, so it
    // diagonalizes conj(H); conjugating the vectors maps them back. The
    // residual audit below pins this convention. Downstream block kernels
    // need row-major storage, so the layout is forced here once.
    let mut states = Array2::zeros(vecs.raw_dim());
    states.zip_mut_with(&vecs, |out, v| *out = v.conj());
    let es = EigenSystem {
        energies,
        states,
        source_lambda,
    };
    let bound = h.spectral_radius_bound().max(1.0);
    let residual = es.residual(h);
    if residual > 1e-8 * bound {
        return Err(SpectralError::BadResidual { residual, bound });
    }
    Ok(es)
}

/// Eigenvalues only, ascending; cheaper than [`diagonalize`] when the
/// vectors are not needed (counting, bisection, gap refinement).
pub fn eigenvalues(h: &HermitianOperator) -> Result<Vec<f64>, SpectralError> {
    let vals = h
        .to_dense()
        .eigvalsh(UPLO::Lower)
        .map_err(|e| SpectralError::Solver(e.to_string()))?;
    Ok(vals.to_vec())
}

/// Inverse participation ratio sum_i |v_i|^4 of a normalized state: 1 for a
/// single-site state, 1/n for a uniform one.
pub fn ipr(state: ArrayView1<'_, Complex64>) -> Result<f64, SpectralError> {
    let norm_sq: f64 = state.iter().map(|v| v.norm_sqr()).sum();
    if (norm_sq.sqrt() - 1.0).abs() > 1e-10 {
        return Err(SpectralError::NonNormalized(norm_sq.sqrt()));
    }
    Ok(state.iter().map(|v| v.norm_sqr() * v.norm_sqr()).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StateLabel {
    NegativeContinuum,
    Bound,
    PositiveContinuum,
    DivedBound,
}

impl StateLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            StateLabel::NegativeContinuum => "negative_continuum",
            StateLabel::Bound => "bound",
            StateLabel::PositiveContinuum => "positive_continuum",
            StateLabel::DivedBound => "dived_bound",
        }
    }
}

/// Per-state labels and localization measures for one snapshot. Gap states
/// are Bound; states continued below -M keep the DivedBound label only while
/// their IPR stays above the threshold separating them from the
/// pseudo-continuum background.
#[derive(Clone, Debug)]
pub struct StateClassification {
    labels: Vec<StateLabel>,
    iprs: Vec<f64>,
    ipr_threshold: f64,
    low_confidence: bool,
}

impl StateClassification {
    pub fn labels(&self) -> &[StateLabel] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> StateLabel {
        self.labels[i]
    }

    pub fn iprs(&self) -> &[f64] {
        &self.iprs
    }

    pub fn ipr_threshold(&self) -> f64 {
        self.ipr_threshold
    }

    /// True when some bound state fails the 5x-median-IPR separation that
    /// justifies the localization threshold.
    pub fn low_confidence(&self) -> bool {
        self.low_confidence
    }

    pub fn bound_count(&self) -> usize {
        self.labels.iter().filter(|l| **l == StateLabel::Bound).count()
    }

    pub fn dived_count(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| **l == StateLabel::DivedBound)
            .count()
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Threshold core over precomputed level data; see
/// [`adaptive_ipr_threshold`] for the eigen-system entry point.
pub fn adaptive_threshold_from(energies: &[f64], iprs: &[f64], mass: f64) -> f64 {
    let mut continuum: Vec<f64> = energies
        .iter()
        .zip(iprs)
        .filter(|(e, _)| e.abs() >= mass)
        .map(|(_, v)| *v)
        .collect();
    continuum.sort_unstable_by(f64::total_cmp);
    if continuum.is_empty() {
        // No continuum reference (tiny toy systems): fall back to a neutral
        // threshold that nothing extended can reach.
        return 0.5;
    }
    5.0 * median(&continuum)
}

/// Median IPR of the continuum states (|E| >= M), times five: the adaptive
/// localization threshold. Robust across lattice sizes because the continuum
/// median tracks 1/n.
pub fn adaptive_ipr_threshold(es: &EigenSystem, mass: f64) -> Result<f64, SpectralError> {
    let mut iprs = Vec::with_capacity(es.dimension());
    for i in 0..es.dimension() {
        iprs.push(ipr(es.state(i))?);
    }
    Ok(adaptive_threshold_from(es.energies(), &iprs, mass))
}

/// Classification core over precomputed level data (energy plus IPR per
/// state), shared by the eigen-system path and flow snapshots that no
/// longer hold their states.
pub fn classify_level_data(
    energies: &[f64],
    iprs: Vec<f64>,
    mass: f64,
    ipr_threshold: f64,
) -> StateClassification {
    let n = energies.len();
    // Band-edge guard: kinetic zero modes sit at exactly +-M and rounding
    // can land them a few ulps inside the gap; they are continuum states.
    let edge = 1e-9 * mass.max(1.0);
    let labels: Vec<StateLabel> = (0..n)
        .map(|i| {
            let e = energies[i];
            if e >= mass - edge {
                StateLabel::PositiveContinuum
            } else if e > -mass + edge {
                StateLabel::Bound
            } else if e < -mass && iprs[i] > ipr_threshold {
                StateLabel::DivedBound
            } else {
                StateLabel::NegativeContinuum
            }
        })
        .collect();

    // Separation audit: every bound state should sit at least 5x above the
    // median continuum IPR, else the threshold itself is suspect.
    let mut continuum: Vec<f64> = labels
        .iter()
        .zip(&iprs)
        .filter(|(l, _)| {
            matches!(
                l,
                StateLabel::NegativeContinuum | StateLabel::PositiveContinuum
            )
        })
        .map(|(_, v)| *v)
        .collect();
    continuum.sort_unstable_by(f64::total_cmp);
    let low_confidence = if continuum.is_empty() {
        false
    } else {
        let floor = 5.0 * median(&continuum);
        labels
            .iter()
            .zip(&iprs)
            .any(|(l, v)| *l == StateLabel::Bound && *v < floor)
    };

    StateClassification {
        labels,
        iprs,
        ipr_threshold,
        low_confidence,
    }
}

/// Label every state of a snapshot. `ipr_threshold` is the absolute IPR
/// above which a sub-(-M) state counts as a dived bound state; use
/// [`classify_states_adaptive`] for the 5x-median default.
pub fn classify_states(
    es: &EigenSystem,
    spec: &LatticeSpec,
    ipr_threshold: f64,
) -> Result<StateClassification, SpectralError> {
    let mut iprs = Vec::with_capacity(es.dimension());
    for i in 0..es.dimension() {
        iprs.push(ipr(es.state(i))?);
    }
    Ok(classify_level_data(
        es.energies(),
        iprs,
        spec.mass(),
        ipr_threshold,
    ))
}

pub fn classify_states_adaptive(
    es: &EigenSystem,
    spec: &LatticeSpec,
) -> Result<StateClassification, SpectralError> {
    let threshold = adaptive_ipr_threshold(es, spec.mass())?;
    classify_states(es, spec, threshold)
}

/// A continuation ambiguity that survived grid refinement: the branch link
/// between these grid points is a guess, flagged rather than silent.
#[derive(Clone, Copy, Debug)]
pub struct BranchBreak {
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub level: usize,
    pub overlap: f64,
}

#[derive(Clone, Debug)]
pub struct FlowOptions {
    /// Minimal squared eigenvector overlap for an unambiguous link.
    pub overlap_threshold: f64,
    /// Energy distance under which neighboring levels count as one
    /// degenerate cluster (matched as a subspace).
    pub degeneracy_tol: f64,
    /// Midpoint insertions allowed per ambiguous interval.
    pub max_refine_depth: usize,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            overlap_threshold: 0.5,
            degeneracy_tol: 1e-9,
            max_refine_depth: 8,
        }
    }
}

/// Energies, localization, and eigenvector-continued branches over a lambda
/// grid (plus any midpoints inserted to disambiguate the continuation).
#[derive(Clone, Debug)]
pub struct SpectralFlow {
    spec: LatticeSpec,
    pot: GaussianPotential,
    lambdas: Vec<f64>,
    energies: Vec<Vec<f64>>,
    iprs: Vec<Vec<f64>>,
    branch_levels: Vec<Vec<usize>>,
    breaks: Vec<BranchBreak>,
}

impl SpectralFlow {
    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    pub fn pot(&self) -> &GaussianPotential {
        &self.pot
    }

    /// Grid actually used, refinement points included.
    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// Ascending energies at grid point g.
    pub fn energies_at(&self, g: usize) -> &[f64] {
        &self.energies[g]
    }

    pub fn iprs_at(&self, g: usize) -> &[f64] {
        &self.iprs[g]
    }

    pub fn branch_count(&self) -> usize {
        self.branch_levels.len()
    }

    /// Sorted-level index occupied by branch b at grid point g.
    pub fn branch_level(&self, b: usize, g: usize) -> usize {
        self.branch_levels[b][g]
    }

    pub fn branch_energy(&self, b: usize, g: usize) -> f64 {
        self.energies[g][self.branch_levels[b][g]]
    }

    pub fn breaks(&self) -> &[BranchBreak] {
        &self.breaks
    }

    /// Branch whose energy at grid point g is the deepest inside the gap,
    /// if any branch sits strictly inside (-M, M) there.
    pub fn deepest_gap_branch_at(&self, g: usize) -> Option<usize> {
        let mass = self.spec.mass();
        (0..self.branch_count())
            .filter(|&b| {
                let e = self.branch_energy(b, g);
                e > -mass && e < mass
            })
            .min_by(|&a, &b| {
                self.branch_energy(a, g)
                    .total_cmp(&self.branch_energy(b, g))
            })
    }
}

struct MatchOutcome {
    perm: Vec<usize>,
    worst_level: usize,
    worst_overlap: f64,
    ambiguous: bool,
}

/// Greedy one-to-one matching on squared eigenvector overlaps, validated
/// link by link; degenerate clusters on either side are accepted on their
/// aggregate subspace overlap (the sum of squared overlaps equals the sum of
/// squared principal-angle cosines of the subspace pair).
fn match_states(prev: &EigenSystem, next: &EigenSystem, opts: &FlowOptions) -> MatchOutcome {
    let n = prev.dimension();
    let overlap_c = adjoint(prev.states()).dot(next.states());
    let overlap: Vec<f64> = overlap_c.iter().map(|z| z.norm_sqr()).collect();
    let at = |i: usize, j: usize| overlap[i * n + j];

    let mut order: Vec<u32> = (0..(n * n) as u32).collect();
    order.sort_unstable_by(|&a, &b| overlap[b as usize].total_cmp(&overlap[a as usize]));

    let mut perm = vec![usize::MAX; n];
    let mut taken = vec![false; n];
    let mut assigned = 0;
    for &flat in &order {
        let (i, j) = ((flat as usize) / n, (flat as usize) % n);
        if perm[i] == usize::MAX && !taken[j] {
            perm[i] = j;
            taken[j] = true;
            assigned += 1;
            if assigned == n {
                break;
            }
        }
    }

    let cluster_of = |energies: &[f64], idx: usize, tol: f64| -> (usize, usize) {
        let mut lo = idx;
        while lo > 0 && energies[lo] - energies[lo - 1] <= tol {
            lo -= 1;
        }
        let mut hi = idx;
        while hi + 1 < energies.len() && energies[hi + 1] - energies[hi] <= tol {
            hi += 1;
        }
        (lo, hi)
    };

    let mut worst_level = 0;
    let mut worst_overlap = f64::INFINITY;
    let mut ambiguous = false;
    for i in 0..n {
        let j = perm[i];
        let direct = at(i, j);
        if direct >= opts.overlap_threshold {
            continue;
        }
        let (nlo, nhi) = cluster_of(next.energies(), j, opts.degeneracy_tol);
        let next_cluster: f64 = (nlo..=nhi).map(|jj| at(i, jj)).sum();
        let (plo, phi) = cluster_of(prev.energies(), i, opts.degeneracy_tol);
        let prev_cluster: f64 = (plo..=phi).map(|ii| at(ii, j)).sum();
        let best = direct.max(next_cluster).max(prev_cluster);
        if best < opts.overlap_threshold {
            ambiguous = true;
            if best < worst_overlap {
                worst_overlap = best;
                worst_level = i;
            }
        }
    }
    if !ambiguous {
        worst_overlap = 1.0;
    }
    MatchOutcome {
        perm,
        worst_level,
        worst_overlap,
        ambiguous,
    }
}

/// Trace the spectrum over an ascending lambda grid, linking levels between
/// neighboring snapshots by maximal eigenvector overlap. Ambiguous links
/// trigger midpoint refinement; links still ambiguous at full depth are
/// recorded as branch breaks (never silently misassigned).
pub fn spectral_flow(
    spec: &LatticeSpec,
    pot: &GaussianPotential,
    lambda_grid: &[f64],
    opts: &FlowOptions,
) -> Result<SpectralFlow, SpectralError> {
    if lambda_grid.is_empty()
        || lambda_grid.iter().any(|l| !l.is_finite())
        || lambda_grid.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(SpectralError::BadGrid);
    }

    let snapshot = |lambda: f64| -> Result<EigenSystem, SpectralError> {
        diagonalize(&build_hamiltonian(spec, pot, lambda)?, lambda)
    };

    let n = spec.dimension();
    let mut flow = SpectralFlow {
        spec: spec.clone(),
        pot: pot.clone(),
        lambdas: Vec::new(),
        energies: Vec::new(),
        iprs: Vec::new(),
        branch_levels: (0..n).map(|_| Vec::new()).collect(),
        breaks: Vec::new(),
    };

    let record = |flow: &mut SpectralFlow, es: &EigenSystem, perm: Option<&[usize]>| {
        flow.lambdas.push(es.source_lambda());
        flow.energies.push(es.energies().to_vec());
        flow.iprs
            .push((0..n).map(|i| ipr(es.state(i)).unwrap_or(f64::NAN)).collect());
        match perm {
            None => {
                for (b, levels) in flow.branch_levels.iter_mut().enumerate() {
                    levels.push(b);
                }
            }
            Some(perm) => {
                for levels in flow.branch_levels.iter_mut() {
                    let cur = *levels.last().expect("branch has a previous point");
                    levels.push(perm[cur]);
                }
            }
        }
    };

    let mut prev = snapshot(lambda_grid[0])?;
    record(&mut flow, &prev, None);

    for &lambda in &lambda_grid[1..] {
        let mut stack: Vec<(EigenSystem, usize)> = vec![(snapshot(lambda)?, opts.max_refine_depth)];
        while let Some((next, depth)) = stack.pop() {
            let outcome = match_states(&prev, &next, opts);
            let lambda_mid = 0.5 * (prev.source_lambda() + next.source_lambda());
            let splittable = depth > 0
                && lambda_mid > prev.source_lambda()
                && lambda_mid < next.source_lambda();
            if outcome.ambiguous && splittable {
                stack.push((next, depth - 1));
                stack.push((snapshot(lambda_mid)?, depth - 1));
                continue;
            }
            if outcome.ambiguous {
                flow.breaks.push(BranchBreak {
                    lambda_lo: prev.source_lambda(),
                    lambda_hi: next.source_lambda(),
                    level: outcome.worst_level,
                    overlap: outcome.worst_overlap,
                });
            }
            record(&mut flow, &next, Some(&outcome.perm));
            prev = next;
        }
    }
    Ok(flow)
}

fn count_below(energies: &[f64], threshold: f64) -> usize {
    energies.iter().filter(|e| **e < threshold).count()
}

/// Number of negative-energy levels of the free Hamiltonian: the Dirac-sea
/// baseline for dived-state counting.
fn sea_level_count(spec: &LatticeSpec, pot: &GaussianPotential) -> Result<usize, SpectralError> {
    let free = eigenvalues(&build_hamiltonian(spec, pot, 0.0)?)?;
    Ok(count_below(&free, 0.0))
}

/// Former gap states now below -M at this lambda.
///
/// The potential term -lambda V is negative semidefinite, so every sorted
/// eigenvalue is non-increasing in lambda and no sea level ever rises above
/// -M. Counting levels below -M relative to the free sea therefore equals
/// the branch-continuation count without tracing eigenvectors.
pub fn count_dived_states(
    spec: &LatticeSpec,
    pot: &GaussianPotential,
    lambda: f64,
) -> Result<usize, SpectralError> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(SpectralError::NegativeLambda(lambda));
    }
    let sea = sea_level_count(spec, pot)?;
    let below = count_below(
        &eigenvalues(&build_hamiltonian(spec, pot, lambda)?)?,
        -spec.mass(),
    );
    // Levels pinned exactly at -M in the free spectrum (periodic momenta)
    // drift infinitesimally below the edge for any lambda > 0; they belong
    // to the sea, hence the saturating difference.
    Ok(below.saturating_sub(sea))
}

/// Critical depth: the lambda where the deepest bound branch first passes
/// -M, located by bisection on the dived-state count (monotone in lambda by
/// the same argument as in [`count_dived_states`]) to bracket width <= tol.
pub fn find_lambda_critical(
    spec: &LatticeSpec,
    pot: &GaussianPotential,
    bracket: (f64, f64),
    tol: f64,
) -> Result<f64, SpectralError> {
    if !(tol.is_finite() && tol > 0.0) {
        return Err(SpectralError::BadTolerance(tol));
    }
    let (mut lo, mut hi) = bracket;
    if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || lo >= hi {
        return Err(SpectralError::BadBracket(lo, hi));
    }
    let sea = sea_level_count(spec, pot)?;
    let mass = spec.mass();
    let dived = |lambda: f64| -> Result<usize, SpectralError> {
        let vals = eigenvalues(&build_hamiltonian(spec, pot, lambda)?)?;
        Ok(count_below(&vals, -mass).saturating_sub(sea))
    };

    let at_lo = dived(lo)?;
    if at_lo > 0 {
        return Err(SpectralError::BracketSupercritical(lo, at_lo));
    }
    if dived(hi)? == 0 {
        // Nothing dives in the bracket; report whether a gap state exists at
        // the deep end to distinguish "not reached" from "no bound state".
        let vals = eigenvalues(&build_hamiltonian(spec, pot, hi)?)?;
        let deepest_gap = vals
            .iter()
            .copied()
            .filter(|e| *e > -mass && *e < mass)
            .fold(f64::INFINITY, f64::min);
        if deepest_gap.is_finite() {
            return Err(SpectralError::NotReached {
                lo,
                hi,
                deepest: deepest_gap,
            });
        }
        return Err(SpectralError::NoBoundState(lo, hi));
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if dived(mid)? >= 1 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Window isolating one near-degeneracy of two flow branches.
#[derive(Clone, Copy, Debug)]
pub struct CrossingWindow {
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub energy_lo: f64,
    pub energy_hi: f64,
}

/// Minimal adjacent level spacing among the eigenvalues inside the energy
/// window; infinite when fewer than two levels fall inside.
fn window_gap(energies: &[f64], lo: f64, hi: f64) -> f64 {
    let mut gap = f64::INFINITY;
    let mut prev: Option<f64> = None;
    for &e in energies {
        if e < lo || e > hi {
            continue;
        }
        if let Some(p) = prev {
            gap = gap.min(e - p);
        }
        prev = Some(e);
    }
    gap
}

/// Shrink a bracket around the gap minimum until the minimal gap changes by
/// less than 1% between refinement rounds.
fn refine_min_gap(
    eval: &mut dyn FnMut(f64) -> Result<f64, SpectralError>,
    mut lo: f64,
    mut hi: f64,
    mut best: (f64, f64),
) -> Result<(f64, f64), SpectralError> {
    const SAMPLES: usize = 8;
    for _ in 0..48 {
        let prev_gap = best.1;
        let step = (hi - lo) / (SAMPLES as f64 + 1.0);
        let mut samples = Vec::with_capacity(SAMPLES + 1);
        samples.push(best);
        for s in 1..=SAMPLES {
            let x = lo + step * s as f64;
            samples.push((x, eval(x)?));
        }
        samples.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        let arg = samples
            .iter()
            .enumerate()
            .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
            .map(|(i, _)| i)
            .expect("non-empty samples");
        best = samples[arg];
        lo = if arg == 0 { lo } else { samples[arg - 1].0 };
        hi = if arg == samples.len() - 1 {
            hi
        } else {
            samples[arg + 1].0
        };
        let converged = (prev_gap - best.1).abs() <= 0.01 * best.1.max(f64::MIN_POSITIVE);
        if converged || best.1 < 1e-13 || hi - lo < 1e-12 {
            break;
        }
    }
    Ok((best.1, best.0))
}

/// Minimal energy separation of the two branches inside the window and the
/// lambda attaining it. The flow supplies candidate locations; the minimum
/// is then refined with fresh diagonalizations between grid points.
pub fn avoided_crossing_gap(
    flow: &SpectralFlow,
    window: CrossingWindow,
) -> Result<(f64, f64), SpectralError> {
    let CrossingWindow {
        lambda_lo,
        lambda_hi,
        energy_lo,
        energy_hi,
    } = window;
    let no_crossing = || SpectralError::NoCrossing {
        lambda_lo,
        lambda_hi,
        energy_lo,
        energy_hi,
    };

    let in_window: Vec<usize> = (0..flow.lambdas().len())
        .filter(|&g| flow.lambdas()[g] >= lambda_lo && flow.lambdas()[g] <= lambda_hi)
        .collect();
    if in_window.len() < 3 {
        return Err(no_crossing());
    }
    let gaps: Vec<f64> = in_window
        .iter()
        .map(|&g| window_gap(flow.energies_at(g), energy_lo, energy_hi))
        .collect();

    let minima: Vec<usize> = (1..gaps.len() - 1)
        .filter(|&k| gaps[k].is_finite() && gaps[k] < gaps[k - 1] && gaps[k] < gaps[k + 1])
        .collect();
    match minima.len() {
        0 => Err(no_crossing()),
        1 => {
            let k = minima[0];
            let spec = flow.spec().clone();
            let pot = flow.pot().clone();
            let mut eval = move |lambda: f64| -> Result<f64, SpectralError> {
                let vals = eigenvalues(&build_hamiltonian(&spec, &pot, lambda)?)?;
                Ok(window_gap(&vals, energy_lo, energy_hi))
            };
            refine_min_gap(
                &mut eval,
                flow.lambdas()[in_window[k - 1]],
                flow.lambdas()[in_window[k + 1]],
                (flow.lambdas()[in_window[k]], gaps[k]),
            )
        }
        count => Err(SpectralError::MultipleCrossings { count }),
    }
}

/// Mean adjacent spacing of the levels inside [lo, hi]; None with fewer than
/// two levels. Used for the pseudo-continuum discretization scale near -M.
pub fn mean_spacing_in(energies: &[f64], lo: f64, hi: f64) -> Option<f64> {
    let inside: Vec<f64> = energies.iter().copied().filter(|e| *e >= lo && *e <= hi).collect();
    if inside.len() < 2 {
        return None;
    }
    Some((inside.last().unwrap() - inside[0]) / (inside.len() - 1) as f64)
}

/// Least-squares slope of log(y) against log(x).
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}
