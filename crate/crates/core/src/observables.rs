//! Pair production observables. The free eigenbasis splits into positive
//! and negative spectral subspaces; the pair number is the Hilbert-Schmidt
//! norm of the propagator blocks that cross between them, and the
//! energy-resolved spectrum distributes that norm over final states.
//! Scaling fits separate the spontaneous plateau from the dynamical tail.

use ndarray::{s, Array2};
use num_complex::Complex64;
use thiserror::Error;

use crate::evolution::{ColumnBasis, Propagator, PropagatorBody};
use crate::spectral::{adjoint, EigenSystem};

/// Propagator defects above this taint every derived observable.
pub const UNITARITY_LIMIT: f64 = 1e-8;

const ORTHONORMALITY_LIMIT: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum ObservableError {
    #[error("projectors need the free spectrum, got one diagonalized at lambda = {0}")]
    NotFreeBasis(f64),
    #[error("eigenbasis is not orthonormal: defect {0:.3e}")]
    NotOrthonormal(f64),
    #[error("level at energy {energy:.6e} sits inside the mass gap (floor {floor:.6e})")]
    GapViolation { energy: f64, floor: f64 },
    #[error("propagator spans {got} sites, projectors span {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("block carries {got} columns, subspace has {expected}")]
    BlockColumns { got: usize, expected: usize },
    #[error("propagator unitarity defect {defect:.3e} exceeds {limit:.1e}, result tainted")]
    Tainted { defect: f64, limit: f64 },
    #[error("energy-resolved spectrum needs the positive block evolved as well")]
    MissingPlusBlock,
    #[error("initial pair number {0:.3e} is not vacuum clean")]
    InitialPairs(f64),
    #[error("final pair number {n_final:.6e} disagrees with the spectrum total {total:.6e}")]
    SpectrumTotalMismatch { n_final: f64, total: f64 },
    #[error("charge imbalance: {particles:.6e} particles vs {antiparticles:.6e} antiparticles")]
    ChargeImbalance { particles: f64, antiparticles: f64 },
    #[error("occupation {0:.6e} breaks the exclusion bound")]
    PauliViolation(f64),
    #[error("time series is empty, misaligned, or does not start at t = 0")]
    SeriesShape,
    #[error("scaling fit needs at least {needed} samples, got {got}")]
    ShortSeries { got: usize, needed: usize },
    #[error("scaling fit needs finite, distinct, positive durations")]
    BadSeries,
    #[error("power-law fit needs strictly positive pair numbers")]
    NonPositiveSample,
}

/// Orthonormal bases of the positive and negative spectral subspaces,
/// with adjoints cached for repeated block projections.
#[derive(Clone, Debug)]
pub struct SpectralProjectors {
    plus_basis: Array2<Complex64>,
    minus_basis: Array2<Complex64>,
    plus_adjoint: Array2<Complex64>,
    minus_adjoint: Array2<Complex64>,
    plus_energies: Vec<f64>,
    minus_energies: Vec<f64>,
}

impl SpectralProjectors {
    fn assemble(
        plus_basis: Array2<Complex64>,
        plus_energies: Vec<f64>,
        minus_basis: Array2<Complex64>,
        minus_energies: Vec<f64>,
    ) -> Self {
        let plus_adjoint = adjoint(&plus_basis);
        let minus_adjoint = adjoint(&minus_basis);
        Self {
            plus_basis,
            minus_basis,
            plus_adjoint,
            minus_adjoint,
            plus_energies,
            minus_energies,
        }
    }

    pub fn dimension(&self) -> usize {
        self.minus_basis.nrows()
    }

    pub fn n_plus(&self) -> usize {
        self.plus_basis.ncols()
    }

    pub fn n_minus(&self) -> usize {
        self.minus_basis.ncols()
    }

    pub fn plus_basis(&self) -> &Array2<Complex64> {
        &self.plus_basis
    }

    pub fn minus_basis(&self) -> &Array2<Complex64> {
        &self.minus_basis
    }

    pub fn plus_energies(&self) -> &[f64] {
        &self.plus_energies
    }

    pub fn minus_energies(&self) -> &[f64] {
        &self.minus_energies
    }

    /// Max-norm distance of B+B+* + B-B-* from the identity.
    pub fn completeness_defect(&self) -> f64 {
        let mut p = self.plus_basis.dot(&self.plus_adjoint);
        p += &self.minus_basis.dot(&self.minus_adjoint);
        let n = self.dimension();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((p[[i, j]] - Complex64::new(want, 0.0)).norm());
            }
        }
        worst
    }

    /// Seed columns for block evolution; the positive block is optional
    /// because the total pair number only needs the evolved sea.
    pub fn column_basis(&self, include_plus: bool) -> ColumnBasis {
        ColumnBasis {
            plus: include_plus.then(|| self.plus_basis.clone()),
            minus: self.minus_basis.clone(),
        }
    }
}

/// Split the free eigenbasis by energy sign. The gap floor is a build
/// audit: any level inside it means the operator was not the free one.
pub fn free_projectors(
    es0: &EigenSystem,
    mass: f64,
) -> Result<SpectralProjectors, ObservableError> {
    if es0.source_lambda() != 0.0 {
        return Err(ObservableError::NotFreeBasis(es0.source_lambda()));
    }
    let defect = es0.orthonormality_defect();
    if !(defect <= ORTHONORMALITY_LIMIT) {
        return Err(ObservableError::NotOrthonormal(defect));
    }
    let floor = mass - 1e-9;
    for &e in es0.energies() {
        if e.abs() < floor {
            return Err(ObservableError::GapViolation { energy: e, floor });
        }
    }
    // Energies come sorted ascending, so the sign split is a column split.
    let n_minus = es0.energies().iter().filter(|&&e| e < 0.0).count();
    let minus_basis = es0.states().slice(s![.., ..n_minus]).to_owned();
    let plus_basis = es0.states().slice(s![.., n_minus..]).to_owned();
    let minus_energies = es0.energies()[..n_minus].to_vec();
    let plus_energies = es0.energies()[n_minus..].to_vec();
    Ok(SpectralProjectors::assemble(
        plus_basis,
        plus_energies,
        minus_basis,
        minus_energies,
    ))
}

fn frob_sqr(a: &Array2<Complex64>) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

fn row_norms_sqr(a: &Array2<Complex64>) -> Vec<f64> {
    a.outer_iter()
        .map(|row| row.iter().map(|z| z.norm_sqr()).sum())
        .collect()
}

fn check_pairing(
    u: &Propagator,
    proj: &SpectralProjectors,
) -> Result<(), ObservableError> {
    if u.dimension() != proj.dimension() {
        return Err(ObservableError::DimensionMismatch {
            got: u.dimension(),
            expected: proj.dimension(),
        });
    }
    if let PropagatorBody::ColumnBlocks { plus, minus } = u.body() {
        if minus.ncols() != proj.n_minus() {
            return Err(ObservableError::BlockColumns {
                got: minus.ncols(),
                expected: proj.n_minus(),
            });
        }
        if let Some(p) = plus {
            if p.ncols() != proj.n_plus() {
                return Err(ObservableError::BlockColumns {
                    got: p.ncols(),
                    expected: proj.n_plus(),
                });
            }
        }
    }
    let defect = u.unitarity_defect();
    if !(defect <= UNITARITY_LIMIT) {
        return Err(ObservableError::Tainted {
            defect,
            limit: UNITARITY_LIMIT,
        });
    }
    Ok(())
}

/// Total pair number: the squared Hilbert-Schmidt norms of the two
/// subspace-crossing blocks of the propagator. With only the sea evolved
/// the plus-to-minus norm equals the minus-to-plus one by unitarity, so
/// the single block is doubled.
pub fn particle_number(
    u: &Propagator,
    proj: &SpectralProjectors,
) -> Result<f64, ObservableError> {
    check_pairing(u, proj)?;
    match u.body() {
        PropagatorBody::FullMatrix(m) => {
            let minus_out = m.dot(&proj.minus_basis);
            let plus_out = m.dot(&proj.plus_basis);
            let up_cross = proj.plus_adjoint.dot(&minus_out);
            let down_cross = proj.minus_adjoint.dot(&plus_out);
            Ok(frob_sqr(&up_cross) + frob_sqr(&down_cross))
        }
        PropagatorBody::ColumnBlocks { plus, minus } => {
            let up_cross = proj.plus_adjoint.dot(minus);
            match plus {
                Some(p) => {
                    let down_cross = proj.minus_adjoint.dot(p);
                    Ok(frob_sqr(&up_cross) + frob_sqr(&down_cross))
                }
                None => Ok(2.0 * frob_sqr(&up_cross)),
            }
        }
    }
}

/// Per-state production probabilities paired with the free energies they
/// belong to: particles in the positive subspace, antiparticles (holes)
/// in the negative one.
#[derive(Clone, Debug)]
pub struct ProductionSpectrum {
    particle_energies: Vec<f64>,
    particle_occupations: Vec<f64>,
    antiparticle_energies: Vec<f64>,
    antiparticle_occupations: Vec<f64>,
}

impl ProductionSpectrum {
    pub fn particle_energies(&self) -> &[f64] {
        &self.particle_energies
    }

    pub fn particle_occupations(&self) -> &[f64] {
        &self.particle_occupations
    }

    pub fn antiparticle_energies(&self) -> &[f64] {
        &self.antiparticle_energies
    }

    pub fn antiparticle_occupations(&self) -> &[f64] {
        &self.antiparticle_occupations
    }

    pub fn total_particles(&self) -> f64 {
        self.particle_occupations.iter().sum()
    }

    pub fn total_antiparticles(&self) -> f64 {
        self.antiparticle_occupations.iter().sum()
    }

    pub fn total(&self) -> f64 {
        self.total_particles() + self.total_antiparticles()
    }
}

/// Energy-resolved production: n_p sums the crossing amplitudes from every
/// sea state into particle state p, n_q the reverse. Needs both evolved
/// blocks (or the full matrix); the sea block alone cannot resolve holes.
pub fn production_spectrum(
    u: &Propagator,
    proj: &SpectralProjectors,
) -> Result<ProductionSpectrum, ObservableError> {
    check_pairing(u, proj)?;
    let (up_cross, down_cross) = match u.body() {
        PropagatorBody::FullMatrix(m) => {
            let minus_out = m.dot(&proj.minus_basis);
            let plus_out = m.dot(&proj.plus_basis);
            (
                proj.plus_adjoint.dot(&minus_out),
                proj.minus_adjoint.dot(&plus_out),
            )
        }
        PropagatorBody::ColumnBlocks { plus, minus } => {
            let p = plus.as_ref().ok_or(ObservableError::MissingPlusBlock)?;
            (
                proj.plus_adjoint.dot(minus),
                proj.minus_adjoint.dot(p),
            )
        }
    };
    Ok(ProductionSpectrum {
        particle_energies: proj.plus_energies.clone(),
        particle_occupations: row_norms_sqr(&up_cross),
        antiparticle_energies: proj.minus_energies.clone(),
        antiparticle_occupations: row_norms_sqr(&down_cross),
    })
}

/// Occupation of each eigenstate of the final operator by the evolved sea.
/// This is a different observable from the free-basis spectrum and is the
/// right one when the potential is still on at the end of the run.
/// Completeness fixes the total: the occupations sum to the sea size.
pub fn instantaneous_occupations(
    u: &Propagator,
    proj: &SpectralProjectors,
    final_es: &EigenSystem,
) -> Result<Vec<f64>, ObservableError> {
    check_pairing(u, proj)?;
    if final_es.dimension() != u.dimension() {
        return Err(ObservableError::DimensionMismatch {
            got: u.dimension(),
            expected: final_es.dimension(),
        });
    }
    let sea = match u.body() {
        PropagatorBody::FullMatrix(m) => m.dot(&proj.minus_basis),
        PropagatorBody::ColumnBlocks { minus, .. } => minus.clone(),
    };
    let overlaps = adjoint(final_es.states()).dot(&sea);
    Ok(row_norms_sqr(&overlaps))
}

/// Occupation-weighted mean energy of the antiparticle spectrum below the
/// sea edge. None when essentially nothing was produced down there.
pub fn resonance_energy_estimate(spectrum: &ProductionSpectrum, mass: f64) -> Option<f64> {
    let mut weight = 0.0;
    let mut moment = 0.0;
    for (&e, &n) in spectrum
        .antiparticle_energies
        .iter()
        .zip(&spectrum.antiparticle_occupations)
    {
        if e < -mass {
            weight += n;
            moment += n * e;
        }
    }
    (weight > 1e-12).then(|| moment / weight)
}

/// One full run condensed: the pair-number time series, the final
/// energy-resolved spectrum, and the closing total.
#[derive(Clone, Debug)]
pub struct PairProductionReport {
    pub times: Vec<f64>,
    pub pair_counts: Vec<f64>,
    pub spectrum: ProductionSpectrum,
    pub n_final: f64,
}

impl PairProductionReport {
    /// Cross-checks every report invariant: clean vacuum start, spectrum
    /// total matching the closing count, charge balance, exclusion bounds.
    pub fn validate(&self) -> Result<(), ObservableError> {
        if self.times.is_empty()
            || self.times.len() != self.pair_counts.len()
            || self.times[0] != 0.0
        {
            return Err(ObservableError::SeriesShape);
        }
        if !(self.pair_counts[0].abs() <= 1e-10) {
            return Err(ObservableError::InitialPairs(self.pair_counts[0]));
        }
        let total = self.spectrum.total();
        if !((self.n_final - total).abs() <= 1e-8) {
            return Err(ObservableError::SpectrumTotalMismatch {
                n_final: self.n_final,
                total,
            });
        }
        let particles = self.spectrum.total_particles();
        let antiparticles = self.spectrum.total_antiparticles();
        if !((particles - antiparticles).abs() <= 1e-8) {
            return Err(ObservableError::ChargeImbalance {
                particles,
                antiparticles,
            });
        }
        for &n in self
            .spectrum
            .particle_occupations
            .iter()
            .chain(&self.spectrum.antiparticle_occupations)
        {
            if !(0.0..=1.0 + 1e-9).contains(&n) {
                return Err(ObservableError::PauliViolation(n));
            }
        }
        Ok(())
    }
}

/// Power-law decomposition of the final count against the ramp duration.
#[derive(Clone, Copy, Debug)]
pub struct ScalingFit {
    pub alpha: f64,
    pub n_spont: f64,
    pub fit_residual: f64,
    pub quality_warning: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitMode {
    /// N = c T^-alpha, asymptote pinned to zero.
    Subcritical,
    /// N = N_spont + c T^-alpha, asymptote free.
    Supercritical,
}

const MIN_FIT_SAMPLES: usize = 4;

fn checked_series(series: &[(f64, f64)]) -> Result<Vec<(f64, f64)>, ObservableError> {
    if series.len() < MIN_FIT_SAMPLES {
        return Err(ObservableError::ShortSeries {
            got: series.len(),
            needed: MIN_FIT_SAMPLES,
        });
    }
    let mut sorted = series.to_vec();
    if sorted
        .iter()
        .any(|&(t, n)| !t.is_finite() || t <= 0.0 || !n.is_finite())
    {
        return Err(ObservableError::BadSeries);
    }
    sorted.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(ObservableError::BadSeries);
    }
    Ok(sorted)
}

fn rms_and_warning(series: &[(f64, f64)], predict: impl Fn(f64) -> f64) -> (f64, bool) {
    let n = series.len() as f64;
    let rss: f64 = series
        .iter()
        .map(|&(t, y)| (predict(t) - y).powi(2))
        .sum();
    let mean = series.iter().map(|&(_, y)| y).sum::<f64>() / n;
    let rms = (rss / n).sqrt();
    (rms, rms > 0.1 * mean.abs())
}

/// Best (asymptote, coefficient) for N = a + c T^-alpha at fixed alpha,
/// by linear least squares; returns the residual sum of squares too.
fn amplitude_fit(series: &[(f64, f64)], alpha: f64) -> (f64, f64, f64) {
    let n = series.len() as f64;
    let (mut sf, mut sff, mut sy, mut sfy) = (0.0, 0.0, 0.0, 0.0);
    for &(t, y) in series {
        let f = t.powf(-alpha);
        sf += f;
        sff += f * f;
        sy += y;
        sfy += f * y;
    }
    let det = n * sff - sf * sf;
    if det.abs() < 1e-300 {
        return (0.0, 0.0, f64::INFINITY);
    }
    let a = (sff * sy - sf * sfy) / det;
    let c = (n * sfy - sf * sy) / det;
    let rss: f64 = series
        .iter()
        .map(|&(t, y)| (a + c * t.powf(-alpha) - y).powi(2))
        .sum();
    (a, c, rss)
}

/// Fit the duration scaling of the final pair number. Subcritical mode is
/// a log-log line; supercritical mode scans the exponent, solving the two
/// amplitudes linearly at each candidate, then tightens the best bracket
/// by golden section.
pub fn split_spontaneous(
    series: &[(f64, f64)],
    mode: FitMode,
) -> Result<ScalingFit, ObservableError> {
    let sorted = checked_series(series)?;
    match mode {
        FitMode::Subcritical => {
            if sorted.iter().any(|&(_, n)| n <= 0.0) {
                return Err(ObservableError::NonPositiveSample);
            }
            let pts: Vec<(f64, f64)> =
                sorted.iter().map(|&(t, n)| (t.ln(), n.ln())).collect();
            let m = pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
            let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
            let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let slope = sxy / sxx;
            let c = (my - slope * mx).exp();
            let alpha = -slope;
            let (fit_residual, quality_warning) =
                rms_and_warning(&sorted, |t| c * t.powf(-alpha));
            Ok(ScalingFit {
                alpha,
                n_spont: 0.0,
                fit_residual,
                quality_warning,
            })
        }
        FitMode::Supercritical => {
            const ALPHA_LO: f64 = 0.02;
            const ALPHA_HI: f64 = 8.0;
            let rss_at = |alpha: f64| amplitude_fit(&sorted, alpha).2;
            let mut best = (ALPHA_LO, rss_at(ALPHA_LO));
            let scan = 160;
            for i in 1..=scan {
                let a = ALPHA_LO + (ALPHA_HI - ALPHA_LO) * i as f64 / scan as f64;
                let r = rss_at(a);
                if r < best.1 {
                    best = (a, r);
                }
            }
            let step = (ALPHA_HI - ALPHA_LO) / scan as f64;
            let mut lo = (best.0 - step).max(ALPHA_LO);
            let mut hi = (best.0 + step).min(ALPHA_HI);
            // Golden-section on the scan-bracketed minimum.
            let phi = (5.0f64.sqrt() - 1.0) / 2.0;
            let mut x1 = hi - phi * (hi - lo);
            let mut x2 = lo + phi * (hi - lo);
            let (mut f1, mut f2) = (rss_at(x1), rss_at(x2));
            for _ in 0..120 {
                if hi - lo < 1e-12 {
                    break;
                }
                if f1 <= f2 {
                    hi = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = hi - phi * (hi - lo);
                    f1 = rss_at(x1);
                } else {
                    lo = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = lo + phi * (hi - lo);
                    f2 = rss_at(x2);
                }
            }
            let alpha = 0.5 * (lo + hi);
            let (n_spont, c, _) = amplitude_fit(&sorted, alpha);
            let (fit_residual, quality_warning) =
                rms_and_warning(&sorted, |t| n_spont + c * t.powf(-alpha));
            Ok(ScalingFit {
                alpha,
                n_spont,
                fit_residual,
                quality_warning,
            })
        }
    }
}
