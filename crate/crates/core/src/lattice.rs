//! Lattice geometry, potentials, ramp schedules, and assembly of the sparse
//! staggered Hamiltonian restricted to one decoupled copy.

use num_complex::Complex64;
use std::f64::consts::PI;
use thiserror::Error;

/// Lattice constant `l`. Fixed internal length unit; energies are in 1/l
/// and hbar = 1, so times are in l (equivalently 1/M up to the mass value).
pub const LATTICE_CONSTANT: f64 = 1.0;

#[derive(Debug, Error)]
pub enum LatticeError {
    #[error("lattice must be at least 3x3, got {nx}x{ny}")]
    TooSmall { nx: usize, ny: usize },
    #[error("periodic boundary needs even extents, got {nx}x{ny}: an odd wrap couples the two staggered copies")]
    OddPeriodic { nx: usize, ny: usize },
    #[error("mass must be positive and finite, got {0}")]
    BadMass(f64),
    #[error("potential amplitude must be positive and finite, got {0}")]
    BadAmplitude(f64),
    #[error("potential width must be positive and finite, got {0}")]
    BadWidth(f64),
    #[error("potential center must be finite, got ({0}, {1})")]
    BadCenter(f64, f64),
    #[error("schedule needs finite amplitudes, t_on > 0, t_off > 0, t_hold >= 0")]
    BadSchedule,
    #[error("potential depth lambda must be finite, got {0}")]
    BadLambda(f64),
    #[error("wavevector ({0}, {1}) lies outside the diamond Brillouin zone")]
    OutsideBrillouinZone(f64, f64),
    #[error("entry ({row}, {col}) out of range for dimension {dim}")]
    EntryOutOfRange { row: usize, col: usize, dim: usize },
    #[error("non-Hermitian entry at ({row}, {col}): {value} vs transpose {partner}")]
    NotHermitian {
        row: usize,
        col: usize,
        value: Complex64,
        partner: Complex64,
    },
    #[error("diagonal entry {row} must be real, got {value}")]
    ComplexDiagonal { row: usize, value: Complex64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    Open,
    Periodic,
}

/// Which of the two decoupled staggered copies is simulated. They carry the
/// same physics; the choice is kept configurable for symmetry checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StaggeredCopy {
    A,
    B,
}

/// Geometry and unit conventions of one staggered copy: an nx x ny grid with
/// one spinor amplitude per site. For copy A the upper (mass +M) component
/// lives on sites with even m+n and the lower (mass -M) component on odd
/// m+n; copy B swaps the roles.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeSpec {
    nx: usize,
    ny: usize,
    mass: f64,
    boundary: Boundary,
    copy: StaggeredCopy,
}

impl LatticeSpec {
    pub fn new(
        nx: usize,
        ny: usize,
        mass: f64,
        boundary: Boundary,
        copy: StaggeredCopy,
    ) -> Result<Self, LatticeError> {
        if nx < 3 || ny < 3 {
            return Err(LatticeError::TooSmall { nx, ny });
        }
        if boundary == Boundary::Periodic && (nx % 2 != 0 || ny % 2 != 0) {
            // An odd wrap joins sites of equal parity, which glues the two
            // staggered copies back together; rejected at construction.
            return Err(LatticeError::OddPeriodic { nx, ny });
        }
        if !(mass.is_finite() && mass > 0.0) {
            return Err(LatticeError::BadMass(mass));
        }
        Ok(Self {
            nx,
            ny,
            mass,
            boundary,
            copy,
        })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn copy(&self) -> StaggeredCopy {
        self.copy
    }

    pub fn lattice_constant(&self) -> f64 {
        LATTICE_CONSTANT
    }

    /// Single-particle dimension: one amplitude per site.
    pub fn dimension(&self) -> usize {
        self.nx * self.ny
    }

    /// Flat index of site (m, n), row-major in n.
    pub fn site_index(&self, m: usize, n: usize) -> usize {
        debug_assert!(m < self.nx && n < self.ny);
        n * self.nx + m
    }

    pub fn site_coords(&self, index: usize) -> (usize, usize) {
        debug_assert!(index < self.dimension());
        (index % self.nx, index / self.nx)
    }

    pub fn site_position(&self, index: usize) -> (f64, f64) {
        let (m, n) = self.site_coords(index);
        (m as f64 * LATTICE_CONSTANT, n as f64 * LATTICE_CONSTANT)
    }

    /// True when site (m, n) carries the upper spinor component (+M mass sign).
    pub fn is_upper_component(&self, m: usize, n: usize) -> bool {
        let even = (m + n) % 2 == 0;
        match self.copy {
            StaggeredCopy::A => even,
            StaggeredCopy::B => !even,
        }
    }

    /// True iff |k_x| + |k_y| <= pi/l, the diamond Brillouin zone of the
    /// staggered supercell.
    pub fn brillouin_zone_contains(&self, k: (f64, f64)) -> bool {
        k.0.abs() + k.1.abs() <= PI / LATTICE_CONSTANT
    }

    /// Free two-band dispersion at wavevector k inside the diamond zone:
    /// E(k) = +-sqrt(M^2 + (sin^2 k_x l + sin^2 k_y l)/l^2).
    pub fn free_dispersion(&self, k: (f64, f64)) -> Result<(f64, f64), LatticeError> {
        if !self.brillouin_zone_contains(k) {
            return Err(LatticeError::OutsideBrillouinZone(k.0, k.1));
        }
        Ok(dispersion_bands(self.mass, k))
    }
}

/// The two free bands at wavevector k for a given mass (mass 0 gives the
/// gapless Dirac points). No zone check; callers restrict k themselves.
pub fn dispersion_bands(mass: f64, k: (f64, f64)) -> (f64, f64) {
    let sx = (k.0 * LATTICE_CONSTANT).sin();
    let sy = (k.1 * LATTICE_CONSTANT).sin();
    let e = (mass * mass + (sx * sx + sy * sy) / (LATTICE_CONSTANT * LATTICE_CONSTANT)).sqrt();
    (e, -e)
}

/// Localized Gaussian well V(x) = V0 exp(-|x - center|^2 / sigma^2). Enters
/// the Hamiltonian as the diagonal term -lambda V(x), so positive V0 binds
/// particles from the upper band.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPotential {
    v0: f64,
    sigma: f64,
    center: (f64, f64),
}

impl GaussianPotential {
    pub fn new(v0: f64, sigma: f64, center: (f64, f64)) -> Result<Self, LatticeError> {
        if !(v0.is_finite() && v0 > 0.0) {
            return Err(LatticeError::BadAmplitude(v0));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(LatticeError::BadWidth(sigma));
        }
        if !(center.0.is_finite() && center.1.is_finite()) {
            return Err(LatticeError::BadCenter(center.0, center.1));
        }
        Ok(Self { v0, sigma, center })
    }

    /// Well centered on the middle of the given lattice.
    pub fn centered(v0: f64, sigma: f64, spec: &LatticeSpec) -> Result<Self, LatticeError> {
        let cx = (spec.nx() as f64 - 1.0) / 2.0 * LATTICE_CONSTANT;
        let cy = (spec.ny() as f64 - 1.0) / 2.0 * LATTICE_CONSTANT;
        Self::new(v0, sigma, (cx, cy))
    }

    pub fn v0(&self) -> f64 {
        self.v0
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn center(&self) -> (f64, f64) {
        self.center
    }

    pub fn value_at(&self, x: (f64, f64)) -> f64 {
        let dx = x.0 - self.center.0;
        let dy = x.1 - self.center.1;
        self.v0 * (-(dx * dx + dy * dy) / (self.sigma * self.sigma)).exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RampShape {
    Linear,
    SinSquared,
}

/// Time course of the well depth: ramp on over t_on, hold at lambda_max for
/// t_hold, ramp off to lambda_final over t_off. lambda(0) = 0 always.
#[derive(Clone, Debug, PartialEq)]
pub struct RampSchedule {
    lambda_max: f64,
    lambda_final: f64,
    t_on: f64,
    t_hold: f64,
    t_off: f64,
    shape: RampShape,
}

impl RampSchedule {
    pub fn new(
        lambda_max: f64,
        lambda_final: f64,
        t_on: f64,
        t_hold: f64,
        t_off: f64,
        shape: RampShape,
    ) -> Result<Self, LatticeError> {
        let finite = lambda_max.is_finite()
            && lambda_final.is_finite()
            && t_on.is_finite()
            && t_hold.is_finite()
            && t_off.is_finite();
        // Strictly positive ramps keep lambda continuous with lambda(0) = 0;
        // instant switching is out of scope.
        if !finite || t_on <= 0.0 || t_off <= 0.0 || t_hold < 0.0 {
            return Err(LatticeError::BadSchedule);
        }
        Ok(Self {
            lambda_max,
            lambda_final,
            t_on,
            t_hold,
            t_off,
            shape,
        })
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn lambda_final(&self) -> f64 {
        self.lambda_final
    }

    pub fn t_on(&self) -> f64 {
        self.t_on
    }

    pub fn t_hold(&self) -> f64 {
        self.t_hold
    }

    pub fn t_off(&self) -> f64 {
        self.t_off
    }

    pub fn shape(&self) -> RampShape {
        self.shape
    }

    pub fn total_time(&self) -> f64 {
        self.t_on + self.t_hold + self.t_off
    }

    /// Rescale all three phase durations by the same factor so the shape
    /// fractions stay fixed while the total time becomes t_tot.
    pub fn scaled_to(&self, t_tot: f64) -> Result<Self, LatticeError> {
        if !(t_tot.is_finite() && t_tot > 0.0) {
            return Err(LatticeError::BadSchedule);
        }
        let f = t_tot / self.total_time();
        Self::new(
            self.lambda_max,
            self.lambda_final,
            self.t_on * f,
            self.t_hold * f,
            self.t_off * f,
            self.shape,
        )
    }

    /// Depth lambda(t). Calling outside [0, T_tot] is a contract violation.
    pub fn lambda_at(&self, t: f64) -> f64 {
        let t_tot = self.total_time();
        assert!(
            (-1e-9..=t_tot + 1e-9).contains(&t),
            "schedule evaluated at t = {t} outside [0, {t_tot}]"
        );
        let t = t.clamp(0.0, t_tot);
        if t <= self.t_on {
            self.lambda_max * self.rise(t / self.t_on)
        } else if t <= self.t_on + self.t_hold {
            self.lambda_max
        } else {
            // Mirror of the rise: u runs 1 -> 0 over the switch-off.
            let u = (t_tot - t) / self.t_off;
            self.lambda_final + (self.lambda_max - self.lambda_final) * self.rise(u)
        }
    }

    fn rise(&self, s: f64) -> f64 {
        match self.shape {
            RampShape::Linear => s,
            RampShape::SinSquared => {
                let v = (0.5 * PI * s).sin();
                v * v
            }
        }
    }
}

/// Sparse Hermitian operator in compressed-row form. Hermiticity is enforced
/// exactly at construction: every entry must have a bit-identical conjugate
/// partner and every diagonal entry must be purely real.
#[derive(Clone, Debug)]
pub struct HermitianOperator {
    dim: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<Complex64>,
}

impl HermitianOperator {
    /// Build from (row, col, value) triples; duplicate positions are summed.
    pub fn from_entries(
        dim: usize,
        entries: impl IntoIterator<Item = (usize, usize, Complex64)>,
    ) -> Result<Self, LatticeError> {
        let mut dense: Vec<Vec<(usize, Complex64)>> = vec![Vec::new(); dim];
        for (row, col, value) in entries {
            if row >= dim || col >= dim {
                return Err(LatticeError::EntryOutOfRange { row, col, dim });
            }
            match dense[row].iter_mut().find(|(c, _)| *c == col) {
                Some((_, v)) => *v += value,
                None => dense[row].push((col, value)),
            }
        }
        for row in dense.iter_mut() {
            row.sort_unstable_by_key(|(c, _)| *c);
            row.retain(|(_, v)| *v != Complex64::ZERO);
        }

        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in &dense {
            for &(c, v) in row {
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        let op = Self {
            dim,
            row_ptr,
            col_idx,
            values,
        };
        op.validate_hermitian()?;
        Ok(op)
    }

    fn validate_hermitian(&self) -> Result<(), LatticeError> {
        for row in 0..self.dim {
            for e in self.row_ptr[row]..self.row_ptr[row + 1] {
                let col = self.col_idx[e];
                let value = self.values[e];
                if row == col {
                    if value.im != 0.0 {
                        return Err(LatticeError::ComplexDiagonal { row, value });
                    }
                    continue;
                }
                let partner = self.get(col, row);
                if partner != value.conj() {
                    return Err(LatticeError::NotHermitian {
                        row,
                        col,
                        value,
                        partner,
                    });
                }
            }
        }
        Ok(())
    }

    fn get(&self, row: usize, col: usize) -> Complex64 {
        let lo = self.row_ptr[row];
        let hi = self.row_ptr[row + 1];
        match self.col_idx[lo..hi].binary_search(&col) {
            Ok(pos) => self.values[lo + pos],
            Err(_) => Complex64::ZERO,
        }
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, Complex64)> + '_ {
        (0..self.dim).flat_map(move |row| {
            (self.row_ptr[row]..self.row_ptr[row + 1])
                .map(move |e| (row, self.col_idx[e], self.values[e]))
        })
    }

    /// Number of stored off-diagonal couplings in one row.
    pub fn off_diagonal_count(&self, row: usize) -> usize {
        (self.row_ptr[row]..self.row_ptr[row + 1])
            .filter(|&e| self.col_idx[e] != row)
            .count()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i).re).collect()
    }

    /// Max |H - H^dagger| over stored entries. Zero by construction; kept as
    /// an audit hook for tests.
    pub fn hermiticity_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for (row, col, value) in self.entries() {
            worst = worst.max((value - self.get(col, row).conj()).norm());
        }
        worst
    }

    /// Gershgorin upper bound on the spectral radius.
    pub fn spectral_radius_bound(&self) -> f64 {
        let mut bound = 0.0f64;
        for row in 0..self.dim {
            let mut radius = 0.0;
            for e in self.row_ptr[row]..self.row_ptr[row + 1] {
                radius += self.values[e].norm();
            }
            bound = bound.max(radius);
        }
        bound
    }

    /// y = H x.
    pub fn apply(&self, x: &[Complex64], y: &mut [Complex64]) {
        assert_eq!(x.len(), self.dim);
        assert_eq!(y.len(), self.dim);
        for row in 0..self.dim {
            let mut acc = Complex64::ZERO;
            for e in self.row_ptr[row]..self.row_ptr[row + 1] {
                acc += self.values[e] * x[self.col_idx[e]];
            }
            y[row] = acc;
        }
    }

    /// Y = H X for row-major blocks of shape (dim, k). The k columns sit
    /// contiguously per row, so the inner loop vectorizes across columns.
    pub fn apply_block(&self, x: &ndarray::Array2<Complex64>, y: &mut ndarray::Array2<Complex64>) {
        let k = x.ncols();
        assert_eq!(x.nrows(), self.dim);
        assert_eq!(y.nrows(), self.dim);
        assert_eq!(y.ncols(), k);
        let xs = x.as_slice().expect("input block must be standard layout");
        let ys = y.as_slice_mut().expect("output block must be standard layout");
        for row in 0..self.dim {
            let out = &mut ys[row * k..(row + 1) * k];
            out.fill(Complex64::ZERO);
            for e in self.row_ptr[row]..self.row_ptr[row + 1] {
                let v = self.values[e];
                let src = &xs[self.col_idx[e] * k..self.col_idx[e] * k + k];
                for (o, s) in out.iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        }
    }

    pub fn to_dense(&self) -> ndarray::Array2<Complex64> {
        let mut dense = ndarray::Array2::zeros((self.dim, self.dim));
        for (row, col, value) in self.entries() {
            dense[(row, col)] = value;
        }
        dense
    }

    /// H + c I, for spectral-shift checks.
    pub fn shifted(&self, c: f64) -> Self {
        let entries = self
            .entries()
            .chain((0..self.dim).map(|i| (i, i, Complex64::new(c, 0.0))));
        Self::from_entries(self.dim, entries).expect("shift preserves hermiticity")
    }
}

/// Direction convention for [`tunneling_phase`]: d = 0 is +y, d = 1 is +x,
/// d = 2 is -y, d = 3 is -x, i.e. counterclockwise starting from +y.
pub const DIRECTIONS: [(i64, i64); 4] = [(0, 1), (1, 0), (0, -1), (-1, 0)];

/// Unit phase of the hop leaving site (m, n) in direction d:
/// exp(i pi [(n + m)(d - 1) + d/2]). Evaluated exactly on the fourth roots
/// of unity, never through floating trigonometry.
///
/// With the [`DIRECTIONS`] convention this single formula generates every
/// signed amplitude of the staggered Hamiltonian for copy A: hops leaving
/// even-parity sites carry +i, +1, -i, -1 times 1/(2l) along +x, +y, -x, -y,
/// and hops leaving odd-parity sites carry the conjugate-transpose partners.
pub fn tunneling_phase(n: i64, m: i64, d: u8) -> Complex64 {
    assert!(d < 4, "direction index {d} outside 0..=3");
    // Exponent in quarter turns: 2 (n+m)(d-1) + d.
    let q = (2 * (n + m) * (d as i64 - 1) + d as i64).rem_euclid(4);
    match q {
        0 => Complex64::new(1.0, 0.0),
        1 => Complex64::new(0.0, 1.0),
        2 => Complex64::new(-1.0, 0.0),
        _ => Complex64::new(0.0, -1.0),
    }
}

/// Assemble the staggered Hamiltonian H(lambda) of one copy: diagonal
/// +-M - lambda V(site), nearest-neighbor hoppings of magnitude 1/(2l) with
/// the tunneling-phase sign pattern. Open boundaries drop out-of-range
/// neighbors; periodic boundaries wrap (even extents only).
pub fn build_hamiltonian(
    spec: &LatticeSpec,
    pot: &GaussianPotential,
    lambda: f64,
) -> Result<HermitianOperator, LatticeError> {
    if !lambda.is_finite() {
        return Err(LatticeError::BadLambda(lambda));
    }
    let nx = spec.nx() as i64;
    let ny = spec.ny() as i64;
    let hop = 1.0 / (2.0 * LATTICE_CONSTANT);
    let mut entries = Vec::with_capacity(5 * spec.dimension());

    for n in 0..ny {
        for m in 0..nx {
            let from = spec.site_index(m as usize, n as usize);
            let mass_sign = if spec.is_upper_component(m as usize, n as usize) {
                spec.mass()
            } else {
                -spec.mass()
            };
            let v = pot.value_at(spec.site_position(from));
            entries.push((from, from, Complex64::new(mass_sign - lambda * v, 0.0)));

            for (d, (dm, dn)) in DIRECTIONS.iter().enumerate() {
                let (mut tm, mut tn) = (m + dm, n + dn);
                match spec.boundary() {
                    Boundary::Open => {
                        if tm < 0 || tm >= nx || tn < 0 || tn >= ny {
                            continue;
                        }
                    }
                    Boundary::Periodic => {
                        tm = tm.rem_euclid(nx);
                        tn = tn.rem_euclid(ny);
                    }
                }
                let to = spec.site_index(tm as usize, tn as usize);
                // Copy B is copy A with the sublattice roles swapped, which
                // shifts the parity argument of the phase by one.
                let parity_shift = match spec.copy() {
                    StaggeredCopy::A => 0,
                    StaggeredCopy::B => 1,
                };
                let amp = tunneling_phase(n + parity_shift, m, d as u8) * hop;
                entries.push((to, from, amp));
            }
        }
    }
    HermitianOperator::from_entries(spec.dimension(), entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn spec_3x3(mass: f64) -> LatticeSpec {
        LatticeSpec::new(3, 3, mass, Boundary::Open, StaggeredCopy::A).unwrap()
    }

    fn narrow_well() -> GaussianPotential {
        GaussianPotential::new(1.0, 1.5, (1.0, 1.0)).unwrap()
    }

    #[test]
    fn rejects_degenerate_geometry() {
        assert!(matches!(
            LatticeSpec::new(2, 5, 1.0, Boundary::Open, StaggeredCopy::A),
            Err(LatticeError::TooSmall { .. })
        ));
        assert!(matches!(
            LatticeSpec::new(5, 6, 1.0, Boundary::Periodic, StaggeredCopy::A),
            Err(LatticeError::OddPeriodic { .. })
        ));
        assert!(LatticeSpec::new(6, 6, 1.0, Boundary::Periodic, StaggeredCopy::B).is_ok());
        assert!(matches!(
            LatticeSpec::new(5, 5, 0.0, Boundary::Open, StaggeredCopy::A),
            Err(LatticeError::BadMass(_))
        ));
    }

    #[test]
    fn site_classes_differ_by_one_on_odd_lattices() {
        let spec = spec_3x3(1.0);
        let upper = (0..spec.dimension())
            .filter(|&i| {
                let (m, n) = spec.site_coords(i);
                spec.is_upper_component(m, n)
            })
            .count();
        let lower = spec.dimension() - upper;
        assert_eq!(upper.abs_diff(lower), 1);
    }

    #[test]
    fn gaussian_profile_values() {
        let pot = GaussianPotential::new(2.5, 3.0, (0.0, 0.0)).unwrap();
        assert_eq!(pot.value_at((0.0, 0.0)), 2.5);
        assert_abs_diff_eq!(pot.value_at((3.0, 0.0)), 2.5 / std::f64::consts::E, epsilon = 1e-14);
        assert!(pot.value_at((15.0, 0.0)) < 2e-11 * 2.5);
        assert!(pot.value_at((100.0, 100.0)) >= 0.0);
    }

    #[test]
    fn gaussian_rejects_bad_parameters() {
        assert!(matches!(
            GaussianPotential::new(0.0, 1.0, (0.0, 0.0)),
            Err(LatticeError::BadAmplitude(_))
        ));
        assert!(matches!(
            GaussianPotential::new(1.0, -2.0, (0.0, 0.0)),
            Err(LatticeError::BadWidth(_))
        ));
        assert!(matches!(
            GaussianPotential::new(1.0, 1.0, (f64::NAN, 0.0)),
            Err(LatticeError::BadCenter(..))
        ));
    }

    #[test]
    fn schedule_hits_the_pinned_waypoints() {
        for shape in [RampShape::Linear, RampShape::SinSquared] {
            let sched = RampSchedule::new(3.0, 0.5, 10.0, 7.0, 4.0, shape).unwrap();
            assert_eq!(sched.lambda_at(0.0), 0.0);
            assert_abs_diff_eq!(sched.lambda_at(10.0), 3.0, epsilon = 1e-12);
            assert_abs_diff_eq!(sched.lambda_at(13.5), 3.0, epsilon = 1e-12);
            assert_abs_diff_eq!(sched.lambda_at(17.0), 3.0, epsilon = 1e-12);
            assert_abs_diff_eq!(sched.lambda_at(21.0), 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn ramp_midpoints_match_both_shapes() {
        // sin^2(pi/4) = 1/2 makes the two shapes agree at the half-ramp.
        let lin = RampSchedule::new(2.0, 0.0, 8.0, 0.0, 8.0, RampShape::Linear).unwrap();
        let sin = RampSchedule::new(2.0, 0.0, 8.0, 0.0, 8.0, RampShape::SinSquared).unwrap();
        assert_abs_diff_eq!(lin.lambda_at(4.0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sin.lambda_at(4.0), 1.0, epsilon = 1e-12);
    }

    #[test]
    #[should_panic(expected = "outside")]
    fn schedule_outside_domain_panics() {
        let sched = RampSchedule::new(1.0, 0.0, 1.0, 0.0, 1.0, RampShape::Linear).unwrap();
        sched.lambda_at(2.5);
    }

    #[test]
    fn dispersion_trivial_points() {
        let spec = spec_3x3(0.9);
        let (ep, em) = spec.free_dispersion((0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(ep, 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(em, -0.9, epsilon = 1e-15);
        let (ep, _) = spec.free_dispersion((PI, 0.0)).unwrap();
        assert_abs_diff_eq!(ep, 0.9, epsilon = 1e-12);
        let (ep, em) = spec.free_dispersion((PI / 2.0, PI / 2.0)).unwrap();
        assert_abs_diff_eq!(ep, (0.81f64 + 2.0).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(em, -(0.81f64 + 2.0).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn brillouin_zone_boundary_cases() {
        let spec = spec_3x3(1.0);
        assert!(spec.brillouin_zone_contains((0.0, 0.0)));
        assert!(spec.brillouin_zone_contains((PI / 2.0, PI / 2.0)));
        assert!(!spec.brillouin_zone_contains((PI, PI)));
        assert!(matches!(
            spec.free_dispersion((PI, PI)),
            Err(LatticeError::OutsideBrillouinZone(..))
        ));
        // Gapless points of the massless model sit at the zone center and corner.
        assert_eq!(dispersion_bands(0.0, (0.0, 0.0)), (0.0, 0.0));
        assert_eq!(dispersion_bands(0.0, (PI, 0.0)).0.abs() < 1e-15, true);
    }

    #[test]
    fn tunneling_phase_fourth_roots() {
        assert_eq!(tunneling_phase(0, 0, 0), Complex64::new(1.0, 0.0));
        assert_eq!(tunneling_phase(0, 0, 1), Complex64::new(0.0, 1.0));
        assert_eq!(tunneling_phase(0, 0, 2), Complex64::new(-1.0, 0.0));
        assert_eq!(tunneling_phase(0, 0, 3), Complex64::new(0.0, -1.0));
        // Odd-parity sites pick up the extra (-1)^(d-1).
        assert_eq!(tunneling_phase(1, 0, 0), Complex64::new(-1.0, 0.0));
        assert_eq!(tunneling_phase(1, 0, 1), Complex64::new(0.0, 1.0));
        assert_eq!(tunneling_phase(0, 1, 2), Complex64::new(1.0, 0.0));
        assert_eq!(tunneling_phase(2, 1, 3), Complex64::new(0.0, -1.0));
    }

    #[test]
    fn hamiltonian_matches_hand_enumerated_3x3() {
        // Every edge of the open 3x3 lattice at lambda = 0, worked out by
        // hand from the staggered hopping rules: H[to, from] = phase/2 with
        // +i, +1 leaving even sites along +x, +y and the conjugate partners
        // closing the Hermitian pairs. Masses alternate +M on even parity.
        let mass = 0.7;
        let spec = spec_3x3(mass);
        let h = build_hamiltonian(&spec, &narrow_well(), 0.0).unwrap();

        let o = Complex64::ZERO;
        let r = Complex64::new(0.5, 0.0);
        let i = Complex64::new(0.0, 0.5);
        let pm = Complex64::new(mass, 0.0);
        let mm = Complex64::new(-mass, 0.0);
        #[rustfmt::skip]
        let expected: [[Complex64; 9]; 9] = [
            [ pm, -i,  o,  r,  o,  o,  o,  o,  o],
            [  i, mm, -i,  o, -r,  o,  o,  o,  o],
            [  o,  i, pm,  o,  o,  r,  o,  o,  o],
            [  r,  o,  o, mm,  -i, o, -r,  o,  o],
            [  o, -r,  o,  i, pm, -i,  o,  r,  o],
            [  o,  o,  r,  o,  i, mm,  o,  o, -r],
            [  o,  o,  o, -r,  o,  o, pm, -i,  o],
            [  o,  o,  o,  o,  r,  o,  i, mm, -i],
            [  o,  o,  o,  o,  o, -r,  o,  i, pm],
        ];
        let dense = h.to_dense();
        for row in 0..9 {
            for col in 0..9 {
                assert_eq!(
                    dense[(row, col)],
                    expected[row][col],
                    "mismatch at ({row}, {col})"
                );
            }
        }
    }

    #[test]
    fn copy_b_swaps_mass_signs() {
        let spec = LatticeSpec::new(3, 3, 1.0, Boundary::Open, StaggeredCopy::B).unwrap();
        let h = build_hamiltonian(&spec, &narrow_well(), 0.0).unwrap();
        let diag = h.diagonal();
        assert_eq!(diag[0], -1.0);
        assert_eq!(diag[1], 1.0);
        assert_eq!(diag[4], -1.0);
        assert_eq!(h.hermiticity_defect(), 0.0);
    }

    #[test]
    fn center_diagonal_shifts_by_full_depth() {
        // The well center sits on a site here, so at lambda = 1 that
        // diagonal reads M - V0 exactly.
        let spec = spec_3x3(1.0);
        let pot = narrow_well();
        let h = build_hamiltonian(&spec, &pot, 1.0).unwrap();
        let center = spec.site_index(1, 1);
        assert_abs_diff_eq!(h.diagonal()[center], 1.0 - 1.0, epsilon = 1e-15);
    }

    #[test]
    fn every_edge_follows_the_phase_formula() {
        for copy in [StaggeredCopy::A, StaggeredCopy::B] {
            let spec = LatticeSpec::new(4, 6, 1.3, Boundary::Periodic, copy).unwrap();
            let pot = GaussianPotential::centered(1.0, 2.0, &spec).unwrap();
            let h = build_hamiltonian(&spec, &pot, 0.8).unwrap();
            let dense = h.to_dense();
            let shift = if copy == StaggeredCopy::A { 0 } else { 1 };
            for n in 0..6i64 {
                for m in 0..4i64 {
                    let from = spec.site_index(m as usize, n as usize);
                    for (d, (dm, dn)) in DIRECTIONS.iter().enumerate() {
                        let tm = (m + dm).rem_euclid(4) as usize;
                        let tn = (n + dn).rem_euclid(6) as usize;
                        let to = spec.site_index(tm, tn);
                        let expect = tunneling_phase(n + shift, m, d as u8) * 0.5;
                        assert_eq!(dense[(to, from)], expect);
                    }
                }
            }
        }
    }

    #[test]
    fn operator_constructor_rejects_violations() {
        let bad_diag = HermitianOperator::from_entries(2, [(0, 0, Complex64::new(1.0, 0.5))]);
        assert!(matches!(bad_diag, Err(LatticeError::ComplexDiagonal { .. })));

        let unpaired = HermitianOperator::from_entries(2, [(0, 1, Complex64::new(0.0, 1.0))]);
        assert!(matches!(unpaired, Err(LatticeError::NotHermitian { .. })));

        let out_of_range = HermitianOperator::from_entries(2, [(0, 5, Complex64::ZERO)]);
        assert!(matches!(
            out_of_range,
            Err(LatticeError::EntryOutOfRange { .. })
        ));

        let ok = HermitianOperator::from_entries(
            2,
            [
                (0, 1, Complex64::new(0.0, 1.0)),
                (1, 0, Complex64::new(0.0, -1.0)),
            ],
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn apply_block_agrees_with_dense_product() {
        let spec = spec_3x3(1.0);
        let h = build_hamiltonian(&spec, &narrow_well(), 1.7).unwrap();
        let x = ndarray::Array2::from_shape_fn((9, 4), |(i, j)| {
            Complex64::new((i + 2 * j) as f64, (i as f64) - 0.3 * j as f64)
        });
        let mut y = ndarray::Array2::zeros((9, 4));
        h.apply_block(&x, &mut y);
        let dense = h.to_dense().dot(&x);
        for (a, b) in y.iter().zip(dense.iter()) {
            assert_abs_diff_eq!((a - b).norm(), 0.0, epsilon = 1e-12);
        }
        let mut y1 = vec![Complex64::ZERO; 9];
        let col: Vec<Complex64> = x.column(0).to_vec();
        h.apply(&col, &mut y1);
        for (a, b) in y1.iter().zip(dense.column(0).iter()) {
            assert_abs_diff_eq!((a - b).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn gershgorin_bounds_free_bandwidth() {
        let spec = spec_3x3(1.0);
        let h = build_hamiltonian(&spec, &narrow_well(), 0.0).unwrap();
        // Interior row: |M| + 4 * 1/2 = 3.
        assert_abs_diff_eq!(h.spectral_radius_bound(), 3.0, epsilon = 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn built_hamiltonians_are_exactly_hermitian(
            nx in 3usize..7,
            ny in 3usize..7,
            periodic in any::<bool>(),
            copy_b in any::<bool>(),
            lambda in -3.0f64..3.0,
            sigma in 0.5f64..4.0,
        ) {
            let (nx, ny, boundary) = if periodic {
                (nx + nx % 2, ny + ny % 2, Boundary::Periodic)
            } else {
                (nx, ny, Boundary::Open)
            };
            let copy = if copy_b { StaggeredCopy::B } else { StaggeredCopy::A };
            let spec = LatticeSpec::new(nx, ny, 1.0, boundary, copy).unwrap();
            let pot = GaussianPotential::centered(1.0, sigma, &spec).unwrap();
            let h = build_hamiltonian(&spec, &pot, lambda).unwrap();
            prop_assert_eq!(h.hermiticity_defect(), 0.0);
        }

        #[test]
        fn hopping_counts_match_coordination(
            nx in 3usize..7,
            ny in 3usize..7,
            periodic in any::<bool>(),
        ) {
            let (nx, ny, boundary) = if periodic {
                (nx + nx % 2, ny + ny % 2, Boundary::Periodic)
            } else {
                (nx, ny, Boundary::Open)
            };
            let spec = LatticeSpec::new(nx, ny, 1.0, boundary, StaggeredCopy::A).unwrap();
            let pot = GaussianPotential::centered(1.0, 2.0, &spec).unwrap();
            let h = build_hamiltonian(&spec, &pot, 0.5).unwrap();
            for idx in 0..spec.dimension() {
                let (m, n) = spec.site_coords(idx);
                let expected = match boundary {
                    Boundary::Periodic => 4,
                    Boundary::Open => {
                        let edge_x = usize::from(m == 0) + usize::from(m == nx - 1);
                        let edge_y = usize::from(n == 0) + usize::from(n == ny - 1);
                        4 - edge_x - edge_y
                    }
                };
                prop_assert_eq!(h.off_diagonal_count(idx), expected);
            }
        }

        #[test]
        fn deeper_wells_never_raise_the_diagonal(
            lambda_lo in 0.0f64..2.0,
            extra in 0.001f64..2.0,
        ) {
            let spec = spec_3x3(1.0);
            let pot = narrow_well();
            let shallow = build_hamiltonian(&spec, &pot, lambda_lo).unwrap();
            let deep = build_hamiltonian(&spec, &pot, lambda_lo + extra).unwrap();
            for (a, b) in shallow.diagonal().iter().zip(deep.diagonal()) {
                prop_assert!(b <= *a);
            }
        }

        #[test]
        fn schedule_is_continuous_at_phase_boundaries(
            lambda_max in 0.0f64..4.0,
            lambda_final in 0.0f64..4.0,
            t_on in 0.1f64..20.0,
            t_hold in 0.0f64..20.0,
            t_off in 0.1f64..20.0,
            sinsq in any::<bool>(),
        ) {
            let shape = if sinsq { RampShape::SinSquared } else { RampShape::Linear };
            let sched = RampSchedule::new(lambda_max, lambda_final, t_on, t_hold, t_off, shape).unwrap();
            let eps = 1e-7;
            for t in [t_on, t_on + t_hold, sched.total_time() - t_off] {
                let before = sched.lambda_at((t - eps).max(0.0));
                let after = sched.lambda_at((t + eps).min(sched.total_time()));
                prop_assert!((before - after).abs() < 1e-5 * (1.0 + lambda_max.max(lambda_final)));
            }
            prop_assert_eq!(sched.lambda_at(0.0), 0.0);
        }

        #[test]
        fn phase_depends_on_parity_only(n in -20i64..20, m in -20i64..20, d in 0u8..4) {
            let p = tunneling_phase(n, m, d);
            prop_assert_eq!(p.norm(), 1.0);
            prop_assert_eq!(p, tunneling_phase(n + 2, m, d));
            prop_assert_eq!(p, tunneling_phase(n, m + 2, d));
            prop_assert_eq!(p, tunneling_phase(m, n, d));
        }
    }
}
