//! Python bindings for the core simulator. The surface mirrors the Rust
//! names: build a lattice and a well, diagonalize at a given depth, bisect
//! the critical depth, and run a full pair-creation evolution. Spectra and
//! occupations come back as plain lists.

use pyo3::exceptions::{PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use diracsea::evolution::{default_dt, EvolutionConfig, Evolver, Method, PropagatorBody};
use diracsea::lattice::{
    build_hamiltonian, dispersion_bands, Boundary, GaussianPotential, LatticeSpec, RampSchedule,
    RampShape, StaggeredCopy,
};
use diracsea::observables::{free_projectors, particle_number, production_spectrum};
use diracsea::spectral::{count_dived_states, diagonalize, find_lambda_critical, ipr, EigenSystem};

fn bad_input(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn failed(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Finite staggered lattice carrying one spinor amplitude per site.
#[pyclass(frozen)]
struct Lattice {
    inner: LatticeSpec,
}

#[pymethods]
impl Lattice {
    #[new]
    #[pyo3(signature = (nx, ny, mass = 1.0, boundary = "open", copy = "a"))]
    fn new(nx: usize, ny: usize, mass: f64, boundary: &str, copy: &str) -> PyResult<Self> {
        let boundary = match boundary {
            "open" => Boundary::Open,
            "periodic" => Boundary::Periodic,
            other => return Err(bad_input(format!("unknown boundary {other:?}"))),
        };
        let copy = match copy {
            "a" | "A" => StaggeredCopy::A,
            "b" | "B" => StaggeredCopy::B,
            other => return Err(bad_input(format!("unknown staggered copy {other:?}"))),
        };
        let inner = LatticeSpec::new(nx, ny, mass, boundary, copy).map_err(bad_input)?;
        Ok(Self { inner })
    }

    #[getter]
    fn nx(&self) -> usize {
        self.inner.nx()
    }

    #[getter]
    fn ny(&self) -> usize {
        self.inner.ny()
    }

    #[getter]
    fn mass(&self) -> f64 {
        self.inner.mass()
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn site_position(&self, index: usize) -> PyResult<(f64, f64)> {
        if index >= self.inner.dimension() {
            return Err(PyIndexError::new_err(format!(
                "site {index} outside 0..{}",
                self.inner.dimension()
            )));
        }
        Ok(self.inner.site_position(index))
    }

    fn __repr__(&self) -> String {
        format!(
            "Lattice(nx={}, ny={}, mass={})",
            self.inner.nx(),
            self.inner.ny(),
            self.inner.mass()
        )
    }
}

/// Localized Gaussian well; enters the Hamiltonian as -depth * V(x).
#[pyclass(frozen)]
struct Well {
    inner: GaussianPotential,
}

#[pymethods]
impl Well {
    #[new]
    fn new(v0: f64, sigma: f64, center: (f64, f64)) -> PyResult<Self> {
        let inner = GaussianPotential::new(v0, sigma, center).map_err(bad_input)?;
        Ok(Self { inner })
    }

    /// Well centered on the given lattice.
    #[staticmethod]
    fn centered(v0: f64, sigma: f64, lattice: &Lattice) -> PyResult<Self> {
        let inner = GaussianPotential::centered(v0, sigma, &lattice.inner).map_err(bad_input)?;
        Ok(Self { inner })
    }

    #[getter]
    fn v0(&self) -> f64 {
        self.inner.v0()
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma()
    }

    #[getter]
    fn center(&self) -> (f64, f64) {
        self.inner.center()
    }

    fn value_at(&self, x: (f64, f64)) -> f64 {
        self.inner.value_at(x)
    }

    fn __repr__(&self) -> String {
        let (cx, cy) = self.inner.center();
        format!(
            "Well(v0={}, sigma={}, center=({cx}, {cy}))",
            self.inner.v0(),
            self.inner.sigma()
        )
    }
}

/// Three-phase depth schedule: switch on over t_on, hold for t_hold, switch
/// off over t_off. Shapes: "sinsq" (smooth) or "linear".
#[pyclass(frozen)]
struct Ramp {
    inner: RampSchedule,
}

fn parse_shape(shape: &str) -> PyResult<RampShape> {
    match shape {
        "sinsq" => Ok(RampShape::SinSquared),
        "linear" => Ok(RampShape::Linear),
        other => Err(bad_input(format!("unknown ramp shape {other:?}"))),
    }
}

#[pymethods]
impl Ramp {
    #[new]
    #[pyo3(signature = (lambda_max, t_on, t_hold, t_off, lambda_final = 0.0, shape = "sinsq"))]
    fn new(
        lambda_max: f64,
        t_on: f64,
        t_hold: f64,
        t_off: f64,
        lambda_final: f64,
        shape: &str,
    ) -> PyResult<Self> {
        let inner = RampSchedule::new(lambda_max, lambda_final, t_on, t_hold, t_off, parse_shape(shape)?)
            .map_err(bad_input)?;
        Ok(Self { inner })
    }

    /// Same profile rescaled to a new total duration.
    fn scaled_to(&self, t_tot: f64) -> PyResult<Self> {
        let inner = self.inner.scaled_to(t_tot).map_err(bad_input)?;
        Ok(Self { inner })
    }

    fn lambda_at(&self, t: f64) -> f64 {
        self.inner.lambda_at(t)
    }

    #[getter]
    fn lambda_max(&self) -> f64 {
        self.inner.lambda_max()
    }

    #[getter]
    fn lambda_final(&self) -> f64 {
        self.inner.lambda_final()
    }

    #[getter]
    fn total_time(&self) -> f64 {
        self.inner.total_time()
    }

    fn __repr__(&self) -> String {
        format!(
            "Ramp(lambda_max={}, t_on={}, t_hold={}, t_off={}, lambda_final={}, shape={:?})",
            self.inner.lambda_max(),
            self.inner.t_on(),
            self.inner.t_hold(),
            self.inner.t_off(),
            self.inner.lambda_final(),
            self.inner.shape()
        )
    }
}

/// Eigenvalues and eigenvectors of the Hamiltonian at one depth.
#[pyclass(frozen)]
struct Spectrum {
    inner: EigenSystem,
}

#[pymethods]
impl Spectrum {
    /// Ascending eigenvalues.
    fn energies(&self) -> Vec<f64> {
        self.inner.energies().to_vec()
    }

    /// Inverse participation ratio of eigenstate i: near 1 when localized,
    /// near 1/dimension when extended.
    fn ipr(&self, i: usize) -> PyResult<f64> {
        if i >= self.inner.dimension() {
            return Err(PyIndexError::new_err(format!(
                "state {i} outside 0..{}",
                self.inner.dimension()
            )));
        }
        ipr(self.inner.state(i)).map_err(failed)
    }

    #[getter]
    fn depth(&self) -> f64 {
        self.inner.source_lambda()
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn __len__(&self) -> usize {
        self.inner.dimension()
    }

    fn __repr__(&self) -> String {
        format!(
            "Spectrum(dimension={}, depth={})",
            self.inner.dimension(),
            self.inner.source_lambda()
        )
    }
}

/// Outcome of one pair-creation run: the final pair count, the unitarity
/// defect, and the energy-resolved occupation spectra.
#[pyclass(frozen)]
struct PairRun {
    #[pyo3(get)]
    n_final: f64,
    #[pyo3(get)]
    unitarity_defect: f64,
    #[pyo3(get)]
    particle_energies: Vec<f64>,
    #[pyo3(get)]
    particle_occupations: Vec<f64>,
    #[pyo3(get)]
    antiparticle_energies: Vec<f64>,
    #[pyo3(get)]
    antiparticle_occupations: Vec<f64>,
}

#[pymethods]
impl PairRun {
    fn __repr__(&self) -> String {
        format!(
            "PairRun(n_final={:.6e}, unitarity_defect={:.3e})",
            self.n_final, self.unitarity_defect
        )
    }
}

/// Diagonalize the Hamiltonian of the well at the given depth.
#[pyfunction]
fn spectrum(lattice: &Lattice, well: &Well, depth: f64) -> PyResult<Spectrum> {
    let h = build_hamiltonian(&lattice.inner, &well.inner, depth).map_err(bad_input)?;
    let inner = diagonalize(&h, depth).map_err(failed)?;
    Ok(Spectrum { inner })
}

/// Free two-band dispersion at momentum (kx, ky): returns (upper, lower).
#[pyfunction]
fn dispersion(mass: f64, kx: f64, ky: f64) -> (f64, f64) {
    dispersion_bands(mass, (kx, ky))
}

/// Bisect the depth where the first bound state reaches the sea edge -M.
#[pyfunction]
#[pyo3(signature = (lattice, well, lo, hi, tol = 1e-6))]
fn critical_depth(lattice: &Lattice, well: &Well, lo: f64, hi: f64, tol: f64) -> PyResult<f64> {
    find_lambda_critical(&lattice.inner, &well.inner, (lo, hi), tol).map_err(failed)
}

/// Number of former bound states continued below the sea edge at this depth.
#[pyfunction]
fn dived_count(lattice: &Lattice, well: &Well, depth: f64) -> PyResult<usize> {
    count_dived_states(&lattice.inner, &well.inner, depth).map_err(failed)
}

/// Evolve both free-band blocks through the ramp and report the created
/// pairs. dt defaults to the stability-bounded step for the deepest point
/// of the schedule.
#[pyfunction]
#[pyo3(signature = (lattice, well, ramp, dt = None))]
fn evolve_pairs(lattice: &Lattice, well: &Well, ramp: &Ramp, dt: Option<f64>) -> PyResult<PairRun> {
    let spec = &lattice.inner;
    let pot = &well.inner;
    let es0 = diagonalize(&build_hamiltonian(spec, pot, 0.0).map_err(bad_input)?, 0.0)
        .map_err(failed)?;
    let proj = free_projectors(&es0, spec.mass()).map_err(failed)?;
    let dt = match dt {
        Some(v) => v,
        None => {
            let peak = ramp.inner.lambda_max().abs().max(ramp.inner.lambda_final().abs());
            let h_peak = build_hamiltonian(spec, pot, peak).map_err(bad_input)?;
            default_dt(spec.mass(), h_peak.spectral_radius_bound())
        }
    };
    let cfg = EvolutionConfig::new(dt, Method::CrankNicolson);
    let initial = PropagatorBody::ColumnBlocks {
        plus: Some(proj.plus_basis().clone()),
        minus: proj.minus_basis().clone(),
    };
    let mut ev = Evolver::new(spec, pot, &ramp.inner, &cfg, initial).map_err(bad_input)?;
    while !ev.is_done() {
        ev.step().map_err(failed)?;
    }
    let unitarity_defect = ev.check_unitarity().map_err(failed)?;
    let prop = ev.propagator();
    let n_final = particle_number(&prop, &proj).map_err(failed)?;
    let sp = production_spectrum(&prop, &proj).map_err(failed)?;
    Ok(PairRun {
        n_final,
        unitarity_defect,
        particle_energies: sp.particle_energies().to_vec(),
        particle_occupations: sp.particle_occupations().to_vec(),
        antiparticle_energies: sp.antiparticle_energies().to_vec(),
        antiparticle_occupations: sp.antiparticle_occupations().to_vec(),
    })
}

#[pymodule]
fn diracsea_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Lattice>()?;
    m.add_class::<Well>()?;
    m.add_class::<Ramp>()?;
    m.add_class::<Spectrum>()?;
    m.add_class::<PairRun>()?;
    m.add_function(wrap_pyfunction!(spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(dispersion, m)?)?;
    m.add_function(wrap_pyfunction!(critical_depth, m)?)?;
    m.add_function(wrap_pyfunction!(dived_count, m)?)?;
    m.add_function(wrap_pyfunction!(evolve_pairs, m)?)?;
    Ok(())
}
