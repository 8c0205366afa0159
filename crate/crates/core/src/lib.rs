//! Simulator of spontaneous electron-positron pair creation for a 2+1D
//! Dirac field discretized on a finite square lattice.
//!
//! The single-particle model is a staggered tight-binding Hamiltonian: one
//! spinor amplitude per site, mass signs alternating between the two site
//! classes, complex hoppings of magnitude 1/(2l), and a localized Gaussian
//! well of tunable depth lambda. Deep enough wells (lambda > lambda_cr) pull
//! a bound state through the gap and below the negative continuum edge -M,
//! where it decays into a hole: evolving the half-filled vacuum through such
//! a ramp creates real particle-antiparticle pairs.
//!
//! Module layout:
//! - [`lattice`]: geometry, units, potentials, ramp schedules, Hamiltonian assembly
//! - [`spectral`]: dense diagonalization, state classification, spectral flow, lambda_cr
//! - [`evolution`]: unitary propagation (Crank-Nicolson / eigendecomposition stepping)
//! - [`observables`]: spectral projectors, pair number N(t), production spectra, scaling fits
//! - [`config`] and [`runner`]: config files, CSV artifacts, sweeps, checkpoints, CLI commands

pub mod config;
pub mod evolution;
pub mod lattice;
pub mod observables;
pub mod runner;
pub mod spectral;
