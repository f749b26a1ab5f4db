//! Approximation of Gaussian random fields with a Karhunen-Loeve expansion
//! whose covariance is the inverse of a regularized biharmonic operator
//! (a regularized thin-plate-spline kernel), plus an SPDE/FEM baseline,
//! a self-contained Hamiltonian Monte Carlo sampler, and a benchmarking
//! pipeline for simulated scenarios and station data.
//!
//! The main building blocks are:
//!
//! * [`geometry`] - point sets, distances, domains and prediction grids
//! * [`tps`] - thin-plate-spline basis, penalty matrix and its eigensystem
//! * [`kle`] - the truncated expansion and the alpha-dependent spectrum
//! * [`spectral`] - radial spectral densities and Hankel transforms
//! * [`kernels`] - ground-truth stationary kernels and field simulation
//! * [`fem`] - triangulation, FEM matrices and the SPDE precision matrix
//! * [`inference`] - log posteriors, priors and the HMC sampler
//! * [`evaluation`] - fit metrics, covariance comparison and LOO
//! * [`io`] - configuration, station ingestion and the run orchestrator
//!
//! See the crate examples for end-to-end usage of each capability.

pub mod error;
pub mod evaluation;
pub mod fem;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod kernels;
pub mod kle;
pub mod spectral;
pub mod tps;

pub use error::{Error, Result};
