//! Two-dimensional Rayleigh-Benard convection between Navier-slip,
//! fixed-temperature walls.
//!
//! The crate bundles
//! * a pseudo-spectral (Fourier x Chebyshev) solver for the Boussinesq
//!   equations in vorticity-streamfunction form,
//! * heat-transport diagnostics: the Nusselt number through its flux,
//!   temperature-gradient and wall-localized routes, together with the
//!   energy/enstrophy balances and a family of exact inequality checks
//!   (pressure trace estimate, interpolation bound, Hessian-vorticity
//!   comparison),
//! * an evaluator for the rigorous Nusselt upper bounds as functions of
//!   (Ra, Pr, L_s), including the optimal boundary-layer thickness, and
//! * a parameter-sweep harness with resumable CSV output and log-log
//!   scaling fits.
//!
//! Conventions: the domain is `[0, Gamma] x [0, 1]`, periodic in `x1`,
//! wall-bounded in `x2`. Lengths are in units of the gap height, time in
//! units of the thermal diffusion time, temperature in units of the
//! imposed temperature gap. `L_s = inf` encodes free-slip walls and
//! `Pr = inf` the stationary-vorticity limit.

pub mod bounds;
pub mod cli;
pub mod diagnostics;
pub mod domain;
pub mod error;
pub mod operators;
pub mod solver;
pub mod sweep;

pub use domain::{Domain, ScalarField, VectorField, Wall};
pub use error::{Error, Result};
