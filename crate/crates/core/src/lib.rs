//! Periodic risk-averse control: noise models, policies, and solvers.
//!
//! This crate provides the building blocks for designing periodic operating
//! policies for storage systems (hydropower reservoirs, virtual power plants)
//! driven by seasonal stochastic processes:
//!
//! * [`calendar`] — nested season calendars mapping time to seasonal phases;
//! * [`pamar`] — periodic ARMA noise models with reproducible ensembles;
//! * [`risk`] — expectation and CVaR risk aggregators with exact tail weights;
//! * [`basis`] — periodic Fourier feature bases and affine decision rules;
//! * [`model`] — linear storage dynamics, stage losses, and problem builders;
//! * [`solver`] — sample-average policy optimization (offline periodic,
//!   transient, and an exhaustive scenario-tree baseline) plus closed-loop
//!   evaluation;
//! * [`config`] — TOML run configurations;
//! * [`io`] — solution files and CSV exports.

pub mod basis;
pub mod calendar;
pub mod config;
pub mod error;
pub mod io;
pub mod model;
pub mod pamar;
pub mod risk;
pub mod solver;

pub use calendar::SeasonCalendar;
pub use error::{Error, Result};

// Downstream binaries build vectors/matrices for this crate's API; re-export
// the linear-algebra crate so they stay on the same version.
pub use nalgebra;
