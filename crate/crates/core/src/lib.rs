//! Spectral-Galerkin simulation of fractional phase-field systems of Caginalp
//! type, with Moreau-Yosida regularized potentials and numerical checks of the
//! system's a-priori structure.
pub mod analysis;
pub mod cli;
pub mod config;
pub mod error;
pub mod expr;
pub mod galerkin;
pub mod output;
pub mod potentials;
pub mod selftest;
pub mod spectral;
pub mod timestepper;

pub use error::{Error, Result};
