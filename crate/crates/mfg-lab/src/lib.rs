//! Numerical laboratory for mean field games on the torus: finite-player
//! Nash systems, the limiting MFG system and its master equation, particle
//! approximations, common noise, and the potential (variational) formulation.

pub mod config;
pub mod error;
pub mod grid;
pub mod harness;
pub mod kernel;
pub mod master;
pub mod mfg;
pub mod model;
pub mod nash;
pub mod nash_sym;
pub mod particle;
pub mod snapshot;
pub mod tree;
pub mod potential;
pub mod spectral;
pub mod wasserstein;

pub use error::{MfgError, Result};
