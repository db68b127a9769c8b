//! Laboratory for random perturbations of non-uniformly expanding maps.
//!
//! The crate iterates random orbits `f_omega^n(x)` of concrete map families
//! under i.i.d. noise, detects hyperbolic times, builds induced partitions on
//! a reference ball, simulates random Young towers and their coupling
//! machinery, and fits stretched-exponential laws `C exp(-gamma n^upsilon)` to
//! the decay of tails, return times and quenched correlations.

pub mod config;
pub mod coupling;
pub mod error;
pub mod gmy;
pub mod hyperbolic;
pub mod mapcore;
pub mod noise;
pub mod orbit;
pub mod runner;
pub mod tower;
pub mod stats;

pub use error::{Error, Result};
