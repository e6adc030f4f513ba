//! Supersampled case-cohort survival analysis.
//!
//! Two-phase epidemiological studies measure expensive covariates only on a
//! case-cohort sample.  This crate fits weighted Cox models on such samples,
//! computes per-unit influence functions, and uses them to select an
//! additional "supersample" of informative units by balanced
//! probability-proportional-to-size sampling, to calibrate design weights by
//! generalized raking, and to multiply-impute the missing expensive
//! covariates (chained equations or rejection sampling compatible with the
//! survival outcome).  A Monte Carlo harness reproduces the operating
//! characteristics of the competing designs.

// Index loops mirror the matrix algebra they implement; iterator chains
// obscure the row/column bookkeeping in this kind of code.
#![allow(clippy::needless_range_loop)]

pub mod calibrate;
pub mod cohort;
pub mod config;
pub mod cox;
pub mod error;
pub mod impute;
pub mod io;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod sim;
pub mod variance;
