//! Multivariate hierarchical spatio-temporal Gaussian-process modeling of
//! monthly climate records (rain, minimum and maximum temperature), with a
//! Nearest-Neighbor Gaussian Process (NNGP) approximation of the latent
//! space-time field.
//!
//! The model couples three latent responses through a linear model of
//! coregionalization over independent Gneiting space-time processes, adds a
//! circular annual-cycle component and an ecoregion-varying elevation
//! regression, and handles zero rain / zero diurnal range through censored
//! latent variables. Inference is blocked MCMC with missing-data
//! augmentation; prediction samples grid series sequentially through the
//! NNGP conditionals.

pub mod covariance;
pub mod data;
pub mod dist;
pub mod error;
pub mod inference;
pub mod model;
pub mod nngp;
pub mod predict;
pub mod rng;
pub mod simulate;
pub mod spacetime;

pub use error::{Error, Result};

/// Number of coupled response components (rain, tmin, diurnal range).
pub const N_RESPONSES: usize = 3;
