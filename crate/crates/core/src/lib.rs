//! Lag-window estimation of long-run covariance functions for functional time
//! series, with bandwidth selection, functional principal components of the
//! estimate and Monte Carlo checks of the asymptotic theory.
//!
//! Curves live on a uniform midpoint grid of `G` points on `[0, 1]`; integrals
//! are Riemann sums with weight `1/G` per coordinate.

pub mod cli_io;
pub mod error;
pub mod estimator;
pub mod fpca;
pub mod grid;
pub mod kernels;
pub mod mc;
pub mod simulate;
pub mod stats;

pub use error::{LrcovError, Result};
pub use estimator::{estimate_lrcov, EstimatorOptions, LrcovEstimate};
pub use grid::{Curve, CurveSample, Grid, Surface};
pub use kernels::{Bandwidth, KernelSpec};
pub use stats::ks_distance;
