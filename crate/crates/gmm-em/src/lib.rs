//! Parameter estimation for well-separated spherical Gaussian mixtures.
//!
//! The crate provides:
//!
//! - [`model`]: mixture parameterizations, separation margins, and the
//!   normalized worst-component error metric used to compare an estimate
//!   against ground truth up to component permutation.
//! - [`synth`]: seeded generation of separated instances, datasets, and
//!   perturbed initializations inside the EM convergence basin.
//! - [`em`]: the EM iteration (log-domain E-step, empirical M-step) with
//!   plain and sample-splitting fit loops.
//! - [`kmeans`]: one-step k-means initialization with a chi-square-quantile
//!   variance estimator.
//! - [`diagnostics`]: computable quantities from the convergence analysis --
//!   per-sample good-event indicators, bad-event rates, fixed-point
//!   residuals, and contraction-rate estimates.
//! - [`experiments`]: the deterministic experiment runner behind the
//!   `gmm-em` CLI.
//!
//! All randomness flows through [`synth::SeededRng`], so every operation is
//! reproducible given `(seed, stream_id)`.

pub mod diagnostics;
pub mod em;
mod error;
pub mod experiments;
pub mod kmeans;
pub mod model;
pub mod synth;

pub(crate) mod assign;
pub(crate) mod vecmath;

pub use error::{Error, Result};
