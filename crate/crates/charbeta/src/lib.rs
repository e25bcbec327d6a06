//! Two-step estimation and uniformly valid bootstrap inference for
//! characteristic effects on factor betas in large high-frequency panels.
//!
//! Factor loadings are modeled as the sum of a nonparametric function of
//! observed characteristics (the characteristic beta) and an orthogonal
//! idiosyncratic component whose cross-sectional signal strength is unknown
//! and may be arbitrarily close to zero. Estimation runs in two steps —
//! per-asset spot regressions (or GMM solves) from realized quadratic
//! variations, followed by a cross-sectional sieve projection — and inference
//! uses a cross-sectional bootstrap that resamples entire asset time series,
//! which stays valid across idiosyncratic-beta signal strengths where
//! plug-in intervals over- or under-cover.
//!
//! Modules:
//! - [`panel`]: increment panels, local windows, jump truncation, realized
//!   quadratic covariation.
//! - [`sieve`]: sieve bases of characteristics and the cross-sectional
//!   projection operator.
//! - [`dgp`]: synthetic continuous-time panels with controllable
//!   idiosyncratic-beta strength, plus a discrete-time toy model.
//! - [`factor`]: the two-step estimator with observed factors and the
//!   integrated characteristic beta.
//! - [`latent`]: projected PCA for latent factors, bias corrections, and
//!   thresholded sparse residual covariance.
//! - [`gmm`]: the general linear moment-condition engine.
//! - [`boot`]: cross-sectional/block/GMM/integrated bootstrap confidence
//!   intervals and the plug-in comparators.
//! - [`harness`]: config-driven coverage studies, CSV panel ingestion and
//!   report emission.

pub mod boot;
pub mod dgp;
pub mod error;
pub mod factor;
pub mod gmm;
pub mod harness;
pub mod latent;
pub mod panel;
pub mod rng;
pub mod sieve;

pub use error::{Error, Result};
