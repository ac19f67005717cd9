//! Estimation of the edge proportion of a Gaussian graphical model.
//!
//! Node-wise (scaled) Lasso regressions give edge-wise test statistics and
//! p-values; a tail-count estimator of the null proportion applied to those
//! p-values estimates the fraction of absent edges.

pub mod dist;
pub mod gfc;
pub mod linalg;
pub mod models;
pub mod oracles;
pub mod pi0;
pub mod regression;
pub mod rng;
pub mod sampler;
pub mod simulation;
