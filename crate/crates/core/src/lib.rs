//! Bayesian finite mixture model clustering for mixed continuous/categorical
//! data with detection-limit censoring: Gibbs-sampling inference under three
//! covariance structures, spike-and-slab variable importance, truncated-normal
//! imputation of censored cells, KL relabeling, and BIC/ICL model selection.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod fit;
pub mod gibbs;
pub mod model;
pub mod parallel;
pub mod postprocess;
pub mod simgen;
pub mod stochastic;

pub use error::{Error, Result};
