//! Postprocessing of ensemble wind-gust forecasts into calibrated
//! threshold-exceedance probabilities.
//!
//! Methods: a two-stage MOS reference (`mosref`), local EMOS and its
//! gradient-boosted extension (`emos`), and neural distributional regression
//! with truncated-logistic (DRN) or Bernstein-quantile (BQN) heads
//! (`neural`). Forecasts are verified with the Brier score and its
//! decomposition (`verification`). `synthgen` produces archives with known
//! ground truth for reproducible experiments.

pub mod distributions;
pub mod domain;
pub mod emos;
pub mod error;
pub mod experiments;
pub mod features;
pub mod mosref;
pub mod neural;
pub mod optim;
pub mod pipeline;
pub mod synthgen;
pub mod verification;

pub use error::{Error, Result};
