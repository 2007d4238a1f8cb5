//! Sequential Bayesian trend classification for time-series momentum.
//!
//! Each asset's next-month return direction is forecast by dynamic logistic
//! regressions on momentum look-backs. Forecasts from every look-back
//! subset are averaged or selected with forgetting-factor model
//! probabilities, turned into long/short signs, and traded in
//! volatility-targeted futures portfolios evaluated against the naive
//! momentum rule.

pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod features;
pub mod filter;
pub mod metrics;
pub mod pool;
pub mod portfolio;
pub mod signal;
pub mod synth;

pub use error::{Error, Result};
