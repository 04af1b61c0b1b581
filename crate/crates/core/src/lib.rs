//! Research engine for quarterly stock selection.
//!
//! The pipeline: load a panel of quarterly fundamentals and prices
//! ([`panel`]), turn it into per-stock supervised samples of standardized
//! feature changes against benchmark-relative returns ([`preprocess`]),
//! fit one regressor per stock — a small feed-forward network ([`fnn`]) or
//! a first-order TSK fuzzy system ([`anfis`]) — rank the cross-section
//! each quarter, and evaluate equal-weight top-k/bottom-k portfolios
//! against the full universe ([`backtest`]). [`synth`] generates synthetic
//! universes with a planted, recoverable signal for end-to-end checks.
//!
//! All numeric code is generic over [`scalar::Scalar`]; the aliases below
//! fix the `f64` instantiations the command-line pipeline uses.

// Validation guards are written in negated form (`!(x > 0.0)`) so that a
// NaN parameter fails them instead of slipping through the positive branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anfis;
pub mod backtest;
pub mod fnn;
pub mod panel;
pub mod preprocess;
pub mod scalar;
pub mod synth;

pub use scalar::Scalar;

/// `f64` panel, as produced by the data loaders.
pub type Panel64 = panel::QuarterlyPanel<f64>;
/// `f64` benchmark series.
pub type Benchmark64 = panel::BenchmarkSeries<f64>;
/// `f64` supervised dataset.
pub type Dataset64 = preprocess::Dataset<f64>;
/// `f64` feed-forward model.
pub type Fnn64 = fnn::FnnModel<f64>;
/// `f64` fuzzy-inference model.
pub type Anfis64 = anfis::AnfisModel<f64>;
/// `f64` experiment report.
pub type Report64 = backtest::BacktestReport<f64>;
