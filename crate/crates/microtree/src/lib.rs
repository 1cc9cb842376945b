//! Option pricing on a microstructure-aware binary tree.
//!
//! The pipeline in one line: minute bars → 17 microstructure features →
//! from-scratch random-forest up-move probabilities → probability-binned
//! market states with moment-matched movement factors → minimal-martingale
//! (no-arbitrage) calibration → non-recombining pricing tree / Monte Carlo,
//! benchmarked against CRR and Black-Scholes.
//!
//! Each stage is an independent module usable on its own:
//!
//! * [`market_data`] — load, validate, summarize and synthesize minute bars
//! * [`features`] — the fixed 17-column feature matrix with up/down labels
//! * [`forest`] — random-forest classifier, AUC / walk-forward CV / calibration curves
//! * [`calibration`] — state binning, moment matching, time scaling, MMM probabilities
//! * [`tree`] — non-recombining tree construction with optional level aggregation
//! * [`pricing`] — backward induction, Monte Carlo, CRR and Black-Scholes benchmarks
//! * [`pipeline`] — file-based orchestration used by the `microtree` binary
//!
//! See the crate `examples/` directory for one runnable example per stage.

pub mod calibration;
pub mod error;
pub mod features;
pub mod forest;
pub mod market_data;
pub mod pipeline;
pub mod pricing;
pub mod tree;

pub use error::{Error, Result};
