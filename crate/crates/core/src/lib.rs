//! VWAP order-execution allocation toolkit.
//!
//! The crate covers the full loop of building and judging execution
//! schedules against a VWAP benchmark:
//!
//! - [`marketdata`]: bar ingestion, feature engineering, lookback/horizon
//!   windowing and chronological dataset splits.
//! - [`objectives`]: achieved/market VWAP, the absolute, quadratic and
//!   volume-curve losses, the slippage decomposition bound, the volume-curve
//!   R² score and the Konishi/McCulloch–Kazakov reference curve.
//! - [`fixedcurve`]: static allocation vectors optimized with differential
//!   evolution, restarted Nelder–Mead or basin hopping.
//! - [`tln`]: the temporal linear network with a softmax allocation head and
//!   analytic reverse-mode gradients.
//! - [`training`]: the Adam loop with early stopping and learning-rate
//!   reduction, the multi-seed protocol, and the linear-regression benchmark.
//! - [`backtest`]: static and dynamic execution simulation over a test set
//!   plus report emission.
//! - [`synth`]: seeded synthetic market generators used by tests, the demo
//!   and smoke runs.
//!
//! All randomness is seeded explicitly; the same seed reproduces the same
//! result on the same platform.

pub mod backtest;
mod error;
pub mod fixedcurve;
pub mod marketdata;
pub mod objectives;
pub mod synth;
pub mod tln;
pub mod training;

pub use error::{Error, Result};
