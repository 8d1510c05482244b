//! Calibration and verification toolkit for microscopic vehicle
//! energy-consumption models.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`trajectory_store`] loads raw OBD-style logs (mass air flow, state of
//!    charge, speed) and resamples them onto a fixed one-second grid.
//! 2. [`energy_pipeline`] turns each tick into engine, battery and total
//!    joules, derives accelerations and applies the cleaning rules.
//! 3. [`consumption_models`] evaluates the VT-Micro, ARRB and AA-Micro
//!    models and (de)serializes fitted coefficients.
//! 4. [`calibration`] splits data, fits the models and scores them with
//!    adjusted R².
//! 5. [`evaluation`] computes residual metrics and the group
//!    cross-application matrices.
//!
//! [`synth_oracle`] generates datasets from known ground-truth models so the
//! whole chain can be checked end to end.

pub mod calibration;
pub mod consumption_models;
pub mod energy_pipeline;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod synth_oracle;
pub mod trajectory_store;

pub use error::{Error, Result};

/// Version string embedded in every written artifact.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
