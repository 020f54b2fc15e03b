//! Coupled alkali / noble-gas collective spin dynamics.
//!
//! The crate covers the idealized two-mode model, a detailed Bloch-equation
//! simulator with decaying alkali polarization, the experimental pulse
//! sequences, readout fitting, excitation reconstruction and spectral maps.

// `!(x > 0.0)` is the NaN-rejecting form used throughout parameter checks.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::needless_range_loop)]

pub mod bloch_sim;
pub mod error;
pub mod fitting;
pub mod io;
pub mod ode;
pub mod physics;
pub mod pipeline;
pub mod presets;
pub mod reconstruct;
pub mod sequence;
pub mod spectral;
pub mod two_mode;

pub use error::{Error, Result};
