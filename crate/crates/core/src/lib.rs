//! Numerical laboratory for backward SDEs driven by continuous martingales.
//!
//! Modules follow the workflow: sample a martingale ([`martingale`]), solve a
//! BSDE by regression ([`bsde`]), differentiate along paths
//! ([`path_derivative`]), study the blow-up example ([`blowup`]), and apply the
//! martingale method to portfolio problems ([`utility`]). [`harness`] wires
//! them into reproducible experiments.

pub mod error;
pub mod martingale;
pub mod blowup;
pub mod bsde;
pub mod path_derivative;
pub mod utility;
pub mod harness;

pub use error::{LabError, Result};
