//! Simulation and analysis toolkit for mid-infrared photon-pair sources in
//! silicon waveguides: pump propagation, nonlinear-phase retrieval,
//! time-tagged pair generation, coincidence analysis, detector
//! calibration and two-photon interference.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod coincidence;
pub mod detector;
pub mod error;
pub mod fitters;
pub mod fwm;
pub mod interference;
pub mod nlse;
pub mod pairsource;
pub mod physmodel;
pub mod retrieval;
pub mod spectral;

pub use error::{Error, Result};
