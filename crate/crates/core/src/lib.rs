//! Joint flow matching for audio enhancement: complex compressed spectral
//! features, noise-scale calibration, conditional flow paths, ODE sampling,
//! a small dense flow network, toy experiments and evaluation metrics.

pub mod calibration;
pub mod error;
pub mod features;
pub mod flowmath;
pub mod metrics;
pub mod neural;
pub mod odesolve;
pub mod stats;
pub mod toylab;

pub use error::{Error, Result};
