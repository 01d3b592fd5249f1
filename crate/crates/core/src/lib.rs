//! Calibration-free multi-view fusion of parametric human body estimates.
//!
//! Per-view body estimates are mixed by a joint reweighting network (per-joint scores over
//! cameras) and a surface reweighting network (UV-space weight maps reduced to per-coefficient
//! weights for shape and expression).

pub(crate) mod binio;
pub mod body;
pub mod camera;
pub mod error;
pub mod jrn;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod srn;
pub mod synth;

pub use error::{MucError, Result};
