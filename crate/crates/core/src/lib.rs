//! Camera-guided acoustic source localization.
//!
//! Sensor-array covariance fitting regularised by an unbalanced optimal
//! transport term that pulls the estimated power map toward camera
//! detections, solved with greedy maximal-improvement coordinate descent.

// `!(x >= 0.0)` is used on purpose so that NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod cmf;
pub mod error;
pub mod eval;
pub mod nnls;
pub mod scene;
pub mod signalsim;
pub mod trace;
pub mod uot;

pub use error::{Error, Result};
