//! Dense contact-pressure estimation from a vision image and a physique
//! vector.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod density;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
mod ops;
pub mod report;
pub mod train;
pub mod types;

pub use candle_core::Device;
pub use error::{PeyeError, Result};
