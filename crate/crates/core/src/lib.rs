//! Temporally coherent video harmonization.
//!
//! The crate covers the whole pipeline: synthesizing paired two-frame
//! training data with exact masks and optical flow, the generator and
//! pixel-wise discriminator networks, the losses that tie them together,
//! training, and evaluation.

pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod flow;
pub mod frame;
pub mod losses;
pub mod networks;
pub mod ranking;
pub mod training;

pub use error::{Error, ErrorCategory, Result};
pub use flow::FlowField;
pub use frame::{Frame, Mask};
