//! Promptable source-region segmentation for image forgery localization.

pub mod dataset;
pub mod error;
pub mod inference;
pub mod io;
pub mod losses;
pub mod maskops;
pub mod metrics;
pub mod net;
pub mod synth;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use types::*;
