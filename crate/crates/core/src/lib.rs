//! Data preparation, models, training, metrics and analysis for
//! time-domain speech enhancement and separation.

pub mod analysis;
pub mod audio;
pub mod dataset;
pub mod dsp;
pub mod models;
pub mod pipeline;
pub mod error;
pub mod metrics;
pub mod rng;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
