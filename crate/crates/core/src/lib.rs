pub mod dataio;
pub mod degrade;
pub mod error;
pub mod eval;
pub mod fmt;
pub mod kvfile;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
