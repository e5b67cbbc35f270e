pub mod config;
pub mod data;
pub mod dsp;
pub mod error;
pub mod flow;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod train;

pub use error::{Error, Result};
