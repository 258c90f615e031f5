pub mod audio;
pub mod autodiff;
pub mod codec;
pub mod conditioning;
pub mod config;
mod error;
pub mod features;
pub mod metrics;
pub mod model;
pub mod ode;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
