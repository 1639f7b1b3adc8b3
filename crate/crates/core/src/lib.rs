pub mod augmentation;
pub mod dataset;
pub mod ddpm;
pub mod error;
pub mod guidance;
pub mod imageio;
pub mod metrics;
pub mod nn;
pub mod predictors;

pub use error::{Error, Result};
