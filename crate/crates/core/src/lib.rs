pub mod autodiff;
pub mod classifier;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gem;
pub mod gradient_suite;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod train;

pub use error::{Error, Result};
