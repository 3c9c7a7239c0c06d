pub mod augment;
pub mod bayes;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod model;
pub mod rng;
pub mod service;
pub mod train;

pub use error::{Error, Result};
