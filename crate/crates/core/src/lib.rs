pub mod ablation;
pub mod alignment;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod federation;
pub mod model;
pub mod params;
pub mod rng;
pub mod uncertainty;

pub use error::{Error, Result};
