pub mod data;
pub mod evaluate;
pub mod heads;
pub mod interpret;
mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod profile;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
