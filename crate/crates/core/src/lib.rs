pub mod asymptotics;
pub mod error;
pub mod estimator;
pub mod gate;
pub mod model;
pub mod nuisance;
pub mod score;
pub mod simulate;

pub use error::{Error, Result};
