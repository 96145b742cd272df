pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod params;
pub mod perceptual;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
