pub mod data;
pub mod error;
pub mod analysis;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use linalg::Matrix;
