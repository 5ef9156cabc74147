//! Normalizing-flow image priors: training and MAP restoration.

pub mod conv;
pub mod degrade;
pub mod distributions;
pub mod error;
pub mod flow;
pub mod io;
pub mod optim;
pub mod par;
pub mod restoration;
pub mod rng;
pub mod sanity;
pub mod tape;
pub mod tensor;
pub mod tiler;
pub mod toydata;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
