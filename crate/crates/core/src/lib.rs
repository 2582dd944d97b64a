pub mod autodiff;
pub mod datasets;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod training;

pub use error::{Error, Result};
