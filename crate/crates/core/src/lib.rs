pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod gabor;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod study;
pub mod training;
pub mod volume;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
