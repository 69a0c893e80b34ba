pub mod autodiff;
pub mod distill;
pub mod error;
pub mod experiments;
mod linalg;
pub mod mixers;
pub mod model;
pub mod seed;
pub mod select;
pub mod tasks;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
