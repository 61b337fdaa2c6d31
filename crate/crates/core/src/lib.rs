pub mod acu;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod interp;
mod linalg;
pub mod nn;
pub mod optim;
pub mod refconv;
pub mod tensor;
pub mod train;
pub mod trajectory;

pub use error::{Error, Result};
pub use tensor::Tensor;
