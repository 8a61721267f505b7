pub mod ablate;
pub mod autograd;
pub mod cli;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod grqo;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
