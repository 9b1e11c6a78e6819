pub mod autodiff;
pub mod bridge;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod export;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod ringing;
pub mod stam;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
