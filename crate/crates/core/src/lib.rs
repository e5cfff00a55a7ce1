pub mod bench;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod quadlab;
pub mod strategies;
pub mod tensor;

pub use error::{Error, Result};
