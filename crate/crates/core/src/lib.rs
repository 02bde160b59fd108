pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod modality_net;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{matmul, Parameter, Tensor};
