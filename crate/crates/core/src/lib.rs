//! Desk-scale vision-language pre-training with an online visual dictionary.

pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dictionary;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod fdsuite;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod tensor;
pub mod text;
pub mod trainer;
pub mod transformer;

pub use autograd::{Graph, Segment, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
