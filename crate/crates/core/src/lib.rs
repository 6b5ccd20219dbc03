//! Power-of-two post-training quantization.

pub mod actquant;
pub mod error;
pub mod fixture;
pub mod io;
pub mod network;
pub mod pipeline;
pub mod quantizer;
pub mod reconstruction;
pub mod shift;
pub mod softquant;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
