//! Convolution-free light-weight vision transformer built from windowed
//! self-attention with learnable global tokens and a bi-dimensional
//! (channel + spatial) attention FFN, together with an analytical cost model.

pub mod analyzer;
pub mod attention;
pub mod error;
pub mod ffn;
pub mod model;
pub mod nn;
pub mod serialization;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
