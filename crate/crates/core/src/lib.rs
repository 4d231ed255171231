//! Block-wise weight quantization, importance-weighted fitting, quantized
//! kernels and an inference throughput benchmark harness.

pub mod bench;
pub mod codecs;
pub mod error;
pub mod imatrix;
pub mod kernels;
pub mod report;
pub mod tensor;

pub use error::{Error, Result};
