pub mod entropy;
pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod ops;
pub mod param;
pub mod scalar;
pub mod seed;
pub mod slim;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Shape4, Tensor4};

pub type SlimCae64 = model::SlimCae<f64>;
pub type SlimCae32 = model::SlimCae<f32>;
pub type Tensor64 = tensor::Tensor4<f64>;
pub type Tensor32 = tensor::Tensor4<f32>;
