//! Motion-aware sparse-interaction fusion of infrared and visible video.
//!
//! The numeric core ([`Tensor`], [`Tape`], the fusion modules) is generic over
//! [`Scalar`]; the model runs in `f32` and gradient checks run in `f64`.

pub mod bench;
pub mod config;
pub mod counter;
pub mod error;
pub mod flow;
pub mod io;
pub mod loss;
pub mod mafm;
pub mod mdim;
pub mod metrics;
pub mod ops;
pub mod pipeline;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
