//! Quantization-aware dataset distillation.
//!
//! Differentiable quantizers (uniform, additive powers-of-two, FSQ-style)
//! co-optimized with synthetic datasets under explicit bit budgets, plus
//! the toy tasks, evaluation protocol, bit-exact `.qadd` serialization and
//! rate-distortion sweep harness around them.
//!
//! The numeric core ([`tensor`], [`tape`], [`quant`]) is generic over the
//! scalar type through [`scalar::Scalar`]; `f64` is the default type
//! parameter and the aliases below pin the pipeline to it.

pub mod datasets;
pub mod distill;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod nn;
pub mod packfmt;
pub mod qinit;
pub mod quant;
pub mod scalar;
pub mod sweep;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::Tape;
pub use tensor::Tensor;

/// Single-precision instantiations of the numeric core.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape32 = tape::Tape<f32>;
