//! Minimal CPU neural network layers with hand-written backward passes.
//!
//! Parameters live in one flat vector; layers hold [`ParamRange`]s into it so
//! the optimizer, checkpointing and finite-difference checks see a single
//! contiguous buffer.

mod conv;
mod linear;
pub mod ops;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use conv::{Conv2d, ConvCache, ConvSpec};
pub use linear::{Linear, Mlp, MlpCache};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Init, ParamBuilder, ParamGroup, ParamLayout, ParamRange};
pub use scalar::{matmul_acc, Scalar};
pub use tensor::Fmap;
