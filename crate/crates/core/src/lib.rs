//! Few-shot semantic segmentation with prototype alignment.
//!
//! Support images and a query image pass through one shared convolutional
//! encoder. Class prototypes are obtained by masked average pooling of the
//! support features, every query location is labelled by an α-scaled
//! softmax over its cosine distances to the prototypes, and training adds a
//! reverse query-to-support segmentation loss that aligns the two sets of
//! prototypes.
//!
//! The numeric core is generic over [`Scalar`] (`f32`/`f64`); training,
//! checkpoints and evaluation run in `f64`, exposed through the aliases below.

pub mod annotations;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod mask;
pub mod metric;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use mask::LabelMask;
pub use scalar::Scalar;
pub use tensor::{Gradients, Tape, Tensor, Var};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
