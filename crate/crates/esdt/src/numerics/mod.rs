//! Tensor substrate: dense tensors, kernels, reverse-mode tape, seeded
//! randomness, and the finite-difference verification oracle.

pub mod ops;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use params::{finite_diff_grad, BoundParams, ParamStore};
pub use rng::{StreamPurpose, StreamRng};
pub use tape::{GradientMap, Tape, TensorRef};
pub use tensor::{rel_l2_error, Scalar, Tensor};
