//! Shared interface for velocity-field evaluators: trained models, frozen
//! teachers, and closed-form oracles all answer the same question — the
//! predicted velocity at `(x_t, t)` under an optional per-sample condition.

use crate::error::Result;
use crate::numerics::{Scalar, Tensor};

/// A velocity predictor over channel-first latents `[B, C, H, W]`.
/// `t` is per-sample; `cond[i]` is a class index or `None` for the null
/// condition.
pub trait VelocityField<F: Scalar> {
    fn velocity(&self, x_t: &Tensor<F>, t: &[F], cond: &[Option<usize>]) -> Result<Tensor<F>>;

    /// Latent shape `(C, H, W)` this field operates on.
    fn latent_shape(&self) -> (usize, usize, usize);
}
