//! Dense row-major tensor over f32 (standard) or f64 (verification) elements.
//!
//! 4-D activations follow the channel-first layout `(batch, channel, height,
//! width)` throughout the crate; attention code reshapes explicitly.

use std::fmt;
use std::iter::Sum;

use crate::error::{EsdtError, Result};

/// Element type for all numeric code. `f32` is the standard precision used by
/// training and benchmarks; `f64` exists for gradient verification.
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + Sum + Send + Sync + fmt::Debug + Default + 'static
{
    /// Lossless-enough conversion from an `f64` constant.
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("constant conversion")
    }
    fn to_f64_(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64_(self) -> f64 {
        self as f64
    }
}
impl Scalar for f64 {
    fn to_f64_(self) -> f64 {
        self
    }
}

/// Dense tensor: positive extents, elements in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "element count {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Identity matrix of extent `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Self::new(shape, data.iter().map(|&x| F::c(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> F {
        assert!(self.is_scalar(), "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    /// Same data, new extents; total element count must be preserved.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(EsdtError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Self::new(shape, self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sq_norm(&self) -> F {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(F::zero(), F::max)
    }

    /// Cast every element through f64 into another scalar type.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::c(x.to_f64_())).collect(),
        }
    }
}

/// Relative L2 error of `got` against `want`, guarding a zero reference norm.
pub fn rel_l2_error<F: Scalar>(got: &Tensor<F>, want: &Tensor<F>) -> f64 {
    assert_eq!(got.shape(), want.shape(), "rel_l2_error shape mismatch");
    let mut num = 0.0;
    let mut den = 0.0;
    for (&a, &b) in got.data().iter().zip(want.data()) {
        let d = a.to_f64_() - b.to_f64_();
        num += d * d;
        den += b.to_f64_() * b.to_f64_();
    }
    (num.sqrt()) / den.sqrt().max(1e-300)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_data_round_trip() {
        let t = Tensor::<f32>::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.numel(), 6);
        let r = t.reshaped(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert!(t.reshaped(&[4, 2]).is_err());
    }

    #[test]
    fn eye_is_identity() {
        let i = Tensor::<f64>::eye(3);
        assert_eq!(i.data()[0], 1.0);
        assert_eq!(i.data()[1], 0.0);
        assert_eq!(i.data()[4], 1.0);
    }

    #[test]
    #[should_panic(expected = "element count")]
    fn mismatched_data_panics() {
        let _ = Tensor::<f32>::new(&[2, 2], vec![0.0; 3]);
    }
}
