//! Reverse-mode differentiation tape.
//!
//! A tape is single-owner: one forward evaluation builds a topologically
//! ordered record of kernel applications, `backward` then sweeps it once in
//! reverse. Leaves are named parameters; everything else is either a derived
//! value or a constant that gradients never reach. Replaying the same seed
//! and inputs rebuilds the same records and therefore bit-identical
//! gradients.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use super::ops;
use super::tensor::{Scalar, Tensor};
use crate::error::{EsdtError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

type BackFn<F> = Box<dyn Fn(&Tensor<F>) -> Vec<Tensor<F>>>;

struct Node<F: Scalar> {
    parents: Vec<TensorRef>,
    grad_fn: Option<BackFn<F>>,
    leaf: Option<String>,
    needs_grad: bool,
}

/// Gradient of a scalar root with respect to every leaf on the tape.
#[derive(Debug, Clone)]
pub struct GradientMap<F: Scalar> {
    grads: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> GradientMap<F> {
    pub fn new() -> Self {
        Self {
            grads: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.grads.iter()
    }

    pub fn insert(&mut self, name: String, grad: Tensor<F>) {
        self.grads.insert(name, grad);
    }

    pub fn l2_norm(&self) -> F {
        self.grads
            .values()
            .map(|g| g.sq_norm())
            .sum::<F>()
            .sqrt()
    }

    pub fn scale_in_place(&mut self, c: F) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v = *v * c;
            }
        }
    }

    /// Accumulate `other` (entry-wise, union of names) into `self`.
    pub fn accumulate(&mut self, other: &GradientMap<F>) {
        for (name, g) in other.iter() {
            match self.grads.get_mut(name) {
                Some(mine) => {
                    assert_eq!(mine.shape(), g.shape(), "gradient shape drift for {name}");
                    for (a, &b) in mine.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + b;
                    }
                }
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(|g| g.all_finite())
    }
}

impl<F: Scalar> Default for GradientMap<F> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Tape<F: Scalar> {
    values: Vec<Tensor<F>>,
    nodes: Vec<Node<F>>,
    leaf_names: HashSet<String>,
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            nodes: Vec::new(),
            leaf_names: HashSet::new(),
        }
    }

    pub fn value(&self, r: TensorRef) -> &Tensor<F> {
        &self.values[r.0]
    }

    pub fn shape(&self, r: TensorRef) -> &[usize] {
        self.values[r.0].shape()
    }

    fn any_needs_grad(&self, refs: &[TensorRef]) -> bool {
        refs.iter().any(|r| self.nodes[r.0].needs_grad)
    }

    fn push(
        &mut self,
        value: Tensor<F>,
        parents: Vec<TensorRef>,
        grad_fn: Option<BackFn<F>>,
        leaf: Option<String>,
    ) -> TensorRef {
        let needs_grad =
            leaf.is_some() || parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.values.push(value);
        self.nodes.push(Node {
            parents,
            grad_fn: if needs_grad { grad_fn } else { None },
            leaf,
            needs_grad,
        });
        TensorRef(self.values.len() - 1)
    }

    /// Register a named differentiable leaf. Names must be unique per tape.
    pub fn leaf(&mut self, name: &str, value: Tensor<F>) -> Result<TensorRef> {
        if !self.leaf_names.insert(name.to_string()) {
            return Err(EsdtError::Numeric(format!(
                "duplicate leaf name on tape: {name}"
            )));
        }
        Ok(self.push(value, vec![], None, Some(name.to_string())))
    }

    /// A value gradients never flow into.
    pub fn constant(&mut self, value: Tensor<F>) -> TensorRef {
        self.push(value, vec![], None, None)
    }

    /// Forward the value, pass no gradient.
    pub fn stop_gradient(&mut self, x: TensorRef) -> TensorRef {
        let v = self.values[x.0].clone();
        self.push(v, vec![], None, None)
    }

    // -- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(
            v,
            vec![a, b],
            Some(Box::new(|dy: &Tensor<F>| vec![dy.clone(), dy.clone()])),
            None,
        ))
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let v = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push(
            v,
            vec![a, b],
            Some(Box::new(|dy: &Tensor<F>| {
                vec![dy.clone(), ops::scale(dy, -F::one())]
            })),
            None,
        ))
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let v = ops::mul(self.value(a), self.value(b))?;
        let grad_fn: Option<BackFn<F>> = if self.any_needs_grad(&[a, b]) {
            let va = self.value(a).clone();
            let vb = self.value(b).clone();
            Some(Box::new(move |dy: &Tensor<F>| {
                vec![
                    ops::mul(dy, &vb).expect("mul vjp"),
                    ops::mul(dy, &va).expect("mul vjp"),
                ]
            }))
        } else {
            None
        };
        Ok(self.push(v, vec![a, b], grad_fn, None))
    }

    pub fn scale(&mut self, a: TensorRef, c: F) -> TensorRef {
        let v = ops::scale(self.value(a), c);
        self.push(
            v,
            vec![a],
            Some(Box::new(move |dy: &Tensor<F>| vec![ops::scale(dy, c)])),
            None,
        )
    }

    pub fn add_scalar(&mut self, a: TensorRef, c: F) -> TensorRef {
        let v = ops::add_scalar(self.value(a), c);
        self.push(
            v,
            vec![a],
            Some(Box::new(|dy: &Tensor<F>| vec![dy.clone()])),
            None,
        )
    }

    pub fn sigmoid(&mut self, x: TensorRef) -> TensorRef {
        let y = ops::sigmoid(self.value(x));
        let grad_fn: Option<BackFn<F>> = if self.any_needs_grad(&[x]) {
            let yc = y.clone();
            Some(Box::new(move |dy: &Tensor<F>| {
                vec![ops::sigmoid_vjp(&yc, dy)]
            }))
        } else {
            None
        };
        self.push(y, vec![x], grad_fn, None)
    }

    pub fn gelu(&mut self, x: TensorRef) -> TensorRef {
        let y = ops::gelu(self.value(x));
        let grad_fn: Option<BackFn<F>> = if self.any_needs_grad(&[x]) {
            let xc = self.value(x).clone();
            Some(Box::new(move |dy: &Tensor<F>| vec![ops::gelu_vjp(&xc, dy)]))
        } else {
            None
        };
        self.push(y, vec![x], grad_fn, None)
    }

    pub fn expand_axis(&mut self, x: TensorRef, axis: usize, n: usize) -> Result<TensorRef> {
        let v = ops::expand_axis(self.value(x), axis, n)?;
        Ok(self.push(
            v,
            vec![x],
            Some(Box::new(move |dy: &Tensor<F>| {
                vec![ops::expand_axis_vjp(dy, axis)]
            })),
            None,
        ))
    }

    // -- contractions -----------------------------------------------------

    pub fn linear(
        &mut self,
        x: TensorRef,
        w: TensorRef,
        b: Option<TensorRef>,
    ) -> Result<TensorRef> {
        let vb = b.map(|r| self.value(r).clone());
        let y = ops::linear(self.value(x), self.value(w), vb.as_ref())?;
        let has_bias = b.is_some();
        let mut parents = vec![x, w];
        if let Some(br) = b {
            parents.push(br);
        }
        let grad_fn: Option<BackFn<F>> = if self.any_needs_grad(&parents) {
            let vx = self.value(x).clone();
            let vw = self.value(w).clone();
            Some(Box::new(move |dy: &Tensor<F>| {
                let (dx, dw, db) = ops::linear_vjp(&vx, &vw, has_bias, dy);
                let mut out = vec![dx, dw];
                if let Some(db) = db {
                    out.push(db);
                }
                out
            }))
        } else {
            None
        };
        Ok(self.push(y, parents, grad_fn, None))
    }

    pub fn bmm(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let y = ops::bmm(self.value(a), self.value(b))?;
        let grad_fn: Option<BackFn<F>> = if self.any_needs_grad(&[a, b]) {
            let va = self.value(a).clone();
            let vb = self.value(b).clone();
            Some(Box::new(move |dy: &Tensor<F>| {
                let (da, db) = ops::bmm_vjp(&va, &vb, dy);
                vec![da, db]
            }))
        } else {
            None
        };
        Ok(self.push(y, vec![a, b], grad_fn, None))
    }

    pub fn row_softmax(
        &mut self,
        x: TensorRef,
        mask: Option<Arc<Vec<bool>>>,
    ) -> Result<TensorRef> {
        let y = ops::row_softmax(self.value(x), mask.as_deref().map(|m| m.as_slice()))?;
        let grad_fn: Option<BackFn<F>> = if self.any_needs_grad(&[x]) {
            let yc = y.clone();
            Some(Box::new(move |dy: &Tensor<F>| {
                vec![ops::row_softmax_vjp(&yc, dy)]
            }))
        } else {
            None
        };
        Ok(self.push(y, vec![x], grad_fn, None))
    }

    pub fn layer_norm(
        &mut self,
        x: TensorRef,
        gamma: TensorRef,
        beta: TensorRef,
    ) -> Result<TensorRef> {
        let y = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta))?;
        let grad_fn: Option<BackFn<F>> = if self.any_needs_grad(&[x, gamma, beta]) {
            let vx = self.value(x).clone();
            let vg = self.value(gamma).clone();
            Some(Box::new(move |dy: &Tensor<F>| {
                let (dx, dg, db) = ops::layer_norm_vjp(&vx, &vg, dy);
                vec![dx, dg, db]
            }))
        } else {
            None
        };
        Ok(self.push(y, vec![x, gamma, beta], grad_fn, None))
    }

    pub fn conv2x2s2(
        &mut self,
        x: TensorRef,
        w: TensorRef,
        b: Option<TensorRef>,
    ) -> Result<TensorRef> {
        let vb = b.map(|r| self.value(r).clone());
        let y = ops::conv2x2s2(self.value(x), self.value(w), vb.as_ref())?;
        let has_bias = b.is_some();
        let mut parents = vec![x, w];
        if let Some(br) = b {
            parents.push(br);
        }
        let grad_fn: Option<BackFn<F>> = if self.any_needs_grad(&parents) {
            let vx = self.value(x).clone();
            let vw = self.value(w).clone();
            Some(Box::new(move |dy: &Tensor<F>| {
                let (dx, dw, db) = ops::conv2x2s2_vjp(&vx, &vw, has_bias, dy);
                let mut out = vec![dx, dw];
                if let Some(db) = db {
                    out.push(db);
                }
                out
            }))
        } else {
            None
        };
        Ok(self.push(y, parents, grad_fn, None))
    }

    pub fn space_to_channel(&mut self, x: TensorRef, p: usize) -> Result<TensorRef> {
        let y = ops::space_to_channel(self.value(x), p)?;
        Ok(self.push(
            y,
            vec![x],
            Some(Box::new(move |dy: &Tensor<F>| {
                vec![ops::channel_to_space(dy, p).expect("s2c vjp")]
            })),
            None,
        ))
    }

    pub fn channel_to_space(&mut self, x: TensorRef, p: usize) -> Result<TensorRef> {
        let y = ops::channel_to_space(self.value(x), p)?;
        Ok(self.push(
            y,
            vec![x],
            Some(Box::new(move |dy: &Tensor<F>| {
                vec![ops::space_to_channel(dy, p).expect("c2s vjp")]
            })),
            None,
        ))
    }

    pub fn spatial_mean_pool(&mut self, x: TensorRef) -> Result<TensorRef> {
        let shape = self.value(x).shape().to_vec();
        let y = ops::spatial_mean_pool(self.value(x))?;
        Ok(self.push(
            y,
            vec![x],
            Some(Box::new(move |dy: &Tensor<F>| {
                vec![ops::spatial_mean_pool_vjp(&shape, dy)]
            })),
            None,
        ))
    }

    // -- structure --------------------------------------------------------

    pub fn concat(&mut self, parts: &[TensorRef], axis: usize) -> Result<TensorRef> {
        let tensors: Vec<&Tensor<F>> = parts.iter().map(|r| &self.values[r.0]).collect();
        let y = ops::concat(&tensors, axis)?;
        let extents: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        Ok(self.push(
            y,
            parts.to_vec(),
            Some(Box::new(move |dy: &Tensor<F>| {
                let mut out = Vec::with_capacity(extents.len());
                let mut start = 0;
                for &e in &extents {
                    out.push(ops::narrow(dy, axis, start, e).expect("concat vjp"));
                    start += e;
                }
                out
            })),
            None,
        ))
    }

    pub fn narrow(
        &mut self,
        x: TensorRef,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<TensorRef> {
        let shape = self.value(x).shape().to_vec();
        let y = ops::narrow(self.value(x), axis, start, len)?;
        Ok(self.push(
            y,
            vec![x],
            Some(Box::new(move |dy: &Tensor<F>| {
                vec![ops::narrow_vjp(&shape, axis, start, dy)]
            })),
            None,
        ))
    }

    pub fn permute(&mut self, x: TensorRef, axes: &[usize]) -> Result<TensorRef> {
        let y = ops::permute(self.value(x), axes)?;
        let inv = ops::inverse_axes(axes);
        Ok(self.push(
            y,
            vec![x],
            Some(Box::new(move |dy: &Tensor<F>| {
                vec![ops::permute(dy, &inv).expect("permute vjp")]
            })),
            None,
        ))
    }

    pub fn reshape(&mut self, x: TensorRef, shape: &[usize]) -> Result<TensorRef> {
        let old = self.value(x).shape().to_vec();
        let y = self.value(x).reshaped(shape)?;
        Ok(self.push(
            y,
            vec![x],
            Some(Box::new(move |dy: &Tensor<F>| {
                vec![dy.reshaped(&old).expect("reshape vjp")]
            })),
            None,
        ))
    }

    pub fn select_rows(&mut self, table: TensorRef, idx: Vec<usize>) -> Result<TensorRef> {
        let shape = self.value(table).shape().to_vec();
        let y = ops::select_rows(self.value(table), &idx)?;
        Ok(self.push(
            y,
            vec![table],
            Some(Box::new(move |dy: &Tensor<F>| {
                vec![ops::select_rows_vjp(&shape, &idx, dy)]
            })),
            None,
        ))
    }

    // -- reductions -------------------------------------------------------

    pub fn sum_all(&mut self, x: TensorRef) -> TensorRef {
        let shape = self.value(x).shape().to_vec();
        let y = ops::sum_all(self.value(x));
        self.push(
            y,
            vec![x],
            Some(Box::new(move |dy: &Tensor<F>| {
                vec![Tensor::full(&shape, dy.item())]
            })),
            None,
        )
    }

    pub fn mean_all(&mut self, x: TensorRef) -> TensorRef {
        let shape = self.value(x).shape().to_vec();
        let inv = F::one() / F::c(self.value(x).numel() as f64);
        let y = ops::mean_all(self.value(x));
        self.push(
            y,
            vec![x],
            Some(Box::new(move |dy: &Tensor<F>| {
                vec![Tensor::full(&shape, dy.item() * inv)]
            })),
            None,
        )
    }

    pub fn mean_tail(&mut self, x: TensorRef) -> Result<TensorRef> {
        let shape = self.value(x).shape().to_vec();
        let y = ops::mean_tail(self.value(x))?;
        let b = shape[0];
        let inner = shape.iter().product::<usize>() / b;
        let inv = F::one() / F::c(inner as f64);
        Ok(self.push(
            y,
            vec![x],
            Some(Box::new(move |dy: &Tensor<F>| {
                let mut dx = vec![F::zero(); b * inner];
                for i in 0..b {
                    let g = dy.data()[i] * inv;
                    for v in &mut dx[i * inner..(i + 1) * inner] {
                        *v = g;
                    }
                }
                vec![Tensor::new(&shape, dx)]
            })),
            None,
        ))
    }

    pub fn dot(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let y = ops::dot(self.value(a), self.value(b))?;
        let grad_fn: Option<BackFn<F>> = if self.any_needs_grad(&[a, b]) {
            let va = self.value(a).clone();
            let vb = self.value(b).clone();
            Some(Box::new(move |dy: &Tensor<F>| {
                let g = dy.item();
                vec![ops::scale(&vb, g), ops::scale(&va, g)]
            }))
        } else {
            None
        };
        Ok(self.push(y, vec![a, b], grad_fn, None))
    }

    /// Mean squared error between two same-shape values, as one scalar.
    pub fn mse(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    // -- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar root, visiting each record exactly once.
    /// Every registered leaf appears in the result; leaves the root does not
    /// depend on (including stop-gradient paths) get zero gradients.
    pub fn backward(&self, root: TensorRef) -> Result<GradientMap<F>> {
        if !self.value(root).is_scalar() {
            return Err(EsdtError::Numeric(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(F::one()));

        let mut out = GradientMap::new();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(f) = &self.nodes[i].grad_fn {
                let parts = f(&g);
                debug_assert_eq!(parts.len(), self.nodes[i].parents.len());
                for (p, part) in self.nodes[i].parents.iter().zip(parts) {
                    if !self.nodes[p.0].needs_grad {
                        continue;
                    }
                    match &mut grads[p.0] {
                        Some(acc) => {
                            debug_assert_eq!(acc.shape(), part.shape());
                            for (a, &b) in acc.data_mut().iter_mut().zip(part.data()) {
                                *a = *a + b;
                            }
                        }
                        slot @ None => *slot = Some(part),
                    }
                }
            }
            if let Some(name) = &self.nodes[i].leaf {
                out.insert(name.clone(), g);
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.leaf {
                if out.get(name).is_none() {
                    out.insert(name.clone(), Tensor::zeros(self.values[i].shape()));
                }
            }
        }
        Ok(out)
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}
