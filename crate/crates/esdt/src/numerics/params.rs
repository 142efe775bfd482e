//! Named parameter storage and the finite-difference gradient oracle.

use std::collections::BTreeMap;

use super::tape::{Tape, TensorRef};
use super::tensor::{Scalar, Tensor};
use crate::error::{EsdtError, Result};

/// Named tensors with deterministic (sorted) iteration order.
#[derive(Debug, Clone)]
pub struct ParamStore<F: Scalar> {
    map: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        let name = name.into();
        assert!(
            self.map.insert(name.clone(), t).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<F>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<F> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Bind every parameter onto a tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<F>) -> Result<BoundParams> {
        let mut refs = BTreeMap::new();
        for (name, t) in &self.map {
            refs.insert(name.clone(), tape.leaf(name, t.clone())?);
        }
        Ok(BoundParams { refs })
    }

    /// Bind every parameter as a constant: values flow, gradients do not.
    pub fn bind_frozen(&self, tape: &mut Tape<F>) -> BoundParams {
        let mut refs = BTreeMap::new();
        for (name, t) in &self.map {
            refs.insert(name.clone(), tape.constant(t.clone()));
        }
        BoundParams { refs }
    }
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape handles for a bound parameter set.
pub struct BoundParams {
    refs: BTreeMap<String, TensorRef>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> TensorRef {
        *self
            .refs
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<TensorRef> {
        self.refs.get(name).copied()
    }
}

/// Central-difference gradient of a deterministic scalar function of the
/// parameters: `(f(p+h) - f(p-h)) / 2h` per coordinate. Runs in verification
/// precision only; the closure must not mutate global state.
pub fn finite_diff_grad(
    params: &mut ParamStore<f64>,
    h: f64,
    mut f: impl FnMut(&ParamStore<f64>) -> Result<f64>,
) -> Result<BTreeMap<String, Tensor<f64>>> {
    if h <= 0.0 {
        return Err(EsdtError::Numeric(format!("step h must be positive, got {h}")));
    }
    let names: Vec<String> = params.names().cloned().collect();
    let mut out = BTreeMap::new();
    for name in names {
        let n = params.get(&name).numel();
        let shape = params.get(&name).shape().to_vec();
        let mut grad = vec![0.0f64; n];
        for i in 0..n {
            let orig = params.get(&name).data()[i];
            params.get_mut(&name).data_mut()[i] = orig + h;
            let up = f(params)?;
            params.get_mut(&name).data_mut()[i] = orig - h;
            let down = f(params)?;
            params.get_mut(&name).data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(EsdtError::Numeric(format!(
                    "finite_diff_grad: non-finite evaluation at {name}[{i}]"
                )));
            }
            grad[i] = (up - down) / (2.0 * h);
        }
        out.insert(name, Tensor::new(&shape, grad));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_of_square_at_three() {
        let mut p = ParamStore::<f64>::new();
        p.insert("x", Tensor::scalar(3.0));
        let g = finite_diff_grad(&mut p, 1e-5, |p| Ok(p.get("x").item().powi(2))).unwrap();
        assert!((g["x"].item() - 6.0).abs() <= 1e-8);
    }

    #[test]
    fn finite_diff_of_constant_is_zero() {
        let mut p = ParamStore::<f64>::new();
        p.insert("x", Tensor::new(&[3], vec![1.0, 2.0, 3.0]));
        let g = finite_diff_grad(&mut p, 1e-5, |_| Ok(42.0)).unwrap();
        assert!(g["x"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_diff_rejects_bad_step() {
        let mut p = ParamStore::<f64>::new();
        p.insert("x", Tensor::scalar(1.0));
        assert!(finite_diff_grad(&mut p, 0.0, |_| Ok(0.0)).is_err());
    }
}

impl BoundParams {
    /// Assemble from externally built tape refs (adapter-composed weights).
    pub fn from_refs(refs: std::collections::BTreeMap<String, crate::numerics::TensorRef>) -> Self {
        Self { refs }
    }
}
