//! Adam optimizer over named parameter stores.

use std::collections::BTreeMap;

use crate::error::{EsdtError, Result};
use crate::numerics::{GradientMap, ParamStore, Scalar, Tensor};

pub struct Adam<F: Scalar> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    step: u64,
    m: BTreeMap<String, Tensor<F>>,
    v: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr: F::c(lr),
            beta1: F::c(beta1),
            beta2: F::c(beta2),
            eps: F::c(1e-8),
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Only parameters named in `grads` are touched; a parameter
    /// with an all-zero gradient and no accumulated moment stays bit-identical.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &GradientMap<F>) -> Result<()> {
        if !grads.all_finite() {
            return Err(EsdtError::Numeric("adam: non-finite gradient".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name);
            if p.shape() != g.shape() {
                return Err(EsdtError::shape(
                    "adam",
                    format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for i in 0..g.numel() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (F::one() - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (F::one() - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p.data_mut()[i] = p.data()[i] - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

impl<F: Scalar> Adam<F> {
    /// Serialize moments and step count into a named store
    /// (`m.*`, `v.*`, `t`), suitable for checkpointing.
    pub fn export_state(&self) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for (name, t) in &self.m {
            out.insert(format!("m.{name}"), t.clone());
        }
        for (name, t) in &self.v {
            out.insert(format!("v.{name}"), t.clone());
        }
        out.insert("t", Tensor::scalar(F::c(self.step as f64)));
        out
    }

    pub fn import_state(&mut self, state: &ParamStore<F>) -> Result<()> {
        self.m.clear();
        self.v.clear();
        for (name, t) in state.iter() {
            if let Some(n) = name.strip_prefix("m.") {
                self.m.insert(n.to_string(), t.clone());
            } else if let Some(n) = name.strip_prefix("v.") {
                self.v.insert(n.to_string(), t.clone());
            } else if name == "t" {
                self.step = t.item().to_f64_() as u64;
            } else {
                return Err(EsdtError::Config(format!(
                    "unexpected optimizer state entry {name}"
                )));
            }
        }
        Ok(())
    }
}
