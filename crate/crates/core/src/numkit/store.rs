//! Named parameter storage with paired gradient accumulators.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numkit::DenseMatrix;

/// One trainable parameter and its gradient accumulator (same shape).
#[derive(Debug, Clone)]
pub struct Param {
    pub value: DenseMatrix,
    pub grad: DenseMatrix,
}

/// A deterministic map from parameter name to [`Param`]. Iteration order is
/// lexicographic, which the SGD step, the checkpoint format, and the
/// finite-difference checker all rely on.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; its gradient starts at zero.
    pub fn insert(&mut self, name: impl Into<String>, value: DenseMatrix) {
        let grad = DenseMatrix::zeros(value.rows(), value.cols());
        self.params.insert(name.into(), Param { value, grad });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Panics if the parameter is missing; parameter names are fixed by the
    /// model that owns the store, so a miss is a programming error.
    pub fn value(&self, name: &str) -> &DenseMatrix {
        &self.params.get(name).unwrap_or_else(|| panic!("no parameter named {name}")).value
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Param {
        self.params.get_mut(name).unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn grad(&self, name: &str) -> &DenseMatrix {
        &self.params.get(name).unwrap_or_else(|| panic!("no parameter named {name}")).grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.values().len()).sum()
    }
}

/// Plain SGD: each parameter is decremented by `learning_rate · grad`, then
/// all gradients are reset to zero.
pub fn sgd_step(store: &mut ParamStore, learning_rate: f64) -> Result<()> {
    if learning_rate <= 0.0 || !learning_rate.is_finite() {
        return Err(Error::config(format!(
            "learning rate must be positive, got {learning_rate}"
        )));
    }
    for (_, p) in store.iter_mut() {
        let g = p.grad.values().to_vec();
        for (v, gi) in p.value.values_mut().iter_mut().zip(&g) {
            *v -= learning_rate * gi;
        }
        p.grad.fill(0.0);
    }
    Ok(())
}

/// Velocity buffers for [`sgd_step_momentum`], keyed like the store.
#[derive(Debug, Clone, Default)]
pub struct MomentumState {
    velocity: BTreeMap<String, Vec<f64>>,
}

/// SGD with fixed momentum: v ← m·v + g; θ ← θ − lr·v. Gradients are reset
/// afterwards. Momentum 0 reduces to [`sgd_step`].
pub fn sgd_step_momentum(
    store: &mut ParamStore,
    learning_rate: f64,
    momentum: f64,
    state: &mut MomentumState,
) -> Result<()> {
    if learning_rate <= 0.0 || !learning_rate.is_finite() {
        return Err(Error::config(format!(
            "learning rate must be positive, got {learning_rate}"
        )));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::config(format!("momentum must be in [0,1), got {momentum}")));
    }
    for (name, p) in store.iter_mut() {
        let n = p.value.values().len();
        let v = state.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        for ((theta, g), vi) in
            p.value.values_mut().iter_mut().zip(p.grad.values()).zip(v.iter_mut())
        {
            *vi = momentum * *vi + g;
            *theta -= learning_rate * *vi;
        }
        p.grad.fill(0.0);
    }
    Ok(())
}
