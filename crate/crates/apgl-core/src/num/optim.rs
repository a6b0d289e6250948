//! Named parameter registry and Adam optimizer.
//!
//! Parameters live outside the tape; each training step copies values
//! onto tape leaves, runs backward, writes gradients back here, and the
//! optimizer updates in place. Iteration order is insertion order, so a
//! fixed registration sequence makes updates bit-reproducible.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::num::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ParamState {
    pub value: Tensor,
    pub grad: Tensor,
    m: Tensor,
    v: Tensor,
    step: u64,
}

impl ParamState {
    fn new(value: Tensor) -> Self {
        let dims = value.dims().to_vec();
        ParamState {
            value,
            grad: Tensor::zeros(&dims),
            m: Tensor::zeros(&dims),
            v: Tensor::zeros(&dims),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamRegistry {
    params: IndexMap<String, ParamState>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        ParamRegistry::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) {
        assert!(
            !self.params.contains_key(name),
            "parameter {name} registered twice"
        );
        self.params.insert(name.to_string(), ParamState::new(value));
    }

    /// Gaussian init with the given std; biases and norm parameters are
    /// registered explicitly with fixed values instead.
    pub fn register_randn(&mut self, name: &str, dims: &[usize], std: f64, rng: &mut impl Rng) {
        self.register(name, Tensor::randn(dims, std, rng));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn value(&self, name: &str) -> &Tensor {
        &self.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        &self.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).grad
    }

    pub fn set_grad(&mut self, name: &str, grad: Tensor) {
        let st = self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(
            st.value.dims(),
            grad.dims(),
            "gradient shape for {name}: {:?} vs {:?}",
            st.value.dims(),
            grad.dims()
        );
        st.grad = grad;
    }

    pub fn zero_grads(&mut self) {
        for st in self.params.values_mut() {
            st.grad.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamState)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|s| s.value.len()).sum()
    }

    /// Fail if any gradient picked up a NaN/Inf, naming the parameter.
    pub fn check_finite_grads(&self) -> Result<()> {
        for (name, st) in self.params.iter() {
            if !st.grad.is_finite() {
                return Err(CoreError::NonFinite {
                    what: "gradient",
                    detail: format!("parameter {name}"),
                });
            }
        }
        Ok(())
    }

    pub fn check_finite_values(&self) -> Result<()> {
        for (name, st) in self.params.iter() {
            if !st.value.is_finite() {
                return Err(CoreError::NonFinite {
                    what: "parameter",
                    detail: format!("parameter {name}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CoreError::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(CoreError::InvalidConfig(format!(
                    "{name} must be in [0, 1), got {b}"
                )));
            }
        }
        if !(self.eps > 0.0) {
            return Err(CoreError::InvalidConfig(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// One Adam update over every parameter: bias-corrected first/second
/// moments, epsilon added outside the square root.
pub fn adam_step(registry: &mut ParamRegistry, cfg: &AdamConfig) {
    for st in registry.params.values_mut() {
        st.step += 1;
        let t = st.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let n = st.value.len();
        for j in 0..n {
            let g = st.grad.data()[j];
            let m = cfg.beta1 * st.m.data()[j] + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * st.v.data()[j] + (1.0 - cfg.beta2) * g * g;
            st.m.data_mut()[j] = m;
            st.v.data_mut()[j] = v;
            let mhat = m / bc1;
            let vhat = v / bc2;
            st.value.data_mut()[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}
