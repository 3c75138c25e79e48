//! Named parameter storage with Adam state.
//!
//! A [`ParamStore`] owns every learnable tensor of a model together with its
//! gradient accumulator and Adam moments. Entries are kept in a BTreeMap so
//! iteration (and therefore checkpoint layout) is deterministic.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{CoreError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 2e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig { learning_rate, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(CoreError::config("adam: learning_rate must be > 0"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 < b && b < 1.0) {
                return Err(CoreError::config(format!("adam: {name} must lie in (0,1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(CoreError::config("adam: epsilon must be > 0"));
        }
        Ok(())
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(CoreError::usage(format!("parameter `{name}` already exists")));
        }
        let shape = value.shape().to_vec();
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                grad: Tensor::zeros(shape.clone()),
                m: Tensor::zeros(shape.clone()),
                v: Tensor::zeros(shape),
            },
        );
        Ok(())
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.grad)
    }

    pub fn add_grad(&mut self, name: &str, delta: &Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| CoreError::usage(format!("unknown parameter `{name}`")))?;
        if entry.value.shape() != delta.shape() {
            return Err(CoreError::dimension(format!(
                "gradient shape {:?} != parameter shape {:?} for `{name}`",
                delta.shape(),
                entry.value.shape()
            )));
        }
        for (g, d) in entry.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }
}

/// Bias-corrected Adam update over every entry; gradients are zeroed after
/// the step. `step` counts from 1.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig, step: u64) -> Result<()> {
    if step < 1 {
        return Err(CoreError::usage("adam_step: step counts from 1"));
    }
    cfg.validate()?;
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for (name, e) in store.entries.iter_mut() {
        for i in 0..e.value.len() {
            let g = e.grad.data()[i];
            let m = cfg.beta1 * e.m.data()[i] + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * e.v.data()[i] + (1.0 - cfg.beta2) * g * g;
            e.m.data_mut()[i] = m;
            e.v.data_mut()[i] = v;
            let mhat = m / bc1;
            let vhat = v / bc2;
            e.value.data_mut()[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
        }
        e.value.ensure_finite(&format!("parameter `{name}` after adam_step"))?;
        e.grad.data_mut().fill(0.0);
    }
    Ok(())
}

/// Linearly decay a base learning rate to 2% over `total` steps. Training
/// loops use this; the tail of the schedule is what lets Adam settle
/// instead of jittering around the optimum.
pub fn linear_decay(base: f64, step: u64, total: u64) -> f64 {
    if total <= 1 {
        return base;
    }
    let frac = (step - 1) as f64 / (total - 1) as f64;
    base * (1.0 - 0.98 * frac)
}

/// Weight init used everywhere: N(0, 1/fan_in) entries, zero biases.
pub fn init_linear(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut Rng,
) -> Result<()> {
    let std = 1.0 / (fan_in as f64).sqrt();
    store.insert(&format!("{name}.w"), Tensor::randn(vec![fan_in, fan_out], std, rng))?;
    store.insert(&format!("{name}.b"), Tensor::zeros(vec![fan_out]))?;
    Ok(())
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, width: usize) -> Result<()> {
    store.insert(&format!("{name}.g"), Tensor::full(vec![width], 1.0))?;
    store.insert(&format!("{name}.b"), Tensor::zeros(vec![width]))?;
    Ok(())
}

pub fn init_conv1d(
    store: &mut ParamStore,
    name: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    rng: &mut Rng,
) -> Result<()> {
    if kernel % 2 == 0 {
        return Err(CoreError::config(format!("conv kernel must be odd, got {kernel}")));
    }
    let std = 1.0 / ((c_in * kernel) as f64).sqrt();
    store.insert(&format!("{name}.w"), Tensor::randn(vec![c_out, c_in, kernel], std, rng))?;
    store.insert(&format!("{name}.b"), Tensor::zeros(vec![c_out]))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![2], vec![0.5, -0.25]).unwrap()).unwrap();
        adam_step(&mut store, &AdamConfig::default(), 1).unwrap();
        assert_eq!(store.value("w").unwrap().data(), &[0.5, -0.25]);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // hand recurrence at step 1 with g=1:
        //   m=0.1, v=0.001, mhat=1, vhat=1 -> delta = lr / (1 + eps)
        let cfg = AdamConfig::with_lr(1e-2);
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0)).unwrap();
        store.add_grad("w", &Tensor::scalar(1.0)).unwrap();
        adam_step(&mut store, &cfg, 1).unwrap();
        let expected = 1.0 - 1e-2 / (1.0 + 1e-8);
        assert!((store.value("w").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_stores_step_identically() {
        let mut rng = crate::rng::seeded(11);
        let mut a = ParamStore::new();
        init_linear(&mut a, "lin", 4, 3, &mut rng).unwrap();
        let mut b = a.clone();
        let g = Tensor::randn(vec![4, 3], 1.0, &mut rng);
        a.add_grad("lin.w", &g).unwrap();
        b.add_grad("lin.w", &g).unwrap();
        let cfg = AdamConfig::default();
        adam_step(&mut a, &cfg, 1).unwrap();
        adam_step(&mut b, &cfg, 1).unwrap();
        assert_eq!(a.value("lin.w").unwrap(), b.value("lin.w").unwrap());
        // gradients zeroed after the step
        assert!(a.grad("lin.w").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_zero_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(0.0)).unwrap();
        assert!(adam_step(&mut store, &AdamConfig::default(), 0).is_err());
    }
}
