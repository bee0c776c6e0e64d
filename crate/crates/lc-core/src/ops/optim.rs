//! SGD with momentum and weight decay.

use std::collections::HashMap;

use crate::tensor::{Elem, Tensor};

/// Momentum-SGD state. Velocity buffers are keyed by parameter name and
/// created on first use, mirroring each parameter's shape.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Elem> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<T>>,
}

impl<T: Elem> OptimizerState<T> {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> OptimizerState<T> {
        OptimizerState {
            learning_rate,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&[T]> {
        self.velocity.get(name).map(|v| v.as_slice())
    }

    pub fn velocity_entries(&self) -> impl Iterator<Item = (&String, &Vec<T>)> {
        self.velocity.iter()
    }

    pub fn insert_velocity(&mut self, name: String, v: Vec<T>) {
        self.velocity.insert(name, v);
    }

    /// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
    ///
    /// Frozen parameters are untouched. Parameters whose gradient is
    /// identically zero are also left untouched (velocity included): a
    /// cascade stage that received no contributing pixels this step must
    /// not drift under weight decay or stale momentum.
    pub fn step_param(&mut self, name: &str, param: &mut Tensor<T>, grad: &[T], frozen: bool) {
        if frozen {
            return;
        }
        debug_assert_eq!(param.len(), grad.len(), "grad shape mismatch for {name}");
        if grad.iter().all(|g| *g == T::ZERO) {
            return;
        }
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![T::ZERO; param.len()]);
        let m = T::from_f64(self.momentum);
        let wd = T::from_f64(self.weight_decay);
        let lr = T::from_f64(self.learning_rate);
        for ((p, vel), g) in param.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
            *vel = m * *vel + *g + wd * *p;
            *p = *p - lr * *vel;
        }
    }
}
