//! SGD with classical momentum: `v <- mu*v - eps*g`, `theta <- theta + v`.

use serde::{Deserialize, Serialize};

use crate::network::ParamSet;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerState {
    velocity: ParamSet,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, learning_rate: f64, momentum: f64) -> Self {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        assert!((0.0..1.0).contains(&momentum), "momentum must be in [0, 1)");
        OptimizerState { velocity: params.zeros_like(), learning_rate, momentum }
    }

    /// Plain SGD (momentum 0).
    pub fn sgd(params: &ParamSet, learning_rate: f64) -> Self {
        Self::new(params, learning_rate, 0.0)
    }

    pub fn velocity(&self) -> &ParamSet {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        debug_assert!(params.same_shapes(grads));
        let mu = self.momentum;
        let eps = self.learning_rate;
        for ((v, g), p) in self
            .velocity
            .values_mut()
            .zip(grads.values())
            .zip(params.values_mut())
        {
            *v = mu * *v - eps * g;
            *p += *v;
        }
    }
}
