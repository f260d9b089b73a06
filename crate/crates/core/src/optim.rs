use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::model::NetworkSplit;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub name: OptimizerName,
    pub learning_rate: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Sgd,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { name: OptimizerName::Sgd, learning_rate: 1e-3, momentum: 0.9 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        Ok(())
    }
}

/// Stochastic gradient descent with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    learning_rate: f64,
    momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(config: &OptimizerConfig) -> Self {
        Self { learning_rate: config.learning_rate, momentum: config.momentum, velocity: Vec::new() }
    }

    /// `v <- momentum * v + g; p <- p - lr * v`, parameters and gradients in matching order.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        debug_assert_eq!(params.len(), grads.len());
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.learning_rate * *vv;
            }
        }
    }

    /// Updates a network in place. Frozen networks are left untouched and
    /// `false` is returned.
    pub fn step_network(&mut self, net: &mut NetworkSplit, grads: &[Tensor]) -> bool {
        match net.parameters_mut() {
            Some(params) => {
                self.step(params, grads);
                true
            }
            None => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_small_cnn, freeze};

    #[test]
    fn frozen_network_ignores_steps() {
        let mut net = freeze(&build_small_cnn(10, 4, 0).unwrap());
        let before = net.flat_parameters();
        let grads: Vec<Tensor> = net.named_parameters().iter().map(|(_, t)| Tensor::full(t.shape(), 1.0)).collect();
        let mut opt = Sgd::new(&OptimizerConfig::default());
        for _ in 0..10 {
            assert!(!opt.step_network(&mut net, &grads));
        }
        let after = net.flat_parameters();
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = Tensor::zeros(&[1]);
        let mut opt = Sgd::new(&OptimizerConfig { learning_rate: 0.1, momentum: 0.5, ..Default::default() });
        let g = [Tensor::full(&[1], 1.0)];
        opt.step(alloc::vec![&mut p], &g);
        opt.step(alloc::vec![&mut p], &g);
        // v = 1 then 1.5; p = -0.1 then -0.25
        assert!((p.data()[0] + 0.25).abs() < 1e-15);
    }
}
