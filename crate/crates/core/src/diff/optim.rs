use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum OptimizerRule {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerRule {
    pub fn adam(lr: f64) -> Self {
        OptimizerRule::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerRule::Sgd { lr } | OptimizerRule::Adam { lr, .. } => lr,
        }
    }
}

/// Stateful optimizer; moment buffers follow the parameter manifest order.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub rule: OptimizerRule,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(rule: OptimizerRule) -> Self {
        Optimizer {
            rule,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from `params.grad`, then zeroes the gradients.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if let Some(bad) = params.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::NonFiniteGradient(bad.name.clone()));
        }
        self.step += 1;
        match self.rule {
            OptimizerRule::Sgd { lr } => {
                for p in params.iter_mut() {
                    let (value, grad) = (p.value.data_mut(), p.grad.data());
                    for (v, g) in value.iter_mut().zip(grad) {
                        *v -= lr * g;
                    }
                }
            }
            OptimizerRule::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                if self.first.len() != params.len() {
                    self.first = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
                    self.second = self.first.clone();
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    let (value, grad) = (p.value.data_mut(), p.grad.data());
                    for (((x, &g), m), v) in value
                        .iter_mut()
                        .zip(grad)
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *x -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        params.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParamSet {
        let mut p = ParamSet::new();
        let id = p.add("x", Tensor::scalar(value)).unwrap();
        p.get_mut(id).grad = Tensor::scalar(grad);
        p
    }

    #[test]
    fn sgd_rule() {
        let mut p = single(1.0, 2.0);
        Optimizer::new(OptimizerRule::Sgd { lr: 0.1 }).step(&mut p).unwrap();
        assert!((p.by_name("x").unwrap().value.item() - 0.8).abs() < 1e-15);
        assert_eq!(p.by_name("x").unwrap().grad.item(), 0.0);
    }

    #[test]
    fn zero_gradient_keeps_values() {
        for rule in [OptimizerRule::Sgd { lr: 0.5 }, OptimizerRule::adam(0.5)] {
            let mut p = single(3.0, 0.0);
            Optimizer::new(rule).step(&mut p).unwrap();
            assert_eq!(p.by_name("x").unwrap().value.item(), 3.0);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [-5.0, 0.01, 3.0] {
            let mut p = single(1.0, g);
            Optimizer::new(OptimizerRule::adam(0.01)).step(&mut p).unwrap();
            let moved = 1.0 - p.by_name("x").unwrap().value.item();
            assert!((moved.abs() - 0.01).abs() < 1e-6, "{moved}");
            assert_eq!(moved.signum(), g.signum());
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = single(1.0, f64::NAN);
        match Optimizer::new(OptimizerRule::adam(0.1)).step(&mut p) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "x"),
            other => panic!("{other:?}"),
        }
    }
}
