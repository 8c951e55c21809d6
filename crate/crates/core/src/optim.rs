//! SGD with momentum and the 1-cycle learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::network::{ParamRole, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Result<Self> {
        if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
            return Err(Error::Argument(format!(
                "invalid SGD settings lr={lr} momentum={momentum} weight_decay={weight_decay}"
            )));
        }
        Ok(Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        })
    }

    /// `v = μ·v + g + wd·θ; θ -= lr·v` for every updatable parameter.
    ///
    /// Gates never receive weight decay; their only regularizer is the
    /// explicit sparse term. A velocity buffer whose shape no longer matches
    /// its parameter (after pruning) restarts from zero.
    pub fn step(&mut self, params: &mut ParamStore) {
        for (name, p) in params.iter_mut() {
            if !p.updatable {
                continue;
            }
            let wd = if p.role == ParamRole::Gate { 0.0 } else { self.weight_decay };
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            if v.shape() != p.value.shape() {
                *v = Tensor::zeros(p.value.shape());
            }
            let (value, grad) = (p.value.data_mut(), p.grad.data());
            for ((vel, val), g) in v.data_mut().iter_mut().zip(value.iter_mut()).zip(grad) {
                *vel = self.momentum * *vel + g + wd * *val;
                *val -= self.lr * *vel;
            }
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.get(name)
    }
}

/// Piecewise-linear 1-cycle schedule: `lr_low → lr_high` over the first half
/// of `total` steps and back down over the second half.
pub fn one_cycle_lr(step: usize, total: usize, lr_low: f32, lr_high: f32) -> Result<f32> {
    if total == 0 {
        return Err(Error::Argument("one-cycle schedule needs at least one step".into()));
    }
    if step >= total || lr_low > lr_high {
        return Err(Error::Argument(format!(
            "one-cycle step {step} of {total} with lr {lr_low}..{lr_high}"
        )));
    }
    let half = total as f64 / 2.0;
    let s = step as f64;
    let frac = if s <= half { s / half } else { (total as f64 - s) / half };
    Ok((lr_low as f64 + (lr_high - lr_low) as f64 * frac) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Parameter;

    fn store(value: f32, grad: f32) -> ParamStore {
        let mut p = Parameter::new(Tensor::full(&[1], value), ParamRole::Weight);
        p.grad = Tensor::full(&[1], grad);
        let mut s = ParamStore::new();
        s.insert("w".into(), p);
        s
    }

    #[test]
    fn plain_step() {
        let mut s = store(1.0, 0.5);
        Sgd::new(0.1, 0.0, 0.0).unwrap().step(&mut s);
        assert!((s["w"].value.data()[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn frozen_is_untouched() {
        let mut s = store(1.2345, 0.5);
        s.get_mut("w").unwrap().updatable = false;
        let mut opt = Sgd::new(0.1, 0.9, 1e-2).unwrap();
        for _ in 0..5 {
            opt.step(&mut s);
        }
        assert_eq!(s["w"].value.data()[0].to_bits(), 1.2345f32.to_bits());
    }

    #[test]
    fn momentum_second_delta() {
        let (lr, g) = (0.1f32, 0.25f32);
        let mut s = store(0.0, g);
        let mut opt = Sgd::new(lr, 0.9, 0.0).unwrap();
        opt.step(&mut s);
        let after1 = s["w"].value.data()[0];
        opt.step(&mut s);
        let delta2 = after1 - s["w"].value.data()[0];
        assert!((delta2 - lr * 1.9 * g).abs() < 1e-7);
    }

    #[test]
    fn gates_skip_weight_decay() {
        let mut p = Parameter::new(Tensor::full(&[1], 2.0), ParamRole::Gate);
        p.grad = Tensor::zeros(&[1]);
        let mut s = ParamStore::new();
        s.insert("g.phi".into(), p);
        Sgd::new(0.1, 0.0, 0.5).unwrap().step(&mut s);
        assert_eq!(s["g.phi"].value.data()[0], 2.0);
    }

    #[test]
    fn one_cycle_points() {
        assert_eq!(one_cycle_lr(0, 100, 1e-3, 1e-2).unwrap(), 1e-3);
        assert!((one_cycle_lr(50, 100, 1e-3, 1e-2).unwrap() - 1e-2).abs() < 1e-9);
        assert!((one_cycle_lr(25, 100, 1e-3, 1e-2).unwrap() - 5.5e-3).abs() < 1e-9);
        assert!((one_cycle_lr(75, 100, 1e-3, 1e-2).unwrap() - 5.5e-3).abs() < 1e-9);
        assert!(one_cycle_lr(0, 0, 1e-3, 1e-2).is_err());
    }
}
