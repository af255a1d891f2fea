//! SGD with momentum and weight decay, plus the step learning-rate schedule.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::ParamGroup;

/// Gradients keyed by `"<group>.<param>"`.
pub type GradMap = HashMap<String, Vec<f64>>;

pub fn param_key(group: &str, param: &str) -> String {
    format!("{}.{}", group, param)
}

/// `lr = base_lr * gamma^floor(iter / step_size)`.
pub fn lr_schedule(base_lr: f64, iter: usize, step_size: usize, gamma: f64) -> f64 {
    if step_size == 0 {
        return base_lr;
    }
    base_lr * gamma.powi((iter / step_size) as i32)
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// `v <- momentum * v + grad + weight_decay * p; p <- p - lr * v` for every
    /// parameter of a trainable group. Frozen groups are not read or written.
    /// A trainable parameter without a gradient entry is treated as having a
    /// zero gradient.
    pub fn step(&mut self, groups: &mut [ParamGroup], grads: &GradMap, lr: f64) -> Result<()> {
        for group in groups.iter_mut().filter(|g| g.trainable) {
            let gname = group.name.clone();
            for (pname, param) in group.iter_mut() {
                let key = param_key(&gname, pname);
                let grad = grads.get(&key);
                if let Some(g) = grad {
                    if g.len() != param.numel() {
                        return Err(Error::shape(
                            "sgd_step",
                            format!(
                                "gradient for {} has {} values, parameter {:?}",
                                key,
                                g.len(),
                                param.shape()
                            ),
                        ));
                    }
                }
                let v = self
                    .velocity
                    .entry(key)
                    .or_insert_with(|| vec![0.0; param.numel()]);
                for (i, (p, vi)) in param.data_mut().iter_mut().zip(v.iter_mut()).enumerate() {
                    let g = grad.map_or(0.0, |g| g[i]);
                    *vi = self.momentum * *vi + g + self.weight_decay * *p;
                    *p -= lr * *vi;
                }
            }
        }
        Ok(())
    }
}

/// One plain step with an explicit optimizer state of zero velocity.
pub fn sgd_step(
    groups: &mut [ParamGroup],
    grads: &GradMap,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    Sgd::new(momentum, weight_decay).step(groups, grads, lr)
}
