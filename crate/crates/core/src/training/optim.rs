//! Adam with bias correction, and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pocketnet::{Network, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state: first and second moments per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    pub params: AdamParams,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Real>(net: &Network<T>, params: AdamParams) -> Self {
        let sizes: Vec<usize> = net.params().iter().map(|p| p.numel()).collect();
        Adam {
            params,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from the gradients currently accumulated in `net`.
    pub fn step<T: Real>(&mut self, net: &mut Network<T>, lr: f64) {
        self.step += 1;
        let AdamParams { beta1, beta2, eps } = self.params;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in net.params_mut().into_iter().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i].f64();
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                if lr != 0.0 {
                    let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                    p.value[i] = T::lit(p.value[i].f64() - update);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

/// `lr_min + (lr0 − lr_min)·½(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Config(format!(
            "cosine step {step} outside 0..={total_steps}"
        )));
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr_min + (lr0 - lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

impl LrSchedule {
    /// Learning rate for `epoch` out of `epochs` (one scheduler step per epoch).
    pub fn lr(self, epoch: usize, epochs: usize, lr0: f64, lr_min: f64) -> Result<f64> {
        match self {
            LrSchedule::Constant => Ok(lr0),
            LrSchedule::Cosine => cosine_lr(epoch, epochs.max(1), lr0, lr_min),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pocketnet::ArchSpec;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 10, 1e-4, 0.0).unwrap(), 1e-4);
        assert!((cosine_lr(10, 10, 1e-4, 1e-6).unwrap() - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(5, 10, 1e-4, 2e-5).unwrap() - 6e-5).abs() < 1e-18);
        assert!(cosine_lr(11, 10, 1e-4, 0.0).is_err());
        assert!(cosine_lr(0, 0, 1e-4, 0.0).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let spec = ArchSpec {
            levels: 1,
            width: 2,
            ..ArchSpec::default()
        };
        let mut net = Network::<f64>::build(&spec).unwrap();
        let before: Vec<f64> = net.params()[0].value.clone();
        for p in net.params_mut() {
            p.grad.iter_mut().enumerate().for_each(|(i, g)| *g = if i % 2 == 0 { 3.0 } else { -0.5 });
        }
        let mut adam = Adam::new(&net, AdamParams::default());
        adam.step(&mut net, 1e-3);
        // Bias-corrected first step: m̂/√v̂ = sign(g) up to eps.
        for (i, (&a, &b)) in net.params()[0].value.iter().zip(&before).enumerate() {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            assert!((b - a - sign * 1e-3).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_lr_leaves_weights_bit_identical() {
        let mut net = Network::<f32>::build(&ArchSpec {
            levels: 2,
            width: 3,
            ..ArchSpec::default()
        })
        .unwrap();
        let before: Vec<Vec<f32>> = net.params().iter().map(|p| p.value.clone()).collect();
        for p in net.params_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.7);
        }
        let mut adam = Adam::new(&net, AdamParams::default());
        adam.step(&mut net, 0.0);
        let after: Vec<Vec<f32>> = net.params().iter().map(|p| p.value.clone()).collect();
        assert_eq!(before, after);
    }
}
