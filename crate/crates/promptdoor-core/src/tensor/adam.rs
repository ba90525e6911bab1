//! Adam optimizer over named parameter tensors.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Standard Adam with bias correction. Moment buffers are keyed by parameter
/// name and allocated lazily on first update, always matching the parameter
/// shape. The step counter increases once per `step` call.
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: IndexMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, moments: IndexMap::new() }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every `(name, tensor)` pair. Each tensor must
    /// carry a populated gradient; a missing gradient on a parameter handed
    /// to the optimizer is a contract violation.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let b1 = self.cfg.beta1 as f64;
        let b2 = self.cfg.beta2 as f64;
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        for (name, tensor) in params {
            let grad = tensor.grad.take().ok_or_else(|| {
                Error::contract(format!("parameter `{name}` has no gradient"))
            })?;
            if grad.len() != tensor.numel() {
                return Err(Error::contract(format!(
                    "parameter `{name}` gradient length mismatch"
                )));
            }
            let entry = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            if entry.m.len() != grad.len() {
                return Err(Error::contract(format!(
                    "parameter `{name}` changed shape mid-training"
                )));
            }
            let lr = self.cfg.lr as f64;
            let eps = self.cfg.epsilon as f64;
            let data = tensor.data_mut();
            for i in 0..grad.len() {
                let g = grad[i] as f64;
                let m = b1 * entry.m[i] as f64 + (1.0 - b1) * g;
                let v = b2 * entry.v[i] as f64 + (1.0 - b2) * g * g;
                entry.m[i] = m as f32;
                entry.v[i] = v as f32;
                let mhat = m / bc1;
                let vhat = v / bc2;
                data[i] = (data[i] as f64 - lr * mhat / (vhat.sqrt() + eps)) as f32;
            }
            tensor.grad = Some(grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_means_zero_update() {
        let mut p = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        p.set_grad(vec![0.0; 3]).unwrap();
        let before = p.data().to_vec();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step([("p", &mut p)]).unwrap();
        assert_eq!(p.data(), &before[..]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn single_step_matches_hand_rolled_oracle() {
        // One scalar, g=1, lr=0.1: bias corrections cancel on step 1 and the
        // update magnitude is lr / (1 + eps) ~= lr.
        let mut p = Tensor::from_vec(vec![1], vec![0.5]).unwrap();
        p.set_grad(vec![1.0]).unwrap();
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let mut opt = Adam::new(cfg);
        opt.step([("p", &mut p)]).unwrap();
        let expected = 0.5 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p.data()[0] - expected).abs() < 1e-6, "{}", p.data()[0]);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = Tensor::from_vec(vec![2], vec![0.3, -0.7]).unwrap();
            let mut opt = Adam::new(AdamConfig::default());
            for step in 0..25 {
                let g = vec![0.1 * (step as f32 % 3.0) - 0.05, -0.2];
                p.set_grad(g).unwrap();
                opt.step([("p", &mut p)]).unwrap();
            }
            p.data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_grad_is_a_contract_error() {
        let mut p = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        assert!(matches!(opt.step([("p", &mut p)]), Err(Error::Contract(_))));
    }
}
