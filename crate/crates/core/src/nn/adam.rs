use serde::{Deserialize, Serialize};

use super::{TensorMut, TensorRef};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    /// L2 penalty added to the gradient before the moment updates.
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over an ordered list of named tensors. Moment buffers are
/// allocated lazily on the first step and matched by position.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Update every tensor for which `trainable(name)` holds.
    pub fn step(
        &mut self,
        params: Vec<TensorMut<'_>>,
        grads: Vec<TensorRef<'_>>,
        trainable: impl Fn(&str) -> bool,
    ) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.data.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            debug_assert_eq!(p.name, g.name);
            if !trainable(&p.name) {
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.data.len() {
                let grad = g.data[i] + c.weight_decay * p.data[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad * grad;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut x = vec![3.0f32, -2.0];
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..500 {
            let g: Vec<f32> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(
                vec![TensorMut { name: "x".into(), data: &mut x }],
                vec![TensorRef { name: "x".into(), shape: vec![2], data: &g }],
                |_| true,
            );
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }

    #[test]
    fn skips_frozen_and_zero_lr() {
        let mut a = vec![1.0f32; 3];
        let mut b = vec![1.0f32; 3];
        let g = vec![0.5f32; 3];
        let mut opt = Adam::new(AdamConfig { lr: 0.0, ..Default::default() });
        opt.step(
            vec![
                TensorMut { name: "a".into(), data: &mut a },
                TensorMut { name: "b".into(), data: &mut b },
            ],
            vec![
                TensorRef { name: "a".into(), shape: vec![3], data: &g },
                TensorRef { name: "b".into(), shape: vec![3], data: &g },
            ],
            |n| n == "a",
        );
        assert_eq!(a, vec![1.0; 3]);
        assert_eq!(b, vec![1.0; 3]);
    }
}
