use alloc::vec;
use alloc::vec::Vec;

use super::math::sqrt;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed list of parameter buffers.
///
/// Buffers are identified by position; every call to [`Adam::step`] must pass
/// them in the same order with the same lengths.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    t: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { config, t: 0, m, v }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Applies one update. `slot` pairs a parameter buffer with its gradient.
    pub fn step<'a, I>(&mut self, slots: I)
    where
        I: IntoIterator<Item = (&'a mut [f64], &'a [f64])>,
    {
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - libm::pow(beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.t as f64);
        for (k, (param, grad)) in slots.into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            debug_assert_eq!(param.len(), m.len());
            for i in 0..param.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param[i] -= lr * m_hat / (sqrt(v_hat) + eps);
            }
        }
    }
}
