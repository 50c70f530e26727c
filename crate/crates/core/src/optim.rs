//! Adam with decoupled weight decay.

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::encoder::{Params, TrainableSet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Biases and layer-norm parameters are not decayed.
fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta"))
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<ArrayD<T>>,
    second: Vec<ArrayD<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every tensor in the trainable set, using `lr_scale`
    /// times the configured learning rate. `grads` must share the layout of
    /// `params`.
    pub fn step<P: Params<T>, G: Params<T>>(&mut self, params: &mut P, grads: &G, trainable: TrainableSet, lr_scale: f64) {
        let grads = grads.tensors();
        let params = params.tensors_mut();
        assert_eq!(params.len(), grads.len(), "gradient layout differs from parameters");
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| ArrayD::zeros(g.view.raw_dim())).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let c = &self.config;
        let lr = T::of(c.learning_rate * lr_scale);
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let eps = T::of(c.eps);
        let bias1 = T::one() - T::of(c.beta1.powi(self.step as i32));
        let bias2 = T::one() - T::of(c.beta2.powi(self.step as i32));
        for (((p, g), m), v) in params.into_iter().zip(&grads).zip(&mut self.first).zip(&mut self.second) {
            if !trainable.includes(p.group) {
                continue;
            }
            let wd = if decays(&p.name) { T::of(c.weight_decay) } else { T::zero() };
            let mut view = p.view;
            Zip::from(&mut view)
                .and(&g.view)
                .and(m)
                .and(v)
                .for_each(|w, &gr, m, v| {
                    *m = b1 * *m + (T::one() - b1) * gr;
                    *v = b2 * *v + (T::one() - b2) * gr * gr;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *w = *w - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *w);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Linear;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Linear::<f64> {
            weight: array![[1.0, -2.0]],
            bias: array![0.5, 0.0],
        };
        let g = Linear::<f64> {
            weight: array![[0.3, -4.0]],
            bias: array![1.0, 0.0],
        };
        let mut opt = AdamW::new(AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut p, &g, TrainableSet::All, 1.0);
        // Bias-corrected first step is lr * sign(g) (up to eps).
        assert!((p.weight[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p.weight[[0, 1]] + 1.9).abs() < 1e-6);
        assert!((p.bias[0] - 0.4).abs() < 1e-6);
        assert_eq!(p.bias[1], 0.0);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut p = Linear::<f32> {
            weight: array![[1.0, -2.0], [0.25, 3.0]],
            bias: array![0.5, -0.5],
        };
        let before = p.clone();
        let g = Linear::<f32> {
            weight: array![[0.3, -4.0], [1.0, 1.0]],
            bias: array![1.0, 2.0],
        };
        let mut opt = AdamW::new(AdamWConfig {
            learning_rate: 0.0,
            ..Default::default()
        });
        for _ in 0..10 {
            opt.step(&mut p, &g, TrainableSet::All, 1.0);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn weight_decay_skips_biases() {
        let mut p = Linear::<f64> {
            weight: array![[2.0]],
            bias: array![2.0],
        };
        let g = Linear::<f64>::zeros(1, 1);
        let mut opt = AdamW::new(AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        });
        opt.step(&mut p, &g, TrainableSet::All, 1.0);
        assert!((p.weight[[0, 0]] - 1.9).abs() < 1e-12);
        assert_eq!(p.bias[0], 2.0);
    }
}
