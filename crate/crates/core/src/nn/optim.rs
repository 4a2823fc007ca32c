use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Param;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam without weight decay. Moments are keyed by parameter name so the
/// state survives a checkpoint round trip.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<String, (Array2<f32>, Array2<f32>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update to every trainable parameter, then clears all
    /// gradients (frozen ones included).
    pub fn step(&mut self, params: Vec<(String, &mut Param)>) {
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let lr = (learning_rate * bc2.sqrt() / bc1) as f32;
        let (b1, b2, eps) = (beta1 as f32, beta2 as f32, epsilon as f32);
        for (name, p) in params {
            if p.trainable {
                let (m, v) = self
                    .moments
                    .entry(name)
                    .or_insert_with(|| (Array2::zeros(p.value.raw_dim()), Array2::zeros(p.value.raw_dim())));
                ndarray::Zip::from(&mut p.value)
                    .and(&p.grad)
                    .and(m)
                    .and(v)
                    .for_each(|w, &g, m, v| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *w -= lr * *m / (v.sqrt() + eps);
                    });
            }
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Param::new(array![[3.0f32, -2.0]]);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        for _ in 0..500 {
            p.grad = p.value.mapv(|w| 2.0 * w);
            opt.step(vec![("p".into(), &mut p)]);
        }
        assert!(p.value.iter().all(|w| w.abs() < 1e-2));
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut p = Param::new(array![[1.0f32]]);
        p.trainable = false;
        p.grad.fill(5.0);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        opt.step(vec![("p".into(), &mut p)]);
        assert_eq!(p.value[[0, 0]], 1.0);
        assert_eq!(p.grad[[0, 0]], 0.0);
    }
}
