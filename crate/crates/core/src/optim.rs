//! AdamW: Adam moments with bias correction and decoupled weight decay.

use crate::models::Model;
use crate::tensor::{Scalar, Tensor};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct MomentState<T> {
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Optimizer over a model's named parameters. State is keyed by parameter
/// name; parameters failing the `trainable` predicate are skipped entirely
/// (the freeze mechanism for backbone/head policies).
#[derive(Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step_count: u64,
    state: BTreeMap<String, MomentState<T>>,
    trainable: fn(&str) -> bool,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, trainable: fn(&str) -> bool) -> Self {
        AdamW {
            config,
            step_count: 0,
            state: BTreeMap::new(),
            trainable,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update: p -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * p.
    pub fn step(&mut self, model: &mut Model<T>) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let lr = T::from_f64(self.config.learning_rate);
        let wd = T::from_f64(self.config.weight_decay);
        let b1 = T::from_f64(self.config.beta1);
        let b2 = T::from_f64(self.config.beta2);
        let eps = T::from_f64(self.config.eps);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let one = T::one();

        let state = &mut self.state;
        let trainable = self.trainable;
        model.visit_params_mut(&mut |name, p| {
            if !trainable(name) {
                return;
            }
            let entry = state.entry(name.to_string()).or_insert_with(|| MomentState {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
            });
            let m = entry.m.data_mut();
            let v = entry.v.data_mut();
            let grad = p.grad.data();
            for ((pv, &g), (mi, vi)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pv = *pv - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * wd * *pv;
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Model, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn tiny_model() -> Model<f64> {
        let cfg = ModelConfig {
            input_shape: [8, 8, 8],
            stem_channels: 2,
            dense: crate::models::DenseParams {
                growth_rate: 2,
                block_layers: vec![1, 1],
            },
            ..Default::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        Model::build(&cfg, &mut rng).unwrap()
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params() {
        let mut model = tiny_model();
        let mut before = Vec::new();
        model.visit_params(&mut |_, p| before.push(p.value.clone()));
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            |_| true,
        );
        model.zero_grad();
        opt.step(&mut model);
        let mut i = 0;
        model.visit_params(&mut |_, p| {
            assert_eq!(p.value.data(), before[i].data());
            i += 1;
        });
    }

    #[test]
    fn first_step_matches_hand_computed_closed_form() {
        // single scalar p=1, g=0.5: m_hat = g, v_hat = g^2, so the step is
        // lr * g/(|g|+eps) + lr*wd*p
        let mut model = tiny_model();
        let cfg = AdamWConfig::default();
        let g = 0.5f64;
        model.visit_params_mut(&mut |name, p| {
            if name == "head.bias" {
                p.value.data_mut()[0] = 1.0;
                p.grad.data_mut()[0] = g;
            }
        });
        let mut opt = AdamW::new(cfg, |n| n == "head.bias");
        opt.step(&mut model);
        let expected = 1.0 - cfg.learning_rate * (g / (g + cfg.eps)) - cfg.learning_rate * cfg.weight_decay * 1.0;
        model.visit_params(&mut |name, p| {
            if name == "head.bias" {
                assert!((p.value.data()[0] - expected).abs() < 1e-15);
            }
        });
    }

    #[test]
    fn pure_decay_is_geometric() {
        let mut model = tiny_model();
        let cfg = AdamWConfig {
            learning_rate: 0.01,
            weight_decay: 0.1,
            ..Default::default()
        };
        model.visit_params_mut(&mut |name, p| {
            if name == "head.bias" {
                p.value.data_mut()[0] = 2.0;
            }
        });
        let mut opt = AdamW::new(cfg, |n| n == "head.bias");
        let steps = 10;
        for _ in 0..steps {
            model.zero_grad();
            opt.step(&mut model);
        }
        let expected = 2.0 * (1.0 - 0.01 * 0.1f64).powi(steps);
        model.visit_params(&mut |name, p| {
            if name == "head.bias" {
                assert!(
                    (p.value.data()[0] - expected).abs() < 1e-12,
                    "{} vs {expected}",
                    p.value.data()[0]
                );
            }
        });
    }

    #[test]
    fn two_steps_match_hand_recurrence() {
        // hand-evaluate the AdamW recurrence for two steps on one scalar
        let (lr, wd, b1, b2, eps) = (1e-2, 1e-3, 0.9, 0.999, 1e-8);
        let grads = [0.3f64, -0.7];
        let mut p_hand = 0.5f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            p_hand = p_hand - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * wd * p_hand;
        }

        let mut model = tiny_model();
        model.visit_params_mut(&mut |name, p| {
            if name == "head.bias" {
                p.value.data_mut()[0] = 0.5;
            }
        });
        let mut opt = AdamW::new(
            AdamWConfig {
                learning_rate: lr,
                weight_decay: wd,
                beta1: b1,
                beta2: b2,
                eps,
            },
            |n| n == "head.bias",
        );
        for &g in &grads {
            model.zero_grad();
            model.visit_params_mut(&mut |name, p| {
                if name == "head.bias" {
                    p.grad.data_mut()[0] = g;
                }
            });
            opt.step(&mut model);
        }
        model.visit_params(&mut |name, p| {
            if name == "head.bias" {
                assert!((p.value.data()[0] - p_hand).abs() < 1e-15);
            }
        });
    }

    #[test]
    fn frozen_params_never_move() {
        let mut model = tiny_model();
        let mut before = Vec::new();
        model.visit_params(&mut |n, p| {
            if !crate::models::is_backbone_param(n) {
                return;
            }
            before.push((n.to_string(), p.value.clone()));
        });
        // gradient everywhere, but only the head is trainable
        model.visit_params_mut(&mut |_, p| p.grad.fill(1.0));
        let mut opt = AdamW::new(AdamWConfig::default(), |n| {
            !crate::models::is_backbone_param(n)
        });
        opt.step(&mut model);
        let mut i = 0;
        model.visit_params(&mut |n, p| {
            if !crate::models::is_backbone_param(n) {
                return;
            }
            assert_eq!(p.value.data(), before[i].1.data(), "{n} moved");
            i += 1;
        });
    }
}
