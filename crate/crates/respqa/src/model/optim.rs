//! AdamW with decoupled weight decay and global-norm gradient clipping,
//! applied only to trainable parameters.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            batch_size: 4,
            eval_batch_size: 1,
            max_epochs: 100,
            patience: 10,
        }
    }
}

pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

/// Euclidean norm over the concatenation of all gradient buffers.
pub fn global_grad_norm(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Scale factor that caps the global norm at `clip`.
pub fn clip_scale(norm: f64, clip: f64) -> f64 {
    if norm > clip && norm > 0.0 {
        clip / norm
    } else {
        1.0
    }
}

impl AdamW {
    pub fn new(params: &[(String, Tensor)]) -> Self {
        AdamW {
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            t: 0,
        }
    }

    /// One update over `params` (the same registry slice used at
    /// construction). Missing gradients count as zero; gradients are
    /// cleared afterwards. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &[(String, Tensor)], cfg: &OptimizerConfig) -> f64 {
        let grads: Vec<Vec<f64>> = params
            .iter()
            .map(|(_, t)| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        let norm = global_grad_norm(&grads);
        let scale = clip_scale(norm, cfg.clip_norm);
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, (_, tensor)) in params.iter().enumerate() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            tensor.map_data(|data| {
                for j in 0..data.len() {
                    let gj = g[j] * scale;
                    m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                    v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    data[j] -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * data[j]);
                }
            });
            tensor.zero_grad();
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> Vec<(String, Tensor)> {
        vec![
            ("a".into(), Tensor::from_vec(vec![2], vec![1.0, -2.0], true)),
            ("b".into(), Tensor::from_vec(vec![1], vec![0.5], true)),
        ]
    }

    #[test]
    fn zero_lr_is_bit_identical() {
        let ps = params();
        ps[0].1.accumulate_grad(&[3.0, -1.0]);
        ps[1].1.accumulate_grad(&[2.0]);
        let before: Vec<u64> = ps
            .iter()
            .flat_map(|(_, t)| t.to_vec().into_iter().map(f64::to_bits))
            .collect();
        let mut opt = AdamW::new(&ps);
        let cfg = OptimizerConfig {
            lr: 0.0,
            ..OptimizerConfig::default()
        };
        opt.step(&ps, &cfg);
        let after: Vec<u64> = ps
            .iter()
            .flat_map(|(_, t)| t.to_vec().into_iter().map(f64::to_bits))
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn clipping_caps_global_norm_at_one() {
        // Gradient of global norm 5 under clip 1.0 -> applied norm 1 +- 1e-9.
        let g = vec![vec![3.0, 4.0]]; // norm 5
        let norm = global_grad_norm(&g);
        assert_eq!(norm, 5.0);
        let s = clip_scale(norm, 1.0);
        let clipped: Vec<f64> = g[0].iter().map(|v| v * s).collect();
        let clipped_norm = global_grad_norm(&[clipped]);
        assert!((clipped_norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn small_norm_not_scaled() {
        assert_eq!(clip_scale(0.5, 1.0), 1.0);
        assert_eq!(clip_scale(0.0, 1.0), 1.0);
    }

    #[test]
    fn update_moves_against_gradient() {
        let ps = params();
        ps[0].1.accumulate_grad(&[1.0, -1.0]);
        let mut opt = AdamW::new(&ps);
        let cfg = OptimizerConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        opt.step(&ps, &cfg);
        let d = ps[0].1.to_vec();
        assert!(d[0] < 1.0, "positive grad should decrease the weight");
        assert!(d[1] > -2.0, "negative grad should increase the weight");
    }
}
