//! Named parameter groups and the AdamW optimizer.

use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;

pub trait NamedTensors {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)>;
    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    fn norm_summary(&self) -> String {
        self.tensors()
            .iter()
            .map(|(n, m)| format!("{n}={:.4e}", m.frobenius_norm()))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

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
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Moment buffers follow the tensor order
/// of the parameter group they were created for.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, shapes: &[(usize, usize)]) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn for_params(config: AdamWConfig, params: &[&Matrix]) -> Self {
        let shapes: Vec<_> = params.iter().map(|m| m.shape()).collect();
        Self::new(config, &shapes)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count");
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different group");
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= c.learning_rate * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p.data[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut x = Matrix::row_vector(vec![3.0, -2.0]);
        let cfg = AdamWConfig {
            learning_rate: 0.05,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::for_params(cfg, &[&x]);
        for _ in 0..2000 {
            let g = Matrix::row_vector(x.data.iter().map(|v| 2.0 * v).collect());
            opt.step(&mut [&mut x], &[g]);
        }
        assert!(x.data.iter().all(|v| v.abs() < 1e-2), "{:?}", x.data);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut x = Matrix::row_vector(vec![1.0]);
        let mut opt = AdamW::for_params(
            AdamWConfig {
                learning_rate: 0.1,
                weight_decay: 0.5,
                ..AdamWConfig::default()
            },
            &[&x],
        );
        opt.step(&mut [&mut x], &[Matrix::row_vector(vec![0.0])]);
        assert!((x.data[0] - 0.95).abs() < 1e-12);
    }
}
