//! AdamW with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::mlm::autograd::Grads;
use crate::mlm::tensor::Tensor;
use crate::mlm::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.rows, p.cols))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    let coef = max_norm / (norm + 1e-6);
    if coef < 1.0 {
        grads.scale(coef);
    }
    norm
}

/// One decoupled-weight-decay Adam step with bias correction. Parameters
/// and moments are kept `f32`-representable.
pub fn adam_step(params: &mut ParamSet, grads: &Grads, state: &mut AdamState, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let step_size = cfg.learning_rate * bc2.sqrt() / bc1;
    for i in 0..params.tensors.len() {
        let decay = params.decay[i];
        let p = &mut params.tensors[i].data;
        let g = &grads.tensors[i].data;
        let m = &mut state.m[i].data;
        let v = &mut state.v[i].data;
        for j in 0..p.len() {
            let mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            let vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            m[j] = f64::from(mj as f32);
            v[j] = f64::from(vj as f32);
            let mut pj = p[j] - step_size * m[j] / (v[j].sqrt() + cfg.epsilon);
            if decay && cfg.weight_decay > 0.0 {
                pj -= cfg.learning_rate * cfg.weight_decay * pj;
            }
            p[j] = f64::from(pj as f32);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = Grads {
            tensors: vec![Tensor::from_vec(1, 3, vec![300.0, -400.0, 1000.0])],
        };
        let before = clip_grad_norm(&mut g, 1.0);
        assert!(before > 1000.0);
        assert!(g.global_norm() <= 1.0);
        let mut small = Grads {
            tensors: vec![Tensor::from_vec(1, 2, vec![0.3, 0.4])],
        };
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small.tensors[0].data, vec![0.3, 0.4]);
    }

    #[test]
    fn first_step_moves_against_gradient_by_lr() {
        let mut params = ParamSet {
            names: vec!["w".into()],
            tensors: vec![Tensor::from_vec(1, 2, vec![0.5, -0.5])],
            decay: vec![false],
        };
        let grads = Grads {
            tensors: vec![Tensor::from_vec(1, 2, vec![2.0, -3.0])],
        };
        let mut st = AdamState::new(&params.tensors);
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        };
        adam_step(&mut params, &grads, &mut st, &cfg);
        // bias-corrected first step is lr * sign(g)
        assert!((params.tensors[0].data[0] - 0.49).abs() < 1e-6);
        assert!((params.tensors[0].data[1] + 0.49).abs() < 1e-6);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn weight_decay_only_on_flagged_tensors() {
        let mut params = ParamSet {
            names: vec!["w".into(), "b".into()],
            tensors: vec![Tensor::scalar(1.0), Tensor::scalar(1.0)],
            decay: vec![true, false],
        };
        let grads = Grads {
            tensors: vec![Tensor::scalar(0.0), Tensor::scalar(0.0)],
        };
        let mut st = AdamState::new(&params.tensors);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        adam_step(&mut params, &grads, &mut st, &cfg);
        assert!((params.tensors[0].data[0] - 0.95).abs() < 1e-7);
        assert_eq!(params.tensors[1].data[0], 1.0);
    }
}
