//! AdamW with global-norm gradient clipping.
//!
//! One step:
//!
//! ```text
//! g      = g * min(1, clip / ||g||)
//! theta  = theta * (1 - lr * weight_decay)
//! m      = beta1 * m + (1 - beta1) * g
//! v      = beta2 * v + (1 - beta2) * g^2
//! theta -= lr * (m / (1 - beta1^k)) / (sqrt(v / (1 - beta2^k)) + eps)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            weight_decay: 1e-3,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators, step counter and current learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F = f32> {
    pub first_moment: Vec<F>,
    pub second_moment: Vec<F>,
    pub step: u64,
    pub lr: f64,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            first_moment: vec![F::zero(); num_params],
            second_moment: vec![F::zero(); num_params],
            step: 0,
            lr,
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut [F], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| {
            let g = g.f64();
            g * g
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = F::of(max_norm / norm);
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

/// Applies one clipped AdamW update. `grads` is clipped in place.
/// Returns the gradient norm before clipping.
pub fn optimizer_step<F: Real>(
    params: &mut [F],
    grads: &mut [F],
    state: &mut OptimizerState<F>,
    cfg: &AdamWConfig,
) -> Result<f64> {
    if params.len() != grads.len() || state.first_moment.len() != params.len() {
        return Err(Error::Shape(format!(
            "optimizer: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Diverged(format!(
            "non-finite gradient at parameter index {i}"
        )));
    }
    let norm = clip_global_norm(grads, cfg.clip_norm);
    state.step += 1;
    let k = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(k);
    let bc2 = 1.0 - cfg.beta2.powi(k);
    let decay = F::of(1.0 - state.lr * cfg.weight_decay);
    let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
    let (one_b1, one_b2) = (F::of(1.0 - cfg.beta1), F::of(1.0 - cfg.beta2));
    let step_size = F::of(state.lr / bc1);
    let bc2_sqrt = F::of(bc2.sqrt());
    let eps = F::of(cfg.eps);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *p *= decay;
        *m = b1 * *m + one_b1 * g;
        *v = b2 * *v + one_b2 * g * g;
        *p -= step_size * *m / (v.sqrt() / bc2_sqrt + eps);
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_gradients_without_decay_leave_params() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut params = vec![0.5f64, -1.25, 3.0];
        let before = params.clone();
        let mut state = OptimizerState::new(3, 1e-2);
        for _ in 0..5 {
            optimizer_step(&mut params, &mut [0.0; 3], &mut state, &cfg).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(state.step, 5);
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let mut params = vec![0.5f32, -1.25];
        let before = params.clone();
        let mut state = OptimizerState::new(2, 0.0);
        optimizer_step(&mut params, &mut [0.3, -0.7], &mut state, &AdamWConfig::default()).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn hand_computed_second_step() {
        // theta = 1, m = 0.1, v = 0.01 after one step, gradient 0.5 now.
        let cfg = AdamWConfig {
            weight_decay: 0.01,
            clip_norm: 10.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut state = OptimizerState {
            first_moment: vec![0.1f64],
            second_moment: vec![0.01],
            step: 1,
            lr: 0.1,
        };
        let mut theta = vec![1.0f64];
        optimizer_step(&mut theta, &mut [0.5], &mut state, &cfg).unwrap();
        // decay: 1 * (1 - 0.1 * 0.01) = 0.999
        // m = 0.09 + 0.05 = 0.14, v = 0.00999 + 0.00025 = 0.01024
        // m_hat = 0.14 / 0.19 = 0.736842..., v_hat = 0.01024 / 0.001999 = 5.122561...
        // update = 0.1 * 0.736842 / (2.263308 + 1e-8) = 0.0325560...
        let m_hat: f64 = 0.14 / (1.0 - 0.81);
        let v_hat: f64 = 0.01024 / (1.0 - 0.998001);
        let expect = 0.999 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((state.first_moment[0] - 0.14).abs() < 1e-15);
        assert!((state.second_moment[0] - 0.01024).abs() < 1e-15);
        assert!((theta[0] - expect).abs() < 1e-12, "{} vs {expect}", theta[0]);
        assert!((theta[0] - 0.966444).abs() < 1e-5);
    }

    #[test]
    fn clipping_scales_large_gradients() {
        let mut g = vec![6.0f64, 8.0];
        let norm = clip_global_norm(&mut g, 1.0);
        assert_eq!(norm, 10.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);

        let mut small = vec![0.3f64, 0.4];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.3, 0.4]);
    }

    #[test]
    fn first_step_with_clipped_gradient() {
        // Adam's first step is lr * sign(g) regardless of magnitude, so check
        // the clipped gradient enters the moments.
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut state = OptimizerState::new(2, 1e-3);
        let mut grads = vec![6.0f64, 8.0];
        optimizer_step(&mut [0.0, 0.0], &mut grads, &mut state, &cfg).unwrap();
        assert!((state.first_moment[0] - 0.1 * 0.6).abs() < 1e-15);
        assert!((state.first_moment[1] - 0.1 * 0.8).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_diverges() {
        let mut state = OptimizerState::new(2, 1e-3);
        let r = optimizer_step(
            &mut [0.0f32, 0.0],
            &mut [1.0, f32::NAN],
            &mut state,
            &AdamWConfig::default(),
        );
        assert!(matches!(r, Err(Error::Diverged(_))));
        assert_eq!(state.step, 0);
    }

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_ceiling(
            grads in proptest::collection::vec(-1e3f64..1e3, 1..64),
            ceiling in 1e-3f64..10.0,
        ) {
            let mut g = grads.clone();
            clip_global_norm(&mut g, ceiling);
            let after = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(after <= ceiling + 1e-9);
        }
    }
}
