//! Adam with per-block first/second-moment state and global-norm clipping.

use crate::error::{CoreError, Result};

/// Global gradient-norm ceiling applied before every optimizer step.
pub const GRAD_CLIP_NORM: f64 = 5.0;

/// Rescales all blocks in place if their joint L2 norm exceeds `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(blocks: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for b in blocks.iter() {
        for g in b.iter() {
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for b in blocks.iter_mut() {
            for g in b.iter_mut() {
                *g *= k;
            }
        }
    }
    norm
}

/// Moment buffers for one parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn is_zero(&self) -> bool {
        self.m.iter().all(|&x| x == 0.0) && self.v.iter().all(|&x| x == 0.0)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One update on a block. `block` names the parameters in errors.
    /// With an all-zero gradient and zero moments, parameters come out
    /// bit-identical (the computed update is exactly `0.0`).
    pub fn step(
        &self,
        block: &str,
        params: &mut [f64],
        grads: &[f64],
        state: &mut AdamState,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.m.len() {
            return Err(CoreError::shape(
                "adam",
                format!(
                    "block '{block}': {} params, {} grads, {} moments",
                    params.len(),
                    grads.len(),
                    state.m.len()
                ),
            ));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(CoreError::NonFiniteGradient { block: block.to_string() });
        }
        state.t += 1;
        let bc1 = 1.0 - self.beta1.powi(state.t as i32);
        let bc2 = 1.0 - self.beta2.powi(state.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            state.m[i] = self.beta1 * state.m[i] + (1.0 - self.beta1) * g;
            state.v[i] = self.beta2 * state.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = state.m[i] / bc1;
            let vhat = state.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_moments_is_identity() {
        let adam = Adam::new(0.01);
        let mut params: Vec<f64> = vec![0.3, -1.7, 2.5];
        let before: Vec<u64> = params.iter().map(|p| p.to_bits()).collect();
        let mut state = AdamState::new(3);
        adam.step("test", &mut params, &[0.0, 0.0, 0.0], &mut state).unwrap();
        let after: Vec<u64> = params.iter().map(|p| p.to_bits()).collect();
        assert_eq!(before, after);
        assert!(state.is_zero());
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let adam = Adam::new(0.01);
        let mut params = vec![1.0];
        let mut state = AdamState::new(1);
        let err = adam
            .step("encoder_weights", &mut params, &[f64::NAN], &mut state)
            .unwrap_err();
        assert!(err.to_string().contains("encoder_weights"));
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(x) = sum (x - c)^2 reaches the minimum well inside 200 steps.
        let adam = Adam::new(0.05);
        let target = [1.0, -2.0, 0.5];
        let mut x = vec![0.0; 3];
        let mut state = AdamState::new(3);
        for _ in 0..200 {
            let grads: Vec<f64> = x.iter().zip(&target).map(|(a, c)| 2.0 * (a - c)).collect();
            adam.step("x", &mut x, &grads, &mut state).unwrap();
        }
        for (a, c) in x.iter().zip(&target) {
            assert!((a - c).abs() < 1e-2, "{a} vs {c}");
        }
    }

    #[test]
    fn clip_shrinks_only_above_threshold() {
        let mut a = vec![3.0, 0.0];
        let mut b = vec![0.0, 4.0];
        {
            let mut blocks: Vec<&mut [f64]> = vec![&mut a, &mut b];
            let norm = clip_global_norm(&mut blocks, 5.0);
            assert!((norm - 5.0).abs() < 1e-12);
        }
        // Norm exactly 5 fits the ceiling; untouched.
        assert_eq!(a, vec![3.0, 0.0]);
        assert_eq!(b, vec![0.0, 4.0]);

        let mut big = vec![30.0, 40.0];
        {
            let mut blocks: Vec<&mut [f64]> = vec![&mut big];
            let norm = clip_global_norm(&mut blocks, 5.0);
            assert!((norm - 50.0).abs() < 1e-12);
        }
        let clipped = (big[0] * big[0] + big[1] * big[1]).sqrt();
        assert!((clipped - 5.0).abs() < 1e-9);
    }
}
