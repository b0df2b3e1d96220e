//! Adam optimizer with bias correction.

use super::{real, Real};
use crate::error::{Error, Result};

/// Optimizer state: one pair of moment buffers per parameter tensor.
///
/// Moment buffers always match their parameter's length; `step_count`
/// increases by one on every [`adam_step`].
pub struct AdamState<T: Real> {
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
    step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl<T: Real> AdamState<T> {
    /// Fresh state for parameters of the given lengths. Betas default to
    /// 0.9 / 0.98 and epsilon to 1e-8.
    pub fn new(param_lengths: &[usize], learning_rate: f64) -> Self {
        AdamState {
            first_moment: param_lengths.iter().map(|&n| vec![T::zero(); n]).collect(),
            second_moment: param_lengths.iter().map(|&n| vec![T::zero(); n]).collect(),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-8,
            learning_rate,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// One Adam update over a full parameter set.
///
/// For each element: `m = b1*m + (1-b1)*g`, `v = b2*v + (1-b2)*g^2`, then the
/// bias-corrected `m/(1-b1^t)` and `v/(1-b2^t)` drive
/// `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step<T: Real>(
    params: &mut [Vec<T>],
    grads: &[&[T]],
    state: &mut AdamState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::contract(
            "adam_step",
            format!(
                "{} params vs {} grads vs state for {}",
                params.len(),
                grads.len(),
                state.first_moment.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(Error::contract(
                "adam_step",
                format!("param {} has {} elements but grad has {}", i, p.len(), g.len()),
            ));
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let b1: T = real(state.beta1);
    let b2: T = real(state.beta2);
    let one_m_b1: T = real(1.0 - state.beta1);
    let one_m_b2: T = real(1.0 - state.beta2);
    let c1: T = real(1.0 / (1.0 - state.beta1.powi(t)));
    let c2: T = real(1.0 / (1.0 - state.beta2.powi(t)));
    let lr: T = real(state.learning_rate);
    let eps: T = real(state.epsilon);

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()))
    {
        for j in 0..p.len() {
            let gj = g[j];
            m[j] = b1 * m[j] + one_m_b1 * gj;
            v[j] = b2 * v[j] + one_m_b2 * gj * gj;
            let m_hat = m[j] * c1;
            let v_hat = v[j] * c2;
            p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_fresh_params_unchanged() {
        let mut params = vec![vec![0.5f64, -1.25, 3.0]];
        let grads_store = vec![vec![0.0f64; 3]];
        let grads: Vec<&[f64]> = grads_store.iter().map(|g| g.as_slice()).collect();
        let mut state = AdamState::new(&[3], 1e-3);
        adam_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params[0], vec![0.5, -1.25, 3.0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let lr = 1e-3;
        let mut params = vec![vec![0.0f64, 0.0, 0.0]];
        let grads_store = vec![vec![2.0f64, -0.01, 500.0]];
        let grads: Vec<&[f64]> = grads_store.iter().map(|g| g.as_slice()).collect();
        let mut state = AdamState::new(&[3], lr);
        adam_step(&mut params, &grads, &mut state).unwrap();
        for (p, g) in params[0].iter().zip(&grads_store[0]) {
            let step = lr * g.signum();
            assert!(
                (p + step).abs() < lr * 1e-4,
                "param moved {} expected {}",
                p,
                -step
            );
        }
    }

    #[test]
    fn two_steps_match_reference_trace() {
        let (b1, b2, eps, lr) = (0.9f64, 0.98, 1e-8, 0.01);
        let g = [0.3f64, -2.0, 0.007];
        let mut expect = [1.0f64, -0.5, 0.25];
        let mut m = [0.0f64; 3];
        let mut v = [0.0f64; 3];
        for t in 1..=2 {
            for j in 0..3 {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let m_hat = m[j] / (1.0 - b1.powi(t));
                let v_hat = v[j] / (1.0 - b2.powi(t));
                expect[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }

        let mut params = vec![vec![1.0f64, -0.5, 0.25]];
        let grads_store = vec![g.to_vec()];
        let grads: Vec<&[f64]> = grads_store.iter().map(|x| x.as_slice()).collect();
        let mut state = AdamState::new(&[3], lr);
        adam_step(&mut params, &grads, &mut state).unwrap();
        adam_step(&mut params, &grads, &mut state).unwrap();
        for (have, want) in params[0].iter().zip(&expect) {
            assert!((have - want).abs() < 1e-12, "have {} want {}", have, want);
        }
        assert_eq!(state.step_count(), 2);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let mut params = vec![vec![0.0f64; 3]];
        let grads_store = vec![vec![0.0f64; 2]];
        let grads: Vec<&[f64]> = grads_store.iter().map(|g| g.as_slice()).collect();
        let mut state = AdamState::new(&[3], 1e-3);
        assert!(adam_step(&mut params, &grads, &mut state).is_err());
    }
}
