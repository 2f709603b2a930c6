//! Adam with bias correction, β=(0.9, 0.98), ε=1e-8.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update over a parameter list. `grads` must align with `params`.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch(format!(
                "adam: param {i} shape {:?} vs grad shape {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..p.len() {
            let gi = g.data()[i];
            let mi = state.beta1 * m.data()[i] + (1.0 - state.beta1) * gi;
            let vi = state.beta2 * v.data()[i] + (1.0 - state.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            p.data_mut()[i] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::from_vec(&[2], vec![1.0, -2.0])];
        let grads = vec![Tensor::zeros(&[2])];
        let mut st = AdamState::new(&params);
        for _ in 0..5 {
            adam_step(&mut params, &grads, &mut st, 1e-3).unwrap();
        }
        assert_eq!(params[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // With g=1: mhat=1, vhat=1 → Δ = -lr / (1 + eps).
        let lr = 0.05;
        let mut params = vec![Tensor::scalar(0.0)];
        let grads = vec![Tensor::scalar(1.0)];
        let mut st = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut st, lr).unwrap();
        assert!((params[0].item() + lr).abs() < 1e-6);
    }

    #[test]
    fn two_steps_match_scalar_oracle() {
        let lr = 0.01;
        let g1 = 0.7;
        let g2 = -1.3;
        let mut params = vec![Tensor::scalar(0.5)];
        let mut st = AdamState::new(&params);
        adam_step(&mut params, &[Tensor::scalar(g1)], &mut st, lr).unwrap();
        adam_step(&mut params, &[Tensor::scalar(g2)], &mut st, lr).unwrap();

        // hand-rolled scalar Adam
        let (b1, b2, eps) = (0.9, 0.98, 1e-8);
        let mut x = 0.5;
        let mut m = 0.0;
        let mut v = 0.0;
        for (t, g) in [(1, g1), (2, g2)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            x -= lr * mhat / (vhat.sqrt() + eps);
        }
        assert!((params[0].item() - x).abs() < 1e-10);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::zeros(&[2])];
        let grads = vec![Tensor::zeros(&[3])];
        let mut st = AdamState::new(&params);
        assert!(adam_step(&mut params, &grads, &mut st, 1e-3).is_err());
    }
}
