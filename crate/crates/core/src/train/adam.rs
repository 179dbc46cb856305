use crate::error::{Error, Result};
use crate::model::params::ParamSet;

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// First-moment estimate.
    pub m: ParamSet,
    /// Second-moment estimate.
    pub v: ParamSet,
}

impl AdamState {
    pub fn new(like: &ParamSet, lr: f64) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: ParamSet::zeros_like(like),
            v: ParamSet::zeros_like(like),
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64, eps: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self.eps = eps;
        self
    }

    pub fn round_to_f32(&mut self) {
        self.m.round_to_f32();
        self.v.round_to_f32();
    }
}

pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState) -> Result<()> {
    if params.shapes() != grads.shapes() || params.shapes() != state.m.shapes() {
        return Err(Error::Data("parameter, gradient and optimizer shapes differ".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (lr, eps) = (state.lr, state.eps);
    let AdamState { m, v, .. } = state;
    for (((p, g), m), v) in params
        .slices_mut()
        .into_iter()
        .zip(grads.slices())
        .zip(m.slices_mut())
        .zip(v.slices_mut())
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn zero_gradient_fresh_state_is_identity() {
        let mut p = ParamSet::zeros(3, 2);
        p.w3.fill(0.7);
        p.u_m.fill(-0.2);
        let before = p.clone();
        let g = ParamSet::zeros(3, 2);
        let mut s = AdamState::new(&p, 1e-4);
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut s).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = ParamSet::zeros(1, 1);
        let mut g = ParamSet::zeros(1, 1);
        g.w3.fill(1.0);
        let mut s = AdamState::new(&p, 1e-4);
        adam_step(&mut p, &g, &mut s).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        assert!((p.w3[[0, 0]] + 1e-4).abs() < 1e-11);
        assert_eq!(p.b3[0], 0.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = ParamSet::zeros(2, 2);
        let g = ParamSet::zeros(3, 2);
        let mut s = AdamState::new(&p, 1e-3);
        assert!(adam_step(&mut p, &g, &mut s).is_err());
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let run = || {
            let mut p = ParamSet::zeros(4, 3);
            let mut s = AdamState::new(&p, 1e-2);
            for k in 0..20 {
                let mut g = ParamSet::zeros(4, 3);
                g.w3 = Array2::from_shape_fn((3, 4), |(i, j)| ((k * 7 + i * 4 + j) as f64).sin());
                adam_step(&mut p, &g, &mut s).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
