use serde::{Deserialize, Serialize};

use super::tensor::Scalar;
use super::unet::UNetParams;
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub step: u64,
    pub first_moment: UNetParams<F>,
    pub second_moment: UNetParams<F>,
    pub config: AdamConfig,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &UNetParams<F>, config: AdamConfig) -> Self {
        AdamState {
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            config,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<F: Scalar>(
    params: &mut UNetParams<F>,
    grads: &UNetParams<F>,
    state: &mut AdamState<F>,
) -> Result<(), NnError> {
    let gs = grads.tensors();
    if gs.iter().any(|g| !g.all_finite()) {
        return Err(NnError::NonFinite("gradient".into()));
    }
    let ps = params.tensors_mut();
    if ps.len() != gs.len() || ps.iter().zip(&gs).any(|(p, g)| p.shape() != g.shape()) {
        return Err(NnError::Shape("gradient does not match parameters".into()));
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let b1 = F::of(c.beta1);
    let b2 = F::of(c.beta2);
    let one = F::one();
    let bc1 = F::of(1.0 - c.beta1.powi(t));
    let bc2 = F::of(1.0 - c.beta2.powi(t));
    let lr = F::of(c.lr);
    let eps = F::of(c.eps);
    let ms = state.first_moment.tensors_mut();
    let vs = state.second_moment.tensors_mut();
    for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut());
        for (((w, &gi), mi), vi) in it {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn3d::unet::UNetConfig;
    use crate::rng::seeded;

    fn tiny() -> UNetParams<f64> {
        let cfg = UNetConfig {
            in_channels: 1,
            num_classes: 2,
            base_filters: 1,
            depth: 1,
            dropout_rate: 0.0,
        };
        UNetParams::init(cfg, &mut seeded(1)).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = tiny();
        let before = p.clone();
        let g = p.zeros_like();
        let mut s = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &g, &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn unit_gradient_first_step_moves_by_lr() {
        // m = 0.1, v = 0.001; m_hat = 1, v_hat = 1, step = lr * 1 / (1 + 1e-8)
        let mut p = tiny().zeros_like();
        let mut g = p.zeros_like();
        for t in g.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 1.0);
        }
        let mut s = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &g, &mut s).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        for t in p.tensors() {
            for &w in t.data() {
                assert!((w - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn non_finite_gradient_is_numerical_error() {
        let mut p = tiny();
        let mut g = p.zeros_like();
        g.head.bias.data_mut()[0] = f64::NAN;
        let mut s = AdamState::new(&p, AdamConfig::default());
        let e = adam_step(&mut p, &g, &mut s).unwrap_err();
        assert!(e.is_numerical());
        assert_eq!(s.step, 0);
    }
}
