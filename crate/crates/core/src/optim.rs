//! Adam with bias correction, optional decoupled weight decay, and a
//! step-halving learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{GcnError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamHyper {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            base_lr: 0.0002,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamHyper {
    /// Face / glyph generation setting.
    pub fn faces() -> Self {
        Self::default()
    }

    /// Digit generation prefers a slower second moment.
    pub fn digits() -> Self {
        AdamHyper {
            beta2: 0.995,
            ..Self::default()
        }
    }

    /// Single-task recognizer used in the augmentation comparison.
    pub fn recognizer() -> Self {
        AdamHyper {
            beta2: 0.999,
            weight_decay: 0.0005,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.base_lr >= 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(GcnError::Config(format!("invalid Adam hyperparameters {self:?}")))
        }
    }
}

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        AdamState {
            m: params.iter().map(Tensor::zeros_like).collect(),
            v: params.iter().map(Tensor::zeros_like).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
///
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
/// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    hyper: &AdamHyper,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(GcnError::shape(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(GcnError::shape(format!(
                "adam_step: param {:?}, grad {:?}, moment {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::lit(hyper.beta1);
    let b2 = T::lit(hyper.beta2);
    let one = T::one();
    let c1 = T::lit(1.0 - hyper.beta1.powi(t));
    let c2 = T::lit(1.0 - hyper.beta2.powi(t));
    let eps = T::lit(hyper.epsilon);
    let lr_t = T::lit(lr);
    let decay = T::lit(lr * hyper.weight_decay);
    let decoupled = hyper.weight_decay > 0.0;

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let iter = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((pi, &gi), (mi, vi)) in iter {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            let mut next = *pi - lr_t * m_hat / (v_hat.sqrt() + eps);
            if decoupled {
                next = next - decay * *pi;
            }
            *pi = next;
        }
    }
    Ok(())
}

/// `base_lr * 0.5^floor(batch_index / halving_period)`.
pub fn lr_schedule(base_lr: f64, batch_index: usize, halving_period: usize) -> f64 {
    let halvings = batch_index / halving_period.max(1);
    base_lr * 0.5f64.powi(halvings.min(i32::MAX as usize) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        assert_eq!(lr_schedule(0.0002, 0, 1000), 0.0002);
        assert_eq!(lr_schedule(0.0002, 999, 1000), 0.0002);
        assert_eq!(lr_schedule(0.0002, 1000, 1000), 0.0001);
        assert_eq!(lr_schedule(0.0002, 2500, 1000), 0.00005);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::<f64>::zeros([3]).unwrap()];
        let g = vec![Tensor::<f64>::from_f64([3], &[0.5, 3.0, -2.0]).unwrap()];
        let mut st = AdamState::new(&p);
        let h = AdamHyper::default();
        adam_step(&mut p, &g, &mut st, &h, h.base_lr).unwrap();
        assert!((p[0].data()[0] + 0.0002).abs() < 1e-10);
        assert!((p[0].data()[1] + 0.0002).abs() < 1e-10);
        assert!((p[0].data()[2] - 0.0002).abs() < 1e-10);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = vec![Tensor::<f64>::from_f64([2], &[1.0, -3.0]).unwrap()];
        let before = p.clone();
        let g = vec![Tensor::zeros([2]).unwrap()];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &AdamHyper::default(), 0.0002).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        let h = AdamHyper::default();
        let (mut m, mut v, mut p) = (0.0f64, 0.0f64, 0.7f64);
        for t in 1..=2 {
            let g = 1.0;
            m = h.beta1 * m + (1.0 - h.beta1) * g;
            v = h.beta2 * v + (1.0 - h.beta2) * g * g;
            let mh = m / (1.0 - h.beta1.powi(t));
            let vh = v / (1.0 - h.beta2.powi(t));
            p -= h.base_lr * mh / (vh.sqrt() + h.epsilon);
        }
        let mut params = vec![Tensor::<f64>::scalar(0.7)];
        let g = vec![Tensor::scalar(1.0)];
        let mut st = AdamState::new(&params);
        for _ in 0..2 {
            adam_step(&mut params, &g, &mut st, &h, h.base_lr).unwrap();
        }
        assert!((params[0].item() - p).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::<f32>::zeros([2]).unwrap()];
        let g = vec![Tensor::<f32>::zeros([3]).unwrap()];
        let mut st = AdamState::new(&p);
        assert!(matches!(
            adam_step(&mut p, &g, &mut st, &AdamHyper::default(), 0.1),
            Err(GcnError::Shape(_))
        ));
    }

    #[test]
    fn quadratic_converges() {
        let h = AdamHyper::default();
        let mut p = vec![Tensor::<f64>::scalar(1.0)];
        let mut st = AdamState::new(&p);
        for _ in 0..10_000 {
            let g = vec![p[0].clone()];
            adam_step(&mut p, &g, &mut st, &h, h.base_lr).unwrap();
        }
        assert!(p[0].item().abs() < 1e-3, "{}", p[0].item());
    }

    #[test]
    fn weight_decay_shrinks_parameters() {
        let h = AdamHyper::recognizer();
        let mut p = vec![Tensor::<f64>::scalar(2.0)];
        let g = vec![Tensor::scalar(0.0)];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &h, 0.1).unwrap();
        assert!((p[0].item() - (2.0 - 0.1 * 0.0005 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn presets_validate() {
        for h in [AdamHyper::faces(), AdamHyper::digits(), AdamHyper::recognizer()] {
            h.validate().unwrap();
        }
        let bad = AdamHyper {
            beta2: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn schedule_is_piecewise_constant_and_non_increasing(
            period in 1usize..3000,
            idx in 0usize..100_000,
        ) {
            let a = lr_schedule(0.0002, idx, period);
            let b = lr_schedule(0.0002, idx + 1, period);
            prop_assert!(b <= a);
            if (idx + 1) % period != 0 {
                prop_assert_eq!(a, b);
            } else {
                prop_assert_eq!(b, a / 2.0);
            }
        }
    }
}
