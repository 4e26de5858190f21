//! Adam with bias-corrected moment estimates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    #[serde(skip)]
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        AdamState {
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments
            .get(name)
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Applies one update to every trainable parameter from its gradient slot.
    ///
    /// Gradients are validated before anything is modified, so a rejected
    /// step leaves both parameters and state untouched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (name, t) in &store.params {
            let g = t.grad().ok_or_else(|| {
                Error::InvalidArgument(format!("parameter `{name}` has no gradient"))
            })?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            if let Some((m, _)) = self.moments.get(name) {
                if m.len() != g.len() {
                    return Err(Error::Shape {
                        location: format!("adam moments for `{name}`"),
                        expected: vec![m.len()],
                        actual: vec![g.len()],
                    });
                }
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, tensor) in store.params.iter_mut() {
            let n = tensor.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let grad = tensor.grad().expect("checked above").to_vec();
            for (((p, g), mi), vi) in tensor
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn store_with(value: f64, grad: f64) -> ParamStore {
        let mut t = Tensor::new(vec![1], vec![value]).unwrap();
        t.grad_mut()[0] = grad;
        let mut s = ParamStore::default();
        s.params.insert("p".into(), t);
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store_with(0.7, 0.0);
        let mut a = AdamState::new(1e-4);
        a.step(&mut s).unwrap();
        assert_eq!(s.params["p"].data()[0], 0.7);
        assert_eq!(a.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store_with(0.0, 1.0);
        let mut a = AdamState::new(1e-4);
        a.step(&mut s).unwrap();
        // m_hat = 1, v_hat = 1 after bias correction.
        let expect = -1e-4 / (1.0 + 1e-8);
        assert!((s.params["p"].data()[0] - expect).abs() < 1e-18);
    }

    #[test]
    fn two_identical_steps_follow_recurrence() {
        let g = 0.5;
        let mut s = store_with(1.0, g);
        let mut a = AdamState::new(1e-3);
        a.step(&mut s).unwrap();
        a.step(&mut s).unwrap();
        // m2 = (1-b1^2) g and v2 = (1-b2^2) g^2 so both bias-corrected
        // estimates equal g and g^2 exactly; each step moves lr*g/(|g|+eps).
        let m1 = 0.1 * g;
        let v1 = 0.001 * g * g;
        let p1 = 1.0 - 1e-3 * (m1 / 0.1) / ((v1 / 0.001f64).sqrt() + 1e-8);
        let m2 = 0.9 * m1 + 0.1 * g;
        let v2 = 0.999 * v1 + 0.001 * g * g;
        let p2 = p1
            - 1e-3 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64 * 0.999)).sqrt() + 1e-8);
        assert!((s.params["p"].data()[0] - p2).abs() < 1e-15);
        assert!((p2 - (1.0 - 2e-3 * g / (g + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_named() {
        let mut s = store_with(0.0, f64::NAN);
        let mut a = AdamState::new(1e-4);
        match a.step(&mut s) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "p"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(a.step, 0);
    }
}
