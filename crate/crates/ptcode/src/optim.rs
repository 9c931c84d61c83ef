//! Adam optimizer with bias correction, plus global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::params::{Gradients, Matrix, ParamId, ParameterStore};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First/second-moment accumulators mirroring the trainable tensors.
pub struct Adam {
    moments: Vec<Option<(Matrix, Matrix)>>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParameterStore) -> Self {
        Adam {
            moments: (0..store.len()).map(|_| None).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    /// One update over every trainable tensor that received a gradient.
    /// Frozen tensors are untouched. A non-finite gradient aborts the step.
    pub fn step(&mut self, store: &mut ParameterStore, grads: &Gradients, lr: f64) -> Result<()> {
        for (id, grad) in grads.iter() {
            if grad.as_slice().iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of `{}`",
                    store.get(id).name
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (id, grad) in grads.iter() {
            let tensor = store.get_mut(id);
            if !tensor.trainable {
                continue;
            }
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| {
                (
                    Matrix::zeros(grad.rows(), grad.cols()),
                    Matrix::zeros(grad.rows(), grad.cols()),
                )
            });
            let theta = tensor.value.as_mut_slice();
            for (((th, g), mi), vi) in theta
                .iter_mut()
                .zip(grad.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *mi = BETA1 * *mi + (1.0 - BETA1) * g;
                *vi = BETA2 * *vi + (1.0 - BETA2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *th -= lr * m_hat / (v_hat.sqrt() + EPS);
            }
        }
        Ok(())
    }
}

/// Scale all gradients by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn scalar_store(value: f64) -> (ParameterStore, ParamId) {
        let mut store = ParameterStore::new();
        let id = store.add("theta", Matrix::from_vec(1, 1, vec![value]), true);
        (store, id)
    }

    fn grad_of(store: &ParameterStore, id: ParamId, g: f64) -> Gradients {
        let mut tape = Tape::new(store);
        let x = tape.embed(id, 0);
        let probe = tape.leaf(vec![g]);
        let loss = tape.dot(x, probe);
        tape.backward(loss).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut store, id) = scalar_store(1.5);
        let grads = grad_of(&store, id, 0.0);
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &grads, 0.1).unwrap();
        assert_eq!(store.value(id).get(0, 0), 1.5);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_about_lr_against_the_gradient() {
        let (mut store, id) = scalar_store(0.0);
        let grads = grad_of(&store, id, 1.0);
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &grads, 2e-4).unwrap();
        let delta = store.value(id).get(0, 0);
        // bias-corrected first step: -lr * g / (|g| + eps) = -lr up to eps
        assert!((delta + 2e-4).abs() < 2e-4 * 1e-7, "delta = {delta}");
    }

    #[test]
    fn frozen_tensors_are_untouched() {
        let mut store = ParameterStore::new();
        let frozen = store.add("embedding", Matrix::from_vec(1, 2, vec![1.0, 2.0]), false);
        let live = store.add("w", Matrix::from_vec(1, 2, vec![1.0, 2.0]), true);
        let mut tape = Tape::new(&store);
        let x = tape.embed(live, 0);
        let loss = tape.dot(x, x);
        let grads = tape.backward(loss).unwrap();
        let mut adam = Adam::new(&store);
        for _ in 0..5 {
            adam.step(&mut store, &grads, 0.01).unwrap();
        }
        assert_eq!(store.value(frozen).as_slice(), &[1.0, 2.0]);
        assert_ne!(store.value(live).as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn non_finite_gradients_abort_with_the_tensor_name() {
        let (mut store, id) = scalar_store(0.0);
        let grads = grad_of(&store, id, f64::NAN);
        let mut adam = Adam::new(&store);
        let err = adam.step(&mut store, &grads, 0.1).unwrap_err();
        assert!(err.to_string().contains("theta"), "{err}");
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn clipping_rescales_only_above_the_threshold() {
        let mut store = ParameterStore::new();
        let a = store.add("a", Matrix::from_vec(1, 2, vec![0.0, 0.0]), true);
        let mut tape = Tape::new(&store);
        let x = tape.embed(a, 0);
        let probe = tape.leaf(vec![6.0, 8.0]); // gradient norm 10
        let loss = tape.dot(x, probe);
        let mut grads = tape.backward(loss).unwrap();
        let norm = clip_gradients(&mut grads, 5.0);
        assert_eq!(norm, 10.0);
        assert_eq!(grads.get(a).unwrap().as_slice(), &[3.0, 4.0]);
        assert!((grads.global_norm() - 5.0).abs() < 1e-12);

        // below-threshold and zero gradients pass through unchanged
        let mut small = tape.backward(loss).unwrap();
        small.scale(0.3); // norm 3
        let norm = clip_gradients(&mut small, 5.0);
        assert!((norm - 3.0).abs() < 1e-12);
        assert_eq!(small.get(a).unwrap().as_slice(), &[1.8, 2.4]);

        let mut zero = tape.backward(loss).unwrap();
        zero.scale(0.0);
        clip_gradients(&mut zero, 5.0);
        assert_eq!(zero.get(a).unwrap().as_slice(), &[0.0, 0.0]);
    }
}
