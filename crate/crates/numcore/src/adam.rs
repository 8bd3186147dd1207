use crate::params::{Gradients, ParamStore};
use crate::{NumError, Result, Tensor};

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First moments, one per parameter in store order.
    pub m: Vec<Tensor>,
    /// Second moments.
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update. Parameters without a gradient are treated as
    /// having a zero gradient for this step.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(NumError::Shape {
                op: "adam_step",
                detail: format!("{} moment tensors for {} parameters", self.m.len(), store.len()),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            let param = store.get_mut(id);
            if self.m[i].shape() != param.shape() {
                return Err(NumError::Shape {
                    op: "adam_step",
                    detail: format!("moment {:?} vs parameter {:?}", self.m[i].shape(), param.shape()),
                });
            }
            let grad = grads.param(id);
            if let Some(g) = grad {
                if g.shape() != param.shape() {
                    return Err(NumError::Shape {
                        op: "adam_step",
                        detail: format!("gradient {:?} vs parameter {:?}", g.shape(), param.shape()),
                    });
                }
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, p) in param.data_mut().iter_mut().enumerate() {
                let g = grad.map_or(0.0, |g| g.data()[k]);
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    fn scalar_store(w: f64) -> (ParamStore, crate::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(w)).unwrap();
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut store, id) = scalar_store(0.7);
        let mut adam = Adam::new(&store, 0.001);
        let grads = Gradients::new(&store);
        adam.step(&mut store, &grads).unwrap();
        assert_eq!(store.get(id).data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = 1, v_hat = 1, so the update is lr / (1 + eps).
        let (mut store, id) = scalar_store(0.0);
        let mut adam = Adam::new(&store, 0.001);
        let mut tape = Tape::with_params(&store);
        let w = tape.param(id);
        let grads = tape.backward(w).unwrap();
        adam.step(&mut store, &grads).unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((store.get(id).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn quadratic_descends_monotonically_after_warmup() {
        let (mut store, id) = scalar_store(1.0);
        let mut adam = Adam::new(&store, 0.001);
        let mut trace = Vec::new();
        for _ in 0..100 {
            let grads = {
                let mut tape = Tape::with_params(&store);
                let w = tape.param(id);
                let sq = tape.mul(w, w).unwrap();
                tape.backward(sq).unwrap()
            };
            adam.step(&mut store, &grads).unwrap();
            trace.push(store.get(id).data()[0].abs());
        }
        assert!(trace.windows(2).all(|p| p[1] < p[0]));
        assert!(trace[99] < 0.91);
    }

    #[test]
    fn mismatched_store_is_rejected() {
        let (store, _) = scalar_store(0.0);
        let mut adam = Adam::new(&store, 0.001);
        let mut other = ParamStore::new();
        other.add("w", Tensor::zeros(&[2])).unwrap();
        let grads = Gradients::new(&other);
        assert!(adam.step(&mut other, &grads).is_err());
    }
}
