use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;

use super::{ParamStore, Scalar, Tensor};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    state: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            state: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable entry holding a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powf(self.step as f64);
        let bc2 = 1.0 - self.beta2.powf(self.step as f64);
        let step_size = T::lit(self.lr / bc1);
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let one = T::one();
        let eps = T::lit(self.eps);
        let inv_sqrt_bc2 = T::lit(1.0 / bc2.sqrt());
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = store.grad(id).cloned() else {
                continue;
            };
            let slot = &mut self.state[id.0];
            let (m, v) =
                slot.get_or_insert_with(|| (Tensor::zeros(g.dims()), Tensor::zeros(g.dims())));
            let w = store.value_mut(id);
            for (((wi, mi), vi), &gi) in w
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let denom = vi.sqrt() * inv_sqrt_bc2 + eps;
                *wi = *wi - step_size * *mi / denom;
            }
        }
    }
}
