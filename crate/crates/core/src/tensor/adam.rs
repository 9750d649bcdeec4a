use super::{ParamStore, Real};

/// Adam moments for a subset of the parameters in one store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of applied steps.
    pub t: u64,
    params: Vec<usize>,
    m1: Vec<Vec<T>>,
    m2: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    /// Zeroed moments for `params` of `store` with the usual
    /// β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(store: &ParamStore<T>, params: Vec<usize>, lr: f64) -> Self {
        let m1: Vec<Vec<T>> = params
            .iter()
            .map(|&id| vec![T::zero(); store.value(id).len()])
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            params,
            m2: m1.clone(),
            m1,
        }
    }

    pub fn params(&self) -> &[usize] {
        &self.params
    }

    pub fn moments(&self, slot: usize) -> (&[T], &[T]) {
        (&self.m1[slot], &self.m2[slot])
    }

    /// Overwrites the moments of one slot (checkpoint restore).
    pub fn set_moments(&mut self, slot: usize, m1: Vec<T>, m2: Vec<T>) -> bool {
        if m1.len() != self.m1[slot].len() || m2.len() != self.m2[slot].len() {
            return false;
        }
        self.m1[slot] = m1;
        self.m2[slot] = m2;
        true
    }

    /// One bias-corrected Adam update of the tracked parameters from their
    /// accumulated gradients, which are zeroed afterwards.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        let one = T::one();
        for (slot, &id) in self.params.iter().enumerate() {
            let (value, grad) = store.value_and_grad_mut(id);
            let m1 = &mut self.m1[slot];
            let m2 = &mut self.m2[slot];
            for (((p, g), a), b) in value
                .data_mut()
                .iter_mut()
                .zip(grad.iter_mut())
                .zip(m1.iter_mut())
                .zip(m2.iter_mut())
            {
                *a = b1 * *a + (one - b1) * *g;
                *b = b2 * *b + (one - b2) * *g * *g;
                let mhat = *a / c1;
                let vhat = *b / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
                *g = T::zero();
            }
        }
    }
}

/// Convenience for the common case of one optimizer over a whole store.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, state: &mut AdamState<T>) {
    state.step(store);
}
