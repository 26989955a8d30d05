use super::{AutodiffError, Gradients, ParamStore, Tensor};

/// Bias-corrected adaptive-moment optimizer state.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `store` with learning rate `lr`
    /// (callers pass a warmed-up rate; `self.lr` is the nominal value).
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<(), AutodiffError> {
        if store.len() != self.first.len() {
            return Err(AutodiffError::Shape(format!(
                "optimizer tracks {} tensors, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else {
                // zero gradient: moments decay, update is m_hat / sqrt(v_hat)
                self.decay_only(store, id.0, lr, bc1, bc2);
                continue;
            };
            let param = store.get_mut(id);
            if g.shape() != param.shape() {
                return Err(AutodiffError::Shape(format!(
                    "gradient {:?} vs parameter {:?}",
                    g.shape(),
                    param.shape()
                )));
            }
            let m = self.first[id.0].data_mut();
            let v = self.second[id.0].data_mut();
            for (((p, &gi), mi), vi) in param.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    fn decay_only(&mut self, store: &mut ParamStore, idx: usize, lr: f64, bc1: f64, bc2: f64) {
        let m = self.first[idx].data_mut();
        if m.iter().all(|&x| x == 0.0) {
            return;
        }
        let v = self.second[idx].data_mut();
        let param = store.get_mut(super::ParamId(idx));
        for ((p, mi), vi) in param.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi *= self.beta1;
            *vi *= self.beta2;
            *p -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    fn grads_for(store: &ParamStore, coeffs: &[f64]) -> Gradients {
        // loss = sum_i c_i * p_i  => grad = c
        let mut g = Graph::inference();
        let p = g.param(store, crate::autodiff::ParamId(0));
        let c = g.constant(Tensor::new(vec![coeffs.len()], coeffs.to_vec()).unwrap());
        let pc = g.mul(p, c).unwrap();
        let loss = g.sum(pc).unwrap();
        g.backward(loss).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::default();
        store.insert("p", Tensor::new(vec![2], vec![0.3, -0.7]).unwrap());
        let before = store.clone();
        let mut adam = AdamState::new(&store, 1e-3);
        let grads = grads_for(&store, &[0.0, 0.0]);
        adam.step(&mut store, &grads, 1e-3).unwrap();
        assert_eq!(store, before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        for g in [0.5, -3.0, 1e-3] {
            let mut store = ParamStore::default();
            store.insert("p", Tensor::new(vec![1], vec![1.0]).unwrap());
            let mut adam = AdamState::new(&store, 1e-3);
            let grads = grads_for(&store, &[g]);
            adam.step(&mut store, &grads, 1e-3).unwrap();
            let moved = 1.0 - store.get(crate::autodiff::ParamId(0)).item();
            let expected = 1e-3 * g / (g.abs() + 1e-8);
            assert!((moved - expected).abs() < 1e-15, "g={g} moved={moved}");
            assert!((moved.abs() - 1e-3).abs() < 1e-8);
        }
    }

    #[test]
    fn equal_gradients_equal_updates() {
        let mut store = ParamStore::default();
        store.insert("p", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let mut adam = AdamState::new(&store, 1e-2);
        for _ in 0..5 {
            let grads = grads_for(&store, &[0.4, 0.4]);
            adam.step(&mut store, &grads, 1e-2).unwrap();
        }
        let d = store.get(crate::autodiff::ParamId(0)).data();
        assert_eq!(d[0], d[1]);
    }

    #[test]
    fn zero_lr_is_bit_identical() {
        let mut store = ParamStore::default();
        store.insert("p", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        let before = store.clone();
        let mut adam = AdamState::new(&store, 0.0);
        let grads = grads_for(&store, &[1.0, -2.0, 3.0]);
        adam.step(&mut store, &grads, 0.0).unwrap();
        assert_eq!(store, before);
    }
}
