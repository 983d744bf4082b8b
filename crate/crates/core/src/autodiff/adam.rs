use super::params::ParamStore;

/// Adam with bias correction. Defaults follow the usual (0.9, 0.999, 1e-8).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, ..Default::default() }
    }

    /// Applies one update to every trainable parameter, then clears all gradients.
    pub fn step(&self, store: &mut ParamStore) {
        for p in store.iter_mut() {
            if p.trainable {
                p.step += 1;
                let t = p.step as i32;
                let bias1 = 1.0 - self.beta1.powi(t);
                let bias2 = 1.0 - self.beta2.powi(t);
                let values = p.value.data_mut();
                let grads = p.grad.data();
                let m = p.first_moment.data_mut();
                let v = p.second_moment.data_mut();
                for i in 0..values.len() {
                    let g = grads[i];
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                    let m_hat = m[i] / bias1;
                    let v_hat = v[i] / bias2;
                    values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
            p.grad.fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn zero_gradient_leaves_fresh_parameter_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row_vector(vec![0.3, -1.2]), true);
        Adam::default().step(&mut store);
        assert_eq!(store.value(id).data(), &[0.3, -1.2]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = 1, v_hat = 1 on step one, so the update is lr / (1 + eps).
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(2.0), true);
        store.get_mut(id).grad = Tensor::scalar(1.0);
        Adam::new(0.001).step(&mut store);
        let expected = 2.0 - 0.001 / (1.0 + 1e-8);
        assert!((store.value(id).item() - expected).abs() < 1e-15);
        assert_eq!(store.get(id).grad.item(), 0.0);
        assert_eq!(store.get(id).step(), 1);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut store = ParamStore::new();
        let id = store.add("frozen", Tensor::scalar(1.0), false);
        store.get_mut(id).grad = Tensor::scalar(5.0);
        Adam::default().step(&mut store);
        assert_eq!(store.value(id).item(), 1.0);
    }

    #[test]
    fn identical_inputs_give_identical_updates() {
        let build = || {
            let mut store = ParamStore::new();
            let id = store.add("w", Tensor::row_vector(vec![0.1, 0.2, 0.3]), true);
            (store, id)
        };
        let (mut a, ia) = build();
        let (mut b, ib) = build();
        for step in 0..5 {
            let g = Tensor::row_vector(vec![step as f64, -0.5, 0.25 * step as f64]);
            a.get_mut(ia).grad = g.clone();
            b.get_mut(ib).grad = g;
            Adam::default().step(&mut a);
            Adam::default().step(&mut b);
        }
        assert_eq!(a.value(ia), b.value(ib));
    }
}
