use super::params::ParamStore;

/// Stochastic gradient descent with momentum and L2 weight decay, applied
/// as `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f32>,
}

impl Default for Sgd {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: None,
        }
    }
}

impl Sgd {
    pub fn step(&self, store: &mut ParamStore, lr: f32) {
        let scale = match self.clip_norm {
            Some(max) => {
                let norm = store.grad_norm() as f32;
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for p in store.iter_mut() {
            let w = p.value.data_mut();
            let g = p.grad.data();
            let v = p.momentum.data_mut();
            for i in 0..w.len() {
                v[i] = self.momentum * v[i] + (scale * g[i] + self.weight_decay * w[i]);
                w[i] -= lr * v[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn sgd_minimises_a_quadratic() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_vec(&[2], vec![3.0, -2.0]));
        let opt = Sgd { weight_decay: 0.0, ..Sgd::default() };
        for _ in 0..200 {
            s.zero_grad();
            let w = s.get(id).value.data().to_vec();
            s.get_mut(id).grad.data_mut().copy_from_slice(&[2.0 * w[0], 2.0 * w[1]]);
            opt.step(&mut s, 0.05);
        }
        assert!(s.get(id).value.max_abs() < 1e-3);
    }
}
