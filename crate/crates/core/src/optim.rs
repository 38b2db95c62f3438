use alloc::vec::Vec;

use crate::params::ParamStore;

/// Adaptive moment estimation over every trainable parameter of a store.
///
/// Frozen parameters are skipped entirely: their values are never written
/// and their moment buffers stay at zero.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Rescales the gradient when its global norm exceeds this value.
    pub clip_norm: Option<f32>,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Global L2 norm of the trainable gradients.
    pub fn grad_norm(store: &ParamStore) -> f32 {
        let sq: f64 = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .flat_map(|(_, p)| p.grad.iter())
            .map(|&g| (g as f64) * (g as f64))
            .sum();
        libm::sqrt(sq) as f32
    }

    /// Applies one update from the store's gradient buffers, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|(_, p)| alloc::vec![0.0; p.value.numel()]).collect();
            self.v = self.m.clone();
        }
        let scale = match self.clip_norm {
            Some(c) => {
                let n = Self::grad_norm(store);
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::powf(self.beta1, t as f32);
        let bc2 = 1.0 - libm::powf(self.beta2, t as f32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let grad: Vec<f32> = store.grad(id).iter().map(|g| g * scale).collect();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let value = store.value_mut(id).data_mut();
            for j in 0..value.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                value[j] -= self.lr * mh / (libm::sqrtf(vh) + self.eps);
            }
        }
        store.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::new(&[2], alloc::vec![1.0, -1.0]).unwrap());
        let b = store.add("b", Tensor::new(&[1], alloc::vec![5.0]).unwrap());
        store.set_trainable(b, false);
        store.grad_mut(a).copy_from_slice(&[3.0, -0.5]);
        store.grad_mut(b).copy_from_slice(&[1.0]);
        let mut opt = Adam::new(0.1);
        opt.step(&mut store);
        // Bias-corrected first step is lr * sign(g) up to eps.
        assert!((store.value(a).data()[0] - 0.9).abs() < 1e-6);
        assert!((store.value(a).data()[1] + 0.9).abs() < 1e-6);
        assert_eq!(store.value(b).data()[0], 5.0);
        assert!(store.grad(a).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::new(&[1], alloc::vec![4.0]).unwrap());
        let mut opt = Adam::new(0.05);
        for _ in 0..500 {
            let x = store.value(a).data()[0];
            store.grad_mut(a)[0] = 2.0 * (x - 1.0);
            opt.step(&mut store);
        }
        assert!((store.value(a).data()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn clipping_bounds_the_update_direction() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::new(&[2], alloc::vec![0.0, 0.0]).unwrap());
        store.grad_mut(a).copy_from_slice(&[30.0, 40.0]);
        assert_eq!(Adam::grad_norm(&store), 50.0);
        let mut opt = Adam::new(0.1);
        opt.clip_norm = Some(1.0);
        opt.step(&mut store);
        assert!((store.value(a).data()[0] + 0.1).abs() < 1e-5);
    }
}
