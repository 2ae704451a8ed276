use super::{Array, ParamStore};

/// Stochastic gradient descent with optional momentum and global-norm clipping.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    /// Clip the accumulated gradient to this global L2 norm; `0` disables.
    pub clip_norm: f64,
    velocity: Vec<Array>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, clip_norm: f64) -> Self {
        Sgd {
            lr,
            momentum,
            clip_norm,
            velocity: Vec::new(),
        }
    }

    /// Applies the accumulated gradients to every non-frozen parameter and
    /// clears the accumulators.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.velocity.len() != store.len() {
            self.velocity = store.ids().map(|id| Array::zeros(store.value(id).shape())).collect();
        }
        if self.clip_norm > 0.0 {
            let norm = store.accum_norm();
            if norm > self.clip_norm {
                store.scale_accum(self.clip_norm / norm);
            }
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.is_frozen(id) {
                continue;
            }
            let g = store.accum(id).clone();
            let v = &mut self.velocity[id.index()];
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.momentum * *vi + gi;
            }
            let lr = self.lr;
            let v = v.clone();
            for (p, vi) in store.value_mut(id).data_mut().iter_mut().zip(v.data()) {
                *p -= lr * vi;
            }
        }
        store.zero_accum();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_moves_against_gradient_and_skips_frozen() {
        let mut store = ParamStore::new();
        let a = store.register_filled("a.w", &[2], 1.0).unwrap();
        let b = store.register_filled("b.w", &[2], 1.0).unwrap();
        let mut g = store.zero_grads();
        g.get_mut(a).copy_from_slice(&[1.0, -2.0]);
        g.get_mut(b).copy_from_slice(&[1.0, 1.0]);
        store.freeze_group("b");
        store.accumulate(&g);
        Sgd::new(0.5, 0.0, 0.0).step(&mut store);
        assert_eq!(store.value(a).data(), &[0.5, 2.0]);
        assert_eq!(store.value(b).data(), &[1.0, 1.0]);
        assert_eq!(store.accum_norm(), 0.0);
    }

    #[test]
    fn clipping_bounds_the_update() {
        let mut store = ParamStore::new();
        let a = store.register_filled("a.w", &[1], 0.0).unwrap();
        let mut g = store.zero_grads();
        g.get_mut(a)[0] = 100.0;
        store.accumulate(&g);
        Sgd::new(1.0, 0.0, 2.0).step(&mut store);
        assert!((store.value(a).data()[0] + 2.0).abs() < 1e-12);
    }
}
