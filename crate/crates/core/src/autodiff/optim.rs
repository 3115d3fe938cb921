use super::param::{ParamId, ParamStore};
use super::scalar::Scalar;

/// AdamW with decoupled weight decay. Moment buffers are created on a
/// parameter's first update; parameters without a gradient are left alone.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of `step` calls.
    pub step_count: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: Vec<u64>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
            t: Vec::new(),
        }
    }

    /// Per-parameter update count.
    pub fn updates(&self, id: ParamId) -> u64 {
        self.t.get(id.0).copied().unwrap_or(0)
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, &[T])]) {
        self.step_count += 1;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), Vec::new());
            self.v.resize(store.len(), Vec::new());
            self.t.resize(store.len(), 0);
        }
        let (b1, b2) = (self.beta1, self.beta2);
        for &(id, g) in grads {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let n = p.value.numel();
            assert_eq!(g.len(), n, "gradient size for {}", p.name);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            if m.len() != n {
                m.resize(n, T::zero());
                v.resize(n, T::zero());
            }
            self.t[id.0] += 1;
            let t = self.t[id.0] as i32;
            let bc1 = 1.0 - b1.powi(t);
            let bc2 = 1.0 - b2.powi(t);
            let decay = T::cast_from(1.0 - self.lr * self.weight_decay);
            let (tb1, tb2) = (T::cast_from(b1), T::cast_from(b2));
            let (ob1, ob2) = (T::cast_from(1.0 - b1), T::cast_from(1.0 - b2));
            let (lr, eps) = (T::cast_from(self.lr), T::cast_from(self.eps));
            let (ibc1, ibc2) = (T::cast_from(1.0 / bc1), T::cast_from(1.0 / bc2));
            for i in 0..n {
                let gi = g[i];
                m[i] = tb1 * m[i] + ob1 * gi;
                v[i] = tb2 * v[i] + ob2 * gi * gi;
                let mhat = m[i] * ibc1;
                let vhat = v[i] * ibc2;
                let w = &mut p.value.data[i];
                *w = *w * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
