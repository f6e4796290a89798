use crate::{Grads, ParamEntry, ParamStore, Tensor};

/// Adam with bias correction. Moments are kept for every stored tensor so
/// that they line up with the store when serialized.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f32) -> Self {
        let zeros: Vec<Tensor> = store
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.shape()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Updates every entry for which `trainable` holds and a gradient exists.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Grads,
        trainable: impl Fn(&ParamEntry) -> bool,
    ) {
        assert_eq!(self.m.len(), store.len(), "optimizer/store mismatch");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !trainable(store.entry(id)) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let p = store.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, m), v), g) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
