use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// SGD with classical momentum and L2 weight decay folded into the gradient:
/// `v <- momentum*v + grad + wd*param; param <- param - lr*v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Option<Vec<f32>>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// One update over every trainable parameter that carries a gradient.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: f32) -> Result<()> {
        let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        for &id in &ids {
            let t = store.tensor(id);
            if let Some(g) = t.grad() {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        what: format!("gradient of {}", store.name(id)),
                        detail: format!("grad[{i}] = {} (step aborted, shape {:?})", g[i], t.shape()),
                    });
                }
            }
        }
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for id in ids {
            let idx = id.index();
            let t = store.tensor_mut(id);
            let Some(grad) = t.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            let v = self.velocity[idx].get_or_insert_with(|| vec![0.0; grad.len()]);
            for ((p, vi), g) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
                *vi = self.momentum * *vi + g + self.weight_decay * *p;
                *p -= lr * *vi;
            }
        }
        Ok(())
    }

    pub fn velocity(&self, id: ParamId, store: &ParamStore) -> Option<&[f32]> {
        debug_assert!(id.index() < store.len());
        self.velocity.get(id.index())?.as_deref()
    }
}

/// Cosine annealing: `lr0/2 * (1 + cos(pi * epoch / total))`.
pub fn cosine_lr(epoch: usize, total: usize, lr0: f32) -> f32 {
    if total == 0 {
        return lr0;
    }
    let t = epoch.min(total) as f64 / total as f64;
    (lr0 as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
}
