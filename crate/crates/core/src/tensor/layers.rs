//! Parameterized building blocks on top of [`Graph`] and [`ParamStore`].
//! Batch-norm running statistics are stored as non-trainable entries so
//! they travel with checkpoints.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, Var};
use super::ops::{BnMode, RunningStats};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::Result;

/// He-normal initialization, `std = gain / sqrt(fan_in)`.
pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f32, rng: &mut R) -> Tensor {
    let std = gain / (fan_in as f32).sqrt();
    let normal = Normal::new(0.0f32, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = he_normal(&[c_out, c_in, k, k], c_in * k * k, 2f32.sqrt(), rng);
        let weight = store.add(format!("{name}.weight"), w, true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), true));
        Conv2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.padding)
    }

    /// (c_out, c_in, k)
    pub fn dims(&self, store: &ParamStore) -> (usize, usize, usize) {
        let s = store.tensor(self.weight).shape();
        (s[0], s[1], s[2])
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), false),
        }
    }

    pub fn stats(&self, store: &ParamStore) -> RunningStats {
        RunningStats {
            mean: store.tensor(self.running_mean).data().to_vec(),
            var: store.tensor(self.running_var).data().to_vec(),
        }
    }

    /// Running statistics are updated in the store in `Train` mode.
    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: Var, mode: BnMode) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let mut stats = self.stats(store);
        let y = g.batchnorm2d(x, gamma, beta, &mut stats, mode)?;
        if mode == BnMode::Train {
            store.tensor_mut(self.running_mean).data_mut().copy_from_slice(&stats.mean);
            store.tensor_mut(self.running_var).data_mut().copy_from_slice(&stats.var);
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), he_normal(&[d_out, d_in], d_in, 1.0, rng), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), true),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, Some(b))
    }
}
