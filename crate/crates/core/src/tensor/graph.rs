//! Reverse-mode tape. Every op appends a node holding its output value and
//! whatever it needs for the backward pass; `backward` walks the nodes in
//! exact reverse order of execution.

use std::collections::HashMap;

use super::ops::{self, Activation, BnMode, BnSaved, RunningStats};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        bias: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Reshape {
        x: Var,
    },
    Pad {
        x: Var,
        pad: usize,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f32>,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    trace: Vec<usize>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Adds a leaf. It receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Adds a constant input (never receives a gradient).
    pub fn input(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    /// Binds a stored parameter as a leaf, once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let mut t = store.tensor(id).clone();
        t.zero_grad();
        t.set_requires_grad(store.is_trainable(id));
        let v = self.leaf(t);
        self.params.insert(id, v);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    /// Node indices visited by the last `backward`, in visit order.
    pub fn backward_trace(&self) -> &[usize] {
        &self.trace
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let y = ops::conv2d(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let ng = self.needs(x) || self.needs(w) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            y,
            Op::Conv {
                x,
                w,
                bias,
                stride,
                padding,
            },
            ng,
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let y = ops::activation(self.value(x), kind);
        let ng = self.needs(x);
        self.push(y, Op::Act { x, kind }, ng)
    }

    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: BnMode,
    ) -> Result<Var> {
        let (y, saved) =
            ops::batchnorm2d(self.value(x), self.value(gamma), self.value(beta), stats, mode)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            },
            ng,
        ))
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (y, argmax) = ops::maxpool2d(self.value(x), k, stride)?;
        let ng = self.needs(x);
        Ok(self.push(y, Op::MaxPool { x, argmax }, ng))
    }

    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avgpool(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(y, Op::AvgPool { x }, ng))
    }

    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), bias.map(|b| self.value(b)))?;
        let ng = self.needs(x) || self.needs(w) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(y, Op::Linear { x, w, bias }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let y = Tensor::new(ta.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add { a, b }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(y.with_requires_grad(false), Op::Reshape { x }, ng))
    }

    /// Zero-pads the last two axes of a rank-4 tensor symmetrically.
    pub fn pad2d(&mut self, x: Var, pad: usize) -> Result<Var> {
        let y = pad2d(self.value(x), pad)?;
        let ng = self.needs(x);
        Ok(self.push(y, Op::Pad { x, pad }, ng))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    /// Backpropagates from a scalar node. Afterwards every leaf that
    /// requires a gradient holds one (zeros if it did not influence `root`).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward", self.value(root).shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        self.trace.clear();

        for i in (0..=root.0).rev() {
            self.trace.push(i);
            let Some(gy) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let acc = |grads: &mut Vec<Option<Vec<f32>>>, v: Var, g: Vec<f32>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(gy);
                    continue;
                }
                Op::Conv {
                    x,
                    w,
                    bias,
                    stride,
                    padding,
                } => {
                    let need = (
                        self.nodes[x.0].needs_grad,
                        self.nodes[w.0].needs_grad,
                        bias.is_some_and(|b| self.nodes[b.0].needs_grad),
                    );
                    let g = ops::conv2d_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        &gy,
                        *stride,
                        *padding,
                        need,
                    )?;
                    if let Some(gx) = g.x {
                        acc(&mut grads, *x, gx);
                    }
                    if let Some(gw) = g.w {
                        acc(&mut grads, *w, gw);
                    }
                    if let (Some(b), Some(gb)) = (bias, g.bias) {
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Act { x, kind } => {
                    let gx = ops::activation_backward(&self.nodes[x.0].value, &gy, *kind);
                    acc(&mut grads, *x, gx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    saved,
                } => {
                    let (gx, gg, gb) = ops::batchnorm2d_backward(
                        self.nodes[x.0].value.shape(),
                        &self.nodes[gamma.0].value,
                        saved,
                        &gy,
                    );
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gamma, gg);
                    acc(&mut grads, *beta, gb);
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = vec![0.0f32; self.nodes[x.0].value.len()];
                    for (&idx, &g) in argmax.iter().zip(&gy) {
                        gx[idx] += g;
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::AvgPool { x } => {
                    let s = self.nodes[x.0].value.shape();
                    let hw = s[2] * s[3];
                    let gx = gy
                        .iter()
                        .flat_map(|&g| std::iter::repeat_n(g / hw as f32, hw))
                        .collect();
                    acc(&mut grads, *x, gx);
                }
                Op::Linear { x, w, bias } => {
                    let (gx, gw, gb) =
                        ops::linear_backward(&self.nodes[x.0].value, &self.nodes[w.0].value, &gy);
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                    if let Some(b) = bias {
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *a, gy.clone());
                    acc(&mut grads, *b, gy);
                }
                Op::Reshape { x } => acc(&mut grads, *x, gy),
                Op::Pad { x, pad } => {
                    let gx = unpad2d(&gy, self.nodes[x.0].value.shape(), *pad);
                    acc(&mut grads, *x, gx);
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    labels,
                } => {
                    let k = self.nodes[logits.0].value.shape()[1];
                    let g = ops::softmax_cross_entropy_backward(probs, labels, k, gy[0]);
                    acc(&mut grads, *logits, g);
                }
            }
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                node.value.set_grad(g)?;
            }
        }
        Ok(())
    }
}

pub fn pad2d(x: &Tensor, pad: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("pad2d", s, &[4]));
    }
    if pad == 0 {
        return Ok(x.clone().with_requires_grad(false));
    }
    let (h, w) = (s[2], s[3]);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0f32; s[0] * s[1] * ph * pw];
    for (plane, src) in out.chunks_mut(ph * pw).zip(x.data().chunks(h * w)) {
        for i in 0..h {
            plane[(i + pad) * pw + pad..][..w].copy_from_slice(&src[i * w..(i + 1) * w]);
        }
    }
    Tensor::new(&[s[0], s[1], ph, pw], out)
}

fn unpad2d(gy: &[f32], shape: &[usize], pad: usize) -> Vec<f32> {
    let (h, w) = (shape[2], shape[3]);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut gx = Vec::with_capacity(shape.iter().product());
    for plane in gy.chunks(ph * pw) {
        for i in 0..h {
            gx.extend_from_slice(&plane[(i + pad) * pw + pad..][..w]);
        }
    }
    gx
}
