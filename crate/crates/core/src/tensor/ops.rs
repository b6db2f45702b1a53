//! Forward and backward kernels. These are plain functions over tensors;
//! [`super::Graph`] records them on a tape and chains the backward halves.

use matrixmultiply::sgemm;
use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Number of fixed partial-sum groups used when reducing weight gradients
/// over the batch. Fixed so results do not depend on the thread count.
const GRAD_GROUPS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "silu" => Ok(Activation::Silu),
            other => Err(Error::Parameter(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// `c = a(m×k) · b(k×n)` for row-major slices, `c = alpha*a*b + beta*c`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    beta: f32,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked by the callers against m, k, n and
    // the strides above address exactly those row-major extents.
    unsafe {
        sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
            return Err(Error::shape("conv2d", x, w));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be >= 1".into()));
        }
        let (h, wd) = (x[2] + 2 * padding, x[3] + 2 * padding);
        if w[2] > h || w[3] > wd {
            return Err(Error::shape("conv2d", x, w));
        }
        Ok(ConvGeometry {
            n: x[0],
            cin: x[1],
            h: x[2],
            w: x[3],
            cout: w[0],
            kh: w[2],
            kw: w[3],
            stride,
            padding,
            out_h: (h - w[2]) / stride + 1,
            out_w: (wd - w[3]) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn macs(&self) -> u64 {
        (self.n * self.cout * self.out_h * self.out_w * self.cin * self.kh * self.kw) as u64
    }
}

fn im2col(g: &ConvGeometry, x: &[f32], cols: &mut [f32]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row = &mut cols[((c * g.kh + u) * g.kw + v) * plane..][..plane];
                for oi in 0..g.out_h {
                    let i = (oi * g.stride + u) as isize - g.padding as isize;
                    let dst = &mut row[oi * g.out_w..(oi + 1) * g.out_w];
                    if i < 0 || i >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &xc[i as usize * g.w..(i as usize + 1) * g.w];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let j = (oj * g.stride + v) as isize - g.padding as isize;
                        *d = if j < 0 || j >= g.w as isize {
                            0.0
                        } else {
                            src[j as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeometry, cols: &[f32], gx: &mut [f32]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let gc = &mut gx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row = &cols[((c * g.kh + u) * g.kw + v) * plane..][..plane];
                for oi in 0..g.out_h {
                    let i = (oi * g.stride + u) as isize - g.padding as isize;
                    if i < 0 || i >= g.h as isize {
                        continue;
                    }
                    let dst = &mut gc[i as usize * g.w..(i as usize + 1) * g.w];
                    for (oj, &s) in row[oi * g.out_w..(oi + 1) * g.out_w].iter().enumerate() {
                        let j = (oj * g.stride + v) as isize - g.padding as isize;
                        if j >= 0 && j < g.w as isize {
                            dst[j as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation via im2col + GEMM.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::shape("conv2d bias", b.shape(), &[g.cout]));
        }
    }
    let in_item = g.cin * g.h * g.w;
    let out_item = g.cout * g.out_plane();
    let mut out = vec![0.0f32; g.n * out_item];
    let (xd, wd) = (x.data(), w.data());
    out.par_chunks_mut(out_item).enumerate().for_each_init(
        || vec![0.0f32; g.patch() * g.out_plane()],
        |cols, (n, y)| {
            im2col(&g, &xd[n * in_item..(n + 1) * in_item], cols);
            gemm(g.cout, g.patch(), g.out_plane(), wd, false, cols, false, y, 0.0);
            if let Some(b) = bias {
                for (o, row) in y.chunks_mut(g.out_plane()).enumerate() {
                    let bo = b.data()[o];
                    row.iter_mut().for_each(|v| *v += bo);
                }
            }
        },
    );
    Tensor::new(&[g.n, g.cout, g.out_h, g.out_w], out)
}

pub struct ConvGrads {
    pub x: Option<Vec<f32>>,
    pub w: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &[f32],
    stride: usize,
    padding: usize,
    need: (bool, bool, bool),
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, padding)?;
    let in_item = g.cin * g.h * g.w;
    let out_item = g.cout * g.out_plane();
    let patch = g.patch();
    let plane = g.out_plane();
    let (xd, wd) = (x.data(), w.data());

    let gx = need.0.then(|| {
        let mut gx = vec![0.0f32; g.n * in_item];
        gx.par_chunks_mut(in_item).enumerate().for_each_init(
            || vec![0.0f32; patch * plane],
            |cols, (n, gxn)| {
                // cols = W^T · gy_n
                gemm(patch, g.cout, plane, wd, true, &gy[n * out_item..(n + 1) * out_item], false, cols, 0.0);
                col2im(&g, cols, gxn);
            },
        );
        gx
    });

    let gw = need.1.then(|| {
        let per = g.n.div_ceil(GRAD_GROUPS);
        let partials: Vec<Vec<f32>> = (0..GRAD_GROUPS)
            .into_par_iter()
            .map(|grp| {
                let mut acc = vec![0.0f32; w.len()];
                let mut cols = vec![0.0f32; patch * plane];
                for n in (grp * per)..((grp + 1) * per).min(g.n) {
                    im2col(&g, &xd[n * in_item..(n + 1) * in_item], &mut cols);
                    // acc += gy_n · cols^T
                    gemm(g.cout, plane, patch, &gy[n * out_item..(n + 1) * out_item], false, &cols, true, &mut acc, 1.0);
                }
                acc
            })
            .collect();
        let mut gw = vec![0.0f32; w.len()];
        for p in &partials {
            gw.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        gw
    });

    let gb = need.2.then(|| {
        let mut gb = vec![0.0f32; g.cout];
        for n in 0..g.n {
            for (o, row) in gy[n * out_item..(n + 1) * out_item].chunks(plane).enumerate() {
                gb[o] += row.iter().sum::<f32>();
            }
        }
        gb
    });

    Ok(ConvGrads { x: gx, w: gw, bias: gb })
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Relu => x.map(|v| v.max(0.0)),
        Activation::Silu => x.map(|v| v * sigmoid(v)),
    }
}

pub fn activation_backward(x: &Tensor, gy: &[f32], kind: Activation) -> Vec<f32> {
    x.data()
        .iter()
        .zip(gy)
        .map(|(&v, &g)| match kind {
            Activation::Relu => {
                if v > 0.0 {
                    g
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = sigmoid(v);
                g * s * (1.0 + v * (1.0 - s))
            }
        })
        .collect()
}

/// Saved state from a batch-norm forward pass.
pub struct BnSaved {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
    pub mode: BnMode,
}

fn bn_dims(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("batchnorm2d", s, gamma.shape()));
    }
    if gamma.shape() != [s[1]] || beta.shape() != [s[1]] {
        return Err(Error::shape("batchnorm2d", s, gamma.shape()));
    }
    Ok((s[0], s[1], s[2] * s[3]))
}

pub fn batchnorm2d(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut RunningStats,
    mode: BnMode,
) -> Result<(Tensor, BnSaved)> {
    let (n, c, hw) = bn_dims(x, gamma, beta)?;
    if stats.mean.len() != c {
        return Err(Error::shape("batchnorm2d stats", x.shape(), &[stats.mean.len()]));
    }
    let count = n * hw;
    if mode == BnMode::Train && count < 2 {
        return Err(Error::Contract("batchnorm2d train mode needs N*H*W >= 2".into()));
    }
    let xd = x.data();
    let mut xhat = vec![0.0f32; xd.len()];
    let mut out = vec![0.0f32; xd.len()];
    let mut inv_std = vec![0.0f32; c];
    for ch in 0..c {
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut sum = 0.0f32;
                for b in 0..n {
                    sum += xd[(b * c + ch) * hw..][..hw].iter().sum::<f32>();
                }
                let mean = sum / count as f32;
                let mut sq = 0.0f32;
                for b in 0..n {
                    sq += xd[(b * c + ch) * hw..][..hw]
                        .iter()
                        .map(|v| (v - mean) * (v - mean))
                        .sum::<f32>();
                }
                let var = sq / count as f32;
                let unbiased = sq / (count - 1) as f32;
                stats.mean[ch] = (1.0 - BN_MOMENTUM) * stats.mean[ch] + BN_MOMENTUM * mean;
                stats.var[ch] = (1.0 - BN_MOMENTUM) * stats.var[ch] + BN_MOMENTUM * unbiased;
                (mean, var)
            }
            BnMode::Eval => (stats.mean[ch], stats.var[ch]),
        };
        let is = 1.0 / (var + BN_EPS).sqrt();
        inv_std[ch] = is;
        let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let xh = (xd[i] - mean) * is;
                xhat[i] = xh;
                out[i] = gm * xh + bt;
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), out)?,
        BnSaved { xhat, inv_std, mode },
    ))
}

/// Returns (gx, ggamma, gbeta).
pub fn batchnorm2d_backward(
    shape: &[usize],
    gamma: &Tensor,
    saved: &BnSaved,
    gy: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = (n * hw) as f32;
    let mut gx = vec![0.0f32; gy.len()];
    let mut gg = vec![0.0f32; c];
    let mut gb = vec![0.0f32; c];
    for ch in 0..c {
        let mut sum_g = 0.0f32;
        let mut sum_gx = 0.0f32;
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                sum_g += gy[i];
                sum_gx += gy[i] * saved.xhat[i];
            }
        }
        gg[ch] = sum_gx;
        gb[ch] = sum_g;
        let gm = gamma.data()[ch];
        let is = saved.inv_std[ch];
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                gx[i] = match saved.mode {
                    BnMode::Train => {
                        gm * is / m * (m * gy[i] - sum_g - saved.xhat[i] * sum_gx)
                    }
                    BnMode::Eval => gm * is * gy[i],
                };
            }
        }
    }
    (gx, gg, gb)
}

/// Max pooling; ties go to the first index in row-major window order.
/// Returns the output and the flat input index chosen for each output.
pub fn maxpool2d(x: &Tensor, k: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 4 || k == 0 || stride == 0 || k > s[2] || k > s[3] {
        return Err(Error::shape("maxpool2d", s, &[k, k]));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for nc in 0..n * c {
        let base = nc * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = base + oi * stride * w + oj * stride;
                for u in 0..k {
                    for v in 0..k {
                        let idx = base + (oi * stride + u) * w + oj * stride + v;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(&[n, c, oh, ow], out)?, arg))
}

pub fn global_avgpool(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("global_avgpool", s, &[4]));
    }
    let hw = s[2] * s[3];
    let out = x
        .data()
        .chunks(hw)
        .map(|p| p.iter().sum::<f32>() / hw as f32)
        .collect();
    Tensor::new(&[s[0], s[1], 1, 1], out)
}

/// `y = x · wᵀ + b` with x: [N,F], w: [O,F], b: [O].
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(Error::shape("linear", xs, ws));
    }
    let (n, f, o) = (xs[0], xs[1], ws[0]);
    let mut out = vec![0.0f32; n * o];
    if let Some(b) = b {
        if b.shape() != [o] {
            return Err(Error::shape("linear bias", b.shape(), &[o]));
        }
        for row in out.chunks_mut(o) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(n, f, o, x.data(), false, w.data(), true, &mut out, 1.0);
    Tensor::new(&[n, o], out)
}

/// Returns (gx, gw, gb).
pub fn linear_backward(x: &Tensor, w: &Tensor, gy: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (n, f, o) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    let mut gx = vec![0.0f32; n * f];
    gemm(n, o, f, gy, false, w.data(), false, &mut gx, 0.0);
    let mut gw = vec![0.0f32; o * f];
    gemm(o, n, f, gy, true, x.data(), false, &mut gw, 0.0);
    let mut gb = vec![0.0f32; o];
    for row in gy.chunks(o) {
        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    (gx, gw, gb)
}

/// Mean negative log-likelihood of softmax(logits). Returns (loss, probs).
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Vec<f32>)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape("softmax_cross_entropy", s, &[labels.len()]));
    }
    let (n, k) = (s[0], s[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Index {
            op: "softmax_cross_entropy",
            index: bad,
            bound: k,
        });
    }
    let mut probs = vec![0.0f32; n * k];
    let mut loss = 0.0f32;
    for (i, row) in logits.data().chunks(k).enumerate() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[labels[i]];
        for (p, v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
            *p = (v - lse).exp();
        }
    }
    Ok((loss / n as f32, probs))
}

pub fn softmax_cross_entropy_backward(probs: &[f32], labels: &[usize], k: usize, gloss: f32) -> Vec<f32> {
    let n = labels.len();
    let mut g = probs.to_vec();
    for (i, row) in g.chunks_mut(k).enumerate() {
        row[labels[i]] -= 1.0;
        row.iter_mut().for_each(|v| *v *= gloss / n as f32);
    }
    g
}
