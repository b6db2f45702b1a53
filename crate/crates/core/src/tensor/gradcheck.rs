//! Central finite-difference checks of graph gradients.
//!
//! The checked scalar is `L = Σ r_i y_i` for a fixed random projection `r`
//! of the function output `y`, summed in f64. The error reported for each
//! input is `max_j |fd_j - an_j| / max(max_j |an_j|, max_j |fd_j|)` over the
//! checked coordinates.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckOptions {
    pub step: f32,
    /// Coordinates checked per input; larger inputs are subsampled.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: 1e-3,
            max_coords: 64,
            seed: 0,
        }
    }
}

fn projected(inputs: &[Tensor], f: &impl Fn(&mut Graph, &[Var]) -> Result<Var>, r: &[f32]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    Ok(g.value(y)
        .data()
        .iter()
        .zip(r)
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum())
}

/// Relative gradient error of `f` with respect to each of `inputs`.
pub fn check_gradients(
    inputs: &[Tensor],
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    options: CheckOptions,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let y = f(&mut g, &vars)?;
    let n = g.value(y).len();
    let r: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let flat = g.reshape(y, &[1, n])?;
    let rv = g.input(Tensor::new(&[1, n], r.clone())?);
    let loss = g.linear(flat, rv, None)?;
    g.backward(loss)?;

    let mut errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).expect("leaf requires grad").to_vec();
        let len = inputs[i].len();
        let coords: Vec<usize> = if len <= options.max_coords {
            (0..len).collect()
        } else {
            sample(&mut rng, len, options.max_coords).into_vec()
        };
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for j in coords {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + options.step;
            let plus = projected(&work, &f, &r)?;
            work[i].data_mut()[j] = orig - options.step;
            let minus = projected(&work, &f, &r)?;
            work[i].data_mut()[j] = orig;
            let h = ((orig + options.step) as f64 - (orig - options.step) as f64) / 2.0;
            let fd = (plus - minus) / (2.0 * h);
            let an = analytic[j] as f64;
            diff = diff.max((fd - an).abs());
            scale = scale.max(fd.abs()).max(an.abs());
        }
        errors.push(if scale == 0.0 { 0.0 } else { diff / scale });
    }
    Ok(errors)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub input: usize,
    pub error: f64,
}

fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from zero so `±step` never crosses the ReLU kink.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0f32);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape, v).expect("shape")
}

/// Distinct values on a 0.05 grid, shuffled, so pooling windows never tie.
fn spaced(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| i as f32 * 0.05 - n as f32 * 0.025).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).expect("shape")
}

/// Every differentiable graph op, plus the multi-branch optical head and a
/// small network, checked for one seed.
pub fn differentiable_op_suite(seed: u64) -> Result<Vec<OpCheck>> {
    use super::ops::{Activation, BnMode, RunningStats};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = CheckOptions {
        seed,
        ..Default::default()
    };
    let mut out = Vec::new();
    let mut run = |op: &'static str, inputs: Vec<Tensor>, f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>| -> Result<()> {
        for (input, error) in check_gradients(&inputs, f, opts)?.into_iter().enumerate() {
            out.push(OpCheck { op, input, error });
        }
        Ok(())
    };
    let r = &mut rng;

    run(
        "conv2d",
        vec![uniform(&[1, 2, 8, 8], -1.0, 1.0, r), uniform(&[3, 2, 3, 3], -1.0, 1.0, r), uniform(&[3], -1.0, 1.0, r)],
        &|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1),
    )?;
    run(
        "conv2d_stride2",
        vec![uniform(&[2, 2, 7, 7], -1.0, 1.0, r), uniform(&[2, 2, 3, 3], -1.0, 1.0, r)],
        &|g, v| g.conv2d(v[0], v[1], None, 2, 0),
    )?;
    run(
        "conv2d_1x1",
        vec![uniform(&[1, 4, 5, 5], -1.0, 1.0, r), uniform(&[3, 4, 1, 1], -1.0, 1.0, r), uniform(&[3], -1.0, 1.0, r)],
        &|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 0),
    )?;
    run("relu", vec![off_zero(&[2, 3, 4, 4], r)], &|g, v| Ok(g.activation(v[0], Activation::Relu)))?;
    run("silu", vec![uniform(&[2, 3, 4, 4], -3.0, 3.0, r)], &|g, v| Ok(g.activation(v[0], Activation::Silu)))?;
    run(
        "batchnorm_train",
        vec![uniform(&[4, 3, 3, 3], -2.0, 2.0, r), uniform(&[3], 0.5, 1.5, r), uniform(&[3], -0.5, 0.5, r)],
        &|g, v| g.batchnorm2d(v[0], v[1], v[2], &mut RunningStats::new(3), BnMode::Train),
    )?;
    let stats = RunningStats {
        mean: vec![0.1, -0.2, 0.3],
        var: vec![0.5, 1.5, 2.0],
    };
    run(
        "batchnorm_eval",
        vec![uniform(&[2, 3, 3, 3], -2.0, 2.0, r), uniform(&[3], 0.5, 1.5, r), uniform(&[3], -0.5, 0.5, r)],
        &|g, v| g.batchnorm2d(v[0], v[1], v[2], &mut stats.clone(), BnMode::Eval),
    )?;
    run("maxpool2d", vec![spaced(&[2, 2, 6, 6], r)], &|g, v| g.maxpool2d(v[0], 2, 2))?;
    run("global_avgpool", vec![uniform(&[2, 3, 4, 5], -1.0, 1.0, r)], &|g, v| g.global_avgpool(v[0]))?;
    run(
        "linear",
        vec![uniform(&[3, 5], -1.0, 1.0, r), uniform(&[4, 5], -1.0, 1.0, r), uniform(&[4], -1.0, 1.0, r)],
        &|g, v| g.linear(v[0], v[1], Some(v[2])),
    )?;
    run(
        "add",
        vec![uniform(&[2, 3, 4], -1.0, 1.0, r), uniform(&[2, 3, 4], -1.0, 1.0, r)],
        &|g, v| g.add(v[0], v[1]),
    )?;
    run("reshape", vec![uniform(&[2, 3, 4], -1.0, 1.0, r)], &|g, v| {
        let y = g.reshape(v[0], &[4, 6])?;
        Ok(g.activation(y, Activation::Silu))
    })?;
    run("pad2d", vec![uniform(&[1, 2, 3, 4], -1.0, 1.0, r)], &|g, v| g.pad2d(v[0], 2))?;
    let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..6)).collect();
    run("softmax_cross_entropy", vec![uniform(&[4, 6], -2.0, 2.0, r)], &|g, v| {
        g.softmax_cross_entropy(v[0], &labels)
    })?;
    run(
        "optical_head",
        vec![
            uniform(&[2, 3, 9, 9], -1.0, 1.0, r),
            uniform(&[2, 1, 5, 5], -0.5, 0.5, r),
            uniform(&[2, 1, 3, 3], -0.5, 0.5, r),
            uniform(&[4, 6, 1, 1], -0.5, 0.5, r),
        ],
        &|g, v| {
            let x = g.reshape(v[0], &[6, 1, 9, 9])?;
            let a = g.conv2d(x, v[1], None, 1, 2)?;
            let b = g.conv2d(x, v[2], None, 1, 1)?;
            let m = g.add(a, b)?;
            let m = g.reshape(m, &[2, 6, 9, 9])?;
            let m = g.activation(m, Activation::Silu);
            g.conv2d(m, v[3], None, 1, 0)
        },
    )?;
    run(
        "toy_net",
        vec![
            uniform(&[3, 2, 3, 3], -1.0, 1.0, r),
            uniform(&[4, 2, 3, 3], -0.5, 0.5, r),
            uniform(&[4], 1.0, 2.0, r),
            uniform(&[4], -0.5, 0.5, r),
            uniform(&[5, 4], -2.0, 2.0, r),
        ],
        &|g, v| {
            let y = g.conv2d(v[0], v[1], None, 1, 1)?;
            let y = g.batchnorm2d(y, v[2], v[3], &mut RunningStats::new(4), BnMode::Train)?;
            let y = g.activation(y, Activation::Silu);
            let y = g.global_avgpool(y)?;
            let y = g.reshape(y, &[3, 4])?;
            g.linear(y, v[4], None)
        },
    )?;
    Ok(out)
}
