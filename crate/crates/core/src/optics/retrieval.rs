//! Phase retrieval: Gerchberg–Saxton alternating projections as the
//! baseline and gradient descent on the amplitude misfit
//! `L(φ) = Σ (sqrt(I(φ) + ε) - sqrt(T))²`, where `I` is the unit-sum
//! simulated PSF. The gradient is taken with Wirtinger calculus: the
//! residual is back-propagated through the conjugate transfer function.

use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::OpticsConfig;
use super::fab::{self, FabModel};
use super::propagate::Propagator;
use super::psf::{aperture, PhaseMask, Psf};
use crate::error::{Error, Result};

pub const AMPLITUDE_EPS: f64 = 1e-12;
/// Abort when the loss exceeds this multiple of the initial loss.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Clone, Debug)]
pub struct Retrieval {
    pub mask: PhaseMask,
    /// loss of the current iterate, one entry per iteration
    pub loss_history: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdOptions {
    pub iters: usize,
    /// initial step size (radians per unit normalized gradient)
    pub lr: f64,
    pub seed: u64,
    pub fab: Option<FabModel>,
}

impl Default for SgdOptions {
    fn default() -> Self {
        SgdOptions {
            iters: 500,
            lr: 0.1,
            seed: 0,
            fab: None,
        }
    }
}

/// Uniform random phase in [0, 2π) from a fixed seed.
pub fn random_phase(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * n).map(|_| rng.random_range(0.0..TAU)).collect()
}

/// Amplitude misfit between two unit-sum intensity grids.
/// Unit-sum target made of `spots` Gaussian spots (std `sigma` pixels) at
/// random centers in `[margin, n - margin)` on both axes.
pub fn sparse_spot_target(n: usize, spots: usize, sigma: f64, margin: usize, seed: u64) -> Result<Psf> {
    if spots == 0 || 2 * margin >= n || !(sigma > 0.0) {
        return Err(Error::Parameter(format!(
            "sparse spot target needs spots > 0, 2*margin < n and sigma > 0 (spots {spots}, margin {margin}, n {n}, sigma {sigma})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<(f64, f64)> = (0..spots)
        .map(|_| {
            (
                rng.random_range(margin..n - margin) as f64,
                rng.random_range(margin..n - margin) as f64,
            )
        })
        .collect();
    let mut t = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            t[i * n + j] = centers
                .iter()
                .map(|&(r, c)| {
                    let d2 = (i as f64 - r).powi(2) + (j as f64 - c).powi(2);
                    (-d2 / (2.0 * sigma * sigma)).exp()
                })
                .sum();
        }
    }
    Psf::normalize(n, n, &t)
}

pub fn amplitude_loss(intensity: &[f64], target_amp: &[f64]) -> f64 {
    intensity
        .iter()
        .zip(target_amp)
        .map(|(&i, &t)| ((i + AMPLITUDE_EPS).sqrt() - t).powi(2))
        .sum()
}

pub fn psf_loss(psf: &Psf, target: &Psf) -> f64 {
    let i: Vec<f64> = psf.intensity().iter().map(|&v| v as f64).collect();
    let t: Vec<f64> = target.intensity().iter().map(|&v| (v as f64).sqrt()).collect();
    amplitude_loss(&i, &t)
}

fn check_target(target: &Psf, config: &OpticsConfig) -> Result<()> {
    let n = config.mask_pixels;
    if target.height() != n || target.width() != n {
        return Err(Error::Geometry(format!(
            "target is {}x{}, mask grid is {n}x{n}",
            target.height(),
            target.width()
        )));
    }
    if !target.is_normalized() {
        return Err(Error::Contract(format!(
            "retrieval target must be unit-sum, sum is {}",
            target.sum()
        )));
    }
    Ok(())
}

/// Differentiable forward model shared by the SGD solver and its tests.
pub struct PhaseObjective {
    n: usize,
    prop: Propagator,
    aperture: Vec<f64>,
    target_amp: Vec<f64>,
    fab: Option<FabModel>,
}

impl PhaseObjective {
    pub fn new(target: &Psf, config: &OpticsConfig, fab: Option<FabModel>) -> Result<Self> {
        check_target(target, config)?;
        if let Some(f) = &fab {
            f.validate()?;
        }
        let ap = aperture(config);
        if ap.iter().all(|&a| a == 0.0) {
            return Err(Error::Degenerate("empty aperture".into()));
        }
        Ok(PhaseObjective {
            n: config.mask_pixels,
            prop: Propagator::new(config)?,
            aperture: ap,
            target_amp: target.intensity().iter().map(|&v| (v as f64).sqrt()).collect(),
            fab,
        })
    }

    /// Phase actually written to the element (after the fabrication model).
    pub fn realized(&self, phase: &[f64]) -> Vec<f64> {
        match &self.fab {
            None => phase.to_vec(),
            Some(f) => {
                let blurred = if f.dose_blur_sigma > 0.0 {
                    fab::blur_phase(phase, self.n, f.dose_blur_sigma).0
                } else {
                    phase.to_vec()
                };
                blurred
                    .iter()
                    .map(|&p| fab::quantize(p, f.levels) as f64)
                    .collect()
            }
        }
    }

    fn sensor_field(&mut self, realized: &[f64]) -> (Vec<Complex64>, Vec<Complex64>) {
        let v: Vec<Complex64> = realized
            .iter()
            .zip(&self.aperture)
            .map(|(&p, &a)| Complex64::from_polar(a, p))
            .collect();
        let mut u = v.clone();
        self.prop.forward(&mut u);
        (v, u)
    }

    fn normalized_intensity(u: &[Complex64]) -> (Vec<f64>, f64) {
        let e: f64 = u.iter().map(|c| c.norm_sqr()).sum();
        let e = e.max(f64::MIN_POSITIVE);
        (u.iter().map(|c| c.norm_sqr() / e).collect(), e)
    }

    pub fn loss(&mut self, phase: &[f64]) -> f64 {
        let r = self.realized(phase);
        let (_, u) = self.sensor_field(&r);
        let (i, _) = Self::normalized_intensity(&u);
        amplitude_loss(&i, &self.target_amp)
    }

    /// Loss and dL/dφ.
    pub fn loss_and_grad(&mut self, phase: &[f64]) -> (f64, Vec<f64>) {
        let (blurred, z) = match &self.fab {
            Some(f) if f.dose_blur_sigma > 0.0 => {
                let (b, z) = fab::blur_phase(phase, self.n, f.dose_blur_sigma);
                (b, Some(z))
            }
            _ => (phase.to_vec(), None),
        };
        let realized: Vec<f64> = match &self.fab {
            Some(f) => blurred.iter().map(|&p| fab::quantize(p, f.levels) as f64).collect(),
            None => blurred.clone(),
        };
        let (v, u) = self.sensor_field(&realized);
        let (inten, e) = Self::normalized_intensity(&u);
        let loss = amplitude_loss(&inten, &self.target_amp);

        // dL/dI_j, then through I = |u|²/E
        let g: Vec<f64> = inten
            .iter()
            .zip(&self.target_amp)
            .map(|(&i, &t)| {
                let a = (i + AMPLITUDE_EPS).sqrt();
                (a - t) / a
            })
            .collect();
        let s: f64 = g.iter().zip(&inten).map(|(gj, ij)| gj * ij).sum();
        let mut grad_u: Vec<Complex64> = u
            .iter()
            .zip(&g)
            .map(|(uj, &gj)| uj * (2.0 * (gj - s) / e))
            .collect();
        self.prop.adjoint(&mut grad_u);
        let grad_psi: Vec<f64> = grad_u
            .iter()
            .zip(&v)
            .map(|(gv, vv)| (gv * vv.conj()).im)
            .collect();
        let grad = match (&self.fab, z) {
            (Some(f), Some(z)) => {
                fab::blur_phase_adjoint(phase, &z, &grad_psi, self.n, f.dose_blur_sigma)
            }
            _ => grad_psi,
        };
        (loss, grad)
    }
}

fn finish(phase: &[f64], config: &OpticsConfig, fab: Option<&FabModel>) -> Result<PhaseMask> {
    let mask = PhaseMask::from_unwrapped(phase, *config)?;
    match fab {
        Some(f) => fab::apply_fab_model(&mask, f),
        None => Ok(mask),
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-12;

/// Descent along Adam-preconditioned gradient steps of fixed size `lr`.
/// A trial step that would increase the loss is rejected and `lr` is
/// halved, so `loss_history` (the loss of the accepted iterate after each
/// iteration) never increases.
pub fn retrieve_phase_sgd_with(
    target: &Psf,
    config: &OpticsConfig,
    opts: &SgdOptions,
) -> Result<Retrieval> {
    if !(opts.lr.is_finite() && opts.lr > 0.0) {
        return Err(Error::Parameter(format!("lr must be > 0, got {}", opts.lr)));
    }
    let mut obj = PhaseObjective::new(target, config, opts.fab)?;
    let n = config.mask_pixels;
    let mut phase = random_phase(n, opts.seed);
    let mut history = Vec::with_capacity(opts.iters);
    if opts.iters == 0 {
        return Ok(Retrieval {
            mask: finish(&phase, config, opts.fab.as_ref())?,
            loss_history: history,
        });
    }
    let (mut loss, mut grad) = obj.loss_and_grad(&phase);
    let initial = loss;
    let mut lr = opts.lr;
    let (mut m, mut v) = (vec![0.0; n * n], vec![0.0; n * n]);
    let mut trial = vec![0.0; n * n];
    for it in 0..opts.iters {
        let t = (it + 1) as i32;
        let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
        for ((((x, p), g), m), v) in trial.iter_mut().zip(&phase).zip(&grad).zip(&mut m).zip(&mut v) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *x = p - lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
        let (tl, tg) = obj.loss_and_grad(&trial);
        if !tl.is_finite() || tl > DIVERGENCE_FACTOR * initial {
            history.push(tl);
            return Err(Error::Divergence {
                iteration: it,
                loss: tl,
                history,
            });
        }
        if tl <= loss {
            std::mem::swap(&mut phase, &mut trial);
            loss = tl;
            grad = tg;
        } else {
            lr *= 0.5;
        }
        history.push(loss);
    }
    Ok(Retrieval {
        mask: finish(&phase, config, opts.fab.as_ref())?,
        loss_history: history,
    })
}

pub fn retrieve_phase_sgd(
    target: &Psf,
    config: &OpticsConfig,
    iters: usize,
    lr: f64,
    fab: Option<FabModel>,
) -> Result<Retrieval> {
    retrieve_phase_sgd_with(
        target,
        config,
        &SgdOptions {
            iters,
            lr,
            fab,
            ..SgdOptions::default()
        },
    )
}

/// Gerchberg–Saxton with loss tracing. The loss sequence is not guaranteed
/// to be monotone.
pub fn gerchberg_saxton_traced(
    target: &Psf,
    config: &OpticsConfig,
    iters: usize,
    seed: u64,
) -> Result<Retrieval> {
    if iters == 0 {
        return Err(Error::Parameter("Gerchberg-Saxton needs iters >= 1".into()));
    }
    check_target(target, config)?;
    let n = config.mask_pixels;
    let ap = aperture(config);
    if ap.iter().all(|&a| a == 0.0) {
        return Err(Error::Degenerate("empty aperture".into()));
    }
    let mut prop = Propagator::new(config)?;
    let target_amp: Vec<f64> = target.intensity().iter().map(|&v| (v as f64).sqrt()).collect();
    let mut phase = random_phase(n, seed);
    let mut history = Vec::with_capacity(iters);
    for _ in 0..iters {
        let mut u = mask_field_f64(&phase, &ap);
        prop.forward(&mut u);
        let e: f64 = u.iter().map(|c| c.norm_sqr()).sum();
        let inten: Vec<f64> = u.iter().map(|c| c.norm_sqr() / e).collect();
        history.push(amplitude_loss(&inten, &target_amp));
        let scale = e.sqrt();
        for (c, &t) in u.iter_mut().zip(&target_amp) {
            let arg = c.arg();
            *c = Complex64::from_polar(t * scale, arg);
        }
        prop.adjoint(&mut u);
        for ((p, c), &a) in phase.iter_mut().zip(&u).zip(&ap) {
            if a > 0.0 {
                *p = c.arg();
            }
        }
    }
    Ok(Retrieval {
        mask: PhaseMask::from_unwrapped(&phase, *config)?,
        loss_history: history,
    })
}

pub fn gerchberg_saxton(target: &Psf, config: &OpticsConfig, iters: usize) -> Result<PhaseMask> {
    Ok(gerchberg_saxton_traced(target, config, iters, 0)?.mask)
}

fn mask_field_f64(phase: &[f64], ap: &[f64]) -> Vec<Complex64> {
    phase
        .iter()
        .zip(ap)
        .map(|(&p, &a)| Complex64::from_polar(a, p))
        .collect()
}
