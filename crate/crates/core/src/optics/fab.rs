//! Lithography model: Gaussian dose blur followed by uniform phase
//! quantization. The blur acts on the unit phasor `exp(iφ)` so that it is
//! safe across the 0/2π wrap; boundaries are periodic like the propagation
//! grid.

use std::f64::consts::TAU;

use num_complex::Complex64;

use super::psf::{wrap_phase, PhaseMask};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FabModel {
    /// 0 disables quantization; otherwise >= 2
    pub levels: u32,
    /// Gaussian sigma in pixels; 0 disables the blur
    pub dose_blur_sigma: f64,
}

impl Default for FabModel {
    fn default() -> Self {
        FabModel {
            levels: 16,
            dose_blur_sigma: 0.0,
        }
    }
}

impl FabModel {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 1 {
            return Err(Error::Parameter(
                "fabrication model needs levels >= 2 (0 = continuous)".into(),
            ));
        }
        if !(self.dose_blur_sigma.is_finite() && self.dose_blur_sigma >= 0.0) {
            return Err(Error::Parameter(format!(
                "dose blur sigma must be >= 0, got {}",
                self.dose_blur_sigma
            )));
        }
        Ok(())
    }
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable periodic Gaussian blur of a complex n×n grid. The kernel is
/// symmetric, so this operator is its own transpose.
pub(crate) fn blur_periodic(data: &[Complex64], n: usize, sigma: f64) -> Vec<Complex64> {
    if sigma == 0.0 {
        return data.to_vec();
    }
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let idx = |i: isize| i.rem_euclid(n as isize) as usize;
    let mut rows = vec![Complex64::default(); n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = Complex64::default();
            for (t, &w) in taps.iter().enumerate() {
                acc += data[i * n + idx(j as isize + t as isize - r)] * w;
            }
            rows[i * n + j] = acc;
        }
    }
    let mut out = vec![Complex64::default(); n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = Complex64::default();
            for (t, &w) in taps.iter().enumerate() {
                acc += rows[idx(i as isize + t as isize - r) * n + j] * w;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

pub(crate) fn quantize(phase: f64, levels: u32) -> f32 {
    if levels == 0 {
        return wrap_phase(phase);
    }
    let step = TAU / levels as f64;
    let k = (phase.rem_euclid(TAU) / step).round() as u64 % levels as u64;
    (k as f64 * step) as f32
}

/// Blurred (unquantized) phase together with the blurred phasor, which the
/// retrieval gradient needs.
pub(crate) fn blur_phase(phase: &[f64], n: usize, sigma: f64) -> (Vec<f64>, Vec<Complex64>) {
    let phasor: Vec<Complex64> = phase.iter().map(|&p| Complex64::from_polar(1.0, p)).collect();
    let z = blur_periodic(&phasor, n, sigma);
    (z.iter().map(|c| c.arg()).collect(), z)
}

/// Pulls a gradient w.r.t. the blurred phase back to the design phase.
/// Quantization is passed straight through by the caller.
pub(crate) fn blur_phase_adjoint(
    phase: &[f64],
    blurred: &[Complex64],
    grad_out: &[f64],
    n: usize,
    sigma: f64,
) -> Vec<f64> {
    if sigma == 0.0 {
        return grad_out.to_vec();
    }
    // dβ_j/dφ_m = G_jm Re(e^{iφ_m} / z_j)
    let q: Vec<Complex64> = grad_out
        .iter()
        .zip(blurred)
        .map(|(&h, z)| {
            let d = z.norm_sqr().max(1e-24);
            h * z.conj() / d
        })
        .collect();
    let back = blur_periodic(&q, n, sigma);
    phase
        .iter()
        .zip(&back)
        .map(|(&p, b)| (Complex64::from_polar(1.0, p) * b).re)
        .collect()
}

pub fn apply_fab_model(mask: &PhaseMask, fab: &FabModel) -> Result<PhaseMask> {
    fab.validate()?;
    let n = mask.size();
    let phase: Vec<f64> = mask.phase().iter().map(|&p| p as f64).collect();
    let blurred = if fab.dose_blur_sigma > 0.0 {
        blur_phase(&phase, n, fab.dose_blur_sigma).0
    } else {
        phase
    };
    let out = blurred.iter().map(|&p| quantize(p, fab.levels)).collect();
    PhaseMask::new(out, fab.levels, *mask.config())
}
