//! Band-limited angular-spectrum propagation on a periodic N×N grid.
//!
//! `H(fx, fy) = exp(i 2π d/λ sqrt(1 - (λfx)² - (λfy)²))` inside the passband,
//! zero for evanescent components and outside the band limit
//! `|f| <= 1 / (λ sqrt((2 Δf d)² + 1))`, `Δf = 1/(N pitch)`. |H| <= 1, so
//! energy never increases; on the passband the transfer is unitary.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::config::OpticsConfig;
use super::field::ComplexField;
use crate::error::{Error, Result};

/// Square 2-D FFT with cached plans.
#[derive(Clone)]
pub struct Fft2 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
    tmp: Vec<Complex64>,
}

impl Fft2 {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let scratch_len = fwd
            .get_inplace_scratch_len()
            .max(inv.get_inplace_scratch_len());
        Fft2 {
            n,
            fwd,
            inv,
            scratch: vec![Complex64::default(); scratch_len],
            tmp: vec![Complex64::default(); n * n],
        }
    }

    fn transpose(&mut self, data: &mut [Complex64]) {
        let n = self.n;
        for i in 0..n {
            for j in 0..n {
                self.tmp[j * n + i] = data[i * n + j];
            }
        }
        data.copy_from_slice(&self.tmp);
    }

    fn run(&mut self, data: &mut [Complex64], inverse: bool) {
        assert_eq!(data.len(), self.n * self.n);
        let plan = if inverse { self.inv.clone() } else { self.fwd.clone() };
        plan.process_with_scratch(data, &mut self.scratch);
        self.transpose(data);
        plan.process_with_scratch(data, &mut self.scratch);
        self.transpose(data);
    }

    /// Unnormalized forward transform.
    pub fn forward(&mut self, data: &mut [Complex64]) {
        self.run(data, false);
    }

    /// Inverse transform including the 1/N² factor.
    pub fn inverse(&mut self, data: &mut [Complex64]) {
        self.run(data, true);
        let s = 1.0 / (self.n * self.n) as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }
}

/// Signed frequency of FFT bin `u` on an `n`-point grid, 1/m.
pub fn frequency(u: usize, n: usize, pitch: f64) -> f64 {
    let k = if u < n.div_ceil(2) {
        u as f64
    } else {
        u as f64 - n as f64
    };
    k / (n as f64 * pitch)
}

pub fn transfer_function(config: &OpticsConfig, distance: f64) -> Vec<Complex64> {
    let n = config.mask_pixels;
    let lambda = config.wavelength;
    let df = 1.0 / (n as f64 * config.pitch);
    let limit = 1.0 / (lambda * ((2.0 * df * distance.abs()).powi(2) + 1.0).sqrt());
    let mut h = vec![Complex64::default(); n * n];
    for u in 0..n {
        let fy = frequency(u, n, config.pitch);
        for v in 0..n {
            let fx = frequency(v, n, config.pitch);
            let arg = 1.0 - (lambda * fx).powi(2) - (lambda * fy).powi(2);
            if arg <= 0.0 || fx.abs() > limit || fy.abs() > limit {
                continue;
            }
            h[u * n + v] = Complex64::from_polar(1.0, 2.0 * PI * distance / lambda * arg.sqrt());
        }
    }
    h
}

/// Reusable propagation operator for a fixed geometry.
#[derive(Clone)]
pub struct Propagator {
    n: usize,
    transfer: Vec<Complex64>,
    fft: Fft2,
    identity: bool,
}

impl Propagator {
    pub fn new(config: &OpticsConfig) -> Result<Self> {
        config.validate()?;
        config.check_sampling()?;
        Ok(Propagator {
            n: config.mask_pixels,
            transfer: transfer_function(config, config.distance),
            fft: Fft2::new(config.mask_pixels),
            identity: config.distance == 0.0,
        })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn transfer(&self) -> &[Complex64] {
        &self.transfer
    }

    fn apply(&mut self, data: &mut [Complex64], conjugate: bool) {
        if self.identity {
            return;
        }
        self.fft.forward(data);
        for (d, h) in data.iter_mut().zip(&self.transfer) {
            *d *= if conjugate { h.conj() } else { *h };
        }
        self.fft.inverse(data);
    }

    /// Mask plane → sensor plane, in place.
    pub fn forward(&mut self, data: &mut [Complex64]) {
        self.apply(data, false)
    }

    /// Adjoint (conjugate transfer), i.e. back-propagation by −d.
    pub fn adjoint(&mut self, data: &mut [Complex64]) {
        self.apply(data, true)
    }
}

pub fn propagate(field: &ComplexField, config: &OpticsConfig) -> Result<ComplexField> {
    let n = config.mask_pixels;
    if field.height() != n || field.width() != n {
        return Err(Error::Geometry(format!(
            "field is {}x{}, config expects {n}x{n}",
            field.height(),
            field.width()
        )));
    }
    if config.distance == 0.0 {
        config.validate()?;
        return Ok(field.clone());
    }
    let mut data = field.to_complex();
    let mut prop = Propagator::new(config)?;
    prop.forward(&mut data);
    Ok(ComplexField::from_complex(n, n, field.pitch(), &data))
}
