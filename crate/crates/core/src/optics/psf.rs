use std::f64::consts::TAU;

use num_complex::Complex64;

use super::config::OpticsConfig;
use super::propagate::Propagator;
use crate::error::{Error, Result};
use crate::tensor::{checkpoint, Tensor};

pub const NORMALIZATION_TOL: f64 = 1e-6;

/// Non-negative intensity pattern, row-major. Sums are taken in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Psf {
    height: usize,
    width: usize,
    intensity: Vec<f32>,
    normalized: bool,
}

impl Psf {
    /// Wraps a raw non-negative grid without rescaling it.
    pub fn new(height: usize, width: usize, intensity: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || intensity.len() != height * width {
            return Err(Error::shape("Psf::new", &[height, width], &[intensity.len()]));
        }
        if let Some(i) = intensity.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Contract(format!(
                "PSF intensity must be finite and >= 0, got {} at {i}",
                intensity[i]
            )));
        }
        let sum: f64 = intensity.iter().map(|&v| v as f64).sum();
        let normalized = (sum - 1.0).abs() <= NORMALIZATION_TOL;
        Ok(Psf {
            height,
            width,
            intensity,
            normalized,
        })
    }

    /// Rescales a non-negative grid to unit sum.
    pub fn normalize(height: usize, width: usize, intensity: &[f64]) -> Result<Self> {
        let sum: f64 = intensity.iter().sum();
        if !(sum.is_finite() && sum > 0.0) {
            return Err(Error::Degenerate(format!("PSF energy is {sum}")));
        }
        let scaled = intensity.iter().map(|&v| (v.max(0.0) / sum) as f32).collect();
        Psf::new(height, width, scaled)
    }

    pub fn delta() -> Self {
        Psf::new(1, 1, vec![1.0]).unwrap()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn intensity(&self) -> &[f32] {
        &self.intensity
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn sum(&self) -> f64 {
        self.intensity.iter().map(|&v| v as f64).sum()
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.intensity[row * self.width + col]
    }

    /// Places this PSF at the center of an `n×n` zero grid.
    pub fn embed_centered(&self, n: usize) -> Result<Psf> {
        if self.height > n || self.width > n {
            return Err(Error::Geometry(format!(
                "PSF {}x{} does not fit a {n}x{n} grid",
                self.height, self.width
            )));
        }
        let (r0, c0) = ((n - self.height) / 2, (n - self.width) / 2);
        let mut out = vec![0.0f32; n * n];
        for r in 0..self.height {
            out[(r0 + r) * n + c0..][..self.width]
                .copy_from_slice(&self.intensity[r * self.width..(r + 1) * self.width]);
        }
        Psf::new(n, n, out)
    }
}

/// Wraps an angle into [0, 2π) in f32 without ever returning 2π.
pub fn wrap_phase(v: f64) -> f32 {
    let w = v.rem_euclid(TAU) as f32;
    if !(0.0..std::f32::consts::TAU).contains(&w) {
        0.0
    } else {
        w
    }
}

/// Manufacturable phase profile. `levels == 0` means continuous.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseMask {
    phase: Vec<f32>,
    levels: u32,
    config: OpticsConfig,
}

impl PhaseMask {
    pub fn new(phase: Vec<f32>, levels: u32, config: OpticsConfig) -> Result<Self> {
        let n = config.mask_pixels;
        if phase.len() != n * n {
            return Err(Error::shape("PhaseMask::new", &[n, n], &[phase.len()]));
        }
        if let Some(i) = phase
            .iter()
            .position(|&p| !(0.0..std::f32::consts::TAU).contains(&p))
        {
            return Err(Error::Contract(format!(
                "phase values must lie in [0, 2pi), got {} at {i}",
                phase[i]
            )));
        }
        if levels == 1 {
            return Err(Error::Parameter("quantization needs levels >= 2 (or 0)".into()));
        }
        if levels > 0 {
            let step = TAU / levels as f64;
            if let Some(i) = phase.iter().position(|&p| {
                let k = (p as f64 / step).round();
                (p as f64 - k * step).abs() > 1e-5
            }) {
                return Err(Error::Contract(format!(
                    "phase {} at {i} is not a multiple of 2pi/{levels}",
                    phase[i]
                )));
            }
        }
        Ok(PhaseMask {
            phase,
            levels,
            config,
        })
    }

    pub fn from_unwrapped(phase: &[f64], config: OpticsConfig) -> Result<Self> {
        PhaseMask::new(phase.iter().map(|&p| wrap_phase(p)).collect(), 0, config)
    }

    pub fn flat(config: OpticsConfig) -> Self {
        let n = config.mask_pixels;
        PhaseMask {
            phase: vec![0.0; n * n],
            levels: 0,
            config,
        }
    }

    pub fn phase(&self) -> &[f32] {
        &self.phase
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    pub fn config(&self) -> &OpticsConfig {
        &self.config
    }

    pub fn size(&self) -> usize {
        self.config.mask_pixels
    }

    /// TNSR1 records `phase` [N,N] and `meta` [wavelength, distance, pitch,
    /// levels, aperture].
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let n = self.size();
        let phase = Tensor::new(&[n, n], self.phase.clone())?;
        let c = &self.config;
        let meta = Tensor::new(
            &[5],
            vec![
                c.wavelength as f32,
                c.distance as f32,
                c.pitch as f32,
                self.levels as f32,
                c.aperture as f32,
            ],
        )?;
        checkpoint::save(path, &[("phase", &phase), ("meta", &meta)])
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let recs = checkpoint::load(path)?;
        let phase = checkpoint::find(&recs, "phase")?;
        let meta = checkpoint::find(&recs, "meta")?.data();
        if phase.rank() != 2 || phase.shape()[0] != phase.shape()[1] || meta.len() < 4 {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad phase mask records: phase {:?}, meta len {}", phase.shape(), meta.len()),
            });
        }
        let n = phase.shape()[0];
        let config = OpticsConfig {
            wavelength: meta[0] as f64,
            distance: meta[1] as f64,
            pitch: meta[2] as f64,
            mask_pixels: n,
            aperture: meta.get(4).map_or(n as f64 / 2.0, |&a| a as f64),
        };
        PhaseMask::new(phase.data().to_vec(), meta[3] as u32, config)
    }
}

/// Binary circular aperture centered on pixel (N/2, N/2).
pub fn aperture(config: &OpticsConfig) -> Vec<f64> {
    let n = config.mask_pixels;
    let c = (n / 2) as f64;
    let r2 = config.aperture * config.aperture;
    let mut a = vec![0.0; n * n];
    if config.aperture < 0.0 {
        return a;
    }
    for i in 0..n {
        for j in 0..n {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            if d2 <= r2 {
                a[i * n + j] = 1.0;
            }
        }
    }
    a
}

/// Mask-plane field `aperture · exp(i φ)` for unit plane-wave illumination.
pub fn mask_field(phase: &[f32], aperture: &[f64]) -> Vec<Complex64> {
    phase
        .iter()
        .zip(aperture)
        .map(|(&p, &a)| Complex64::from_polar(a, p as f64))
        .collect()
}

/// Intensity at the sensor for a phase mask under plane-wave illumination
/// (a point source at infinity), normalized to unit sum.
pub fn psf_from_phase(mask: &PhaseMask) -> Result<Psf> {
    let config = mask.config();
    let ap = aperture(config);
    if ap.iter().all(|&a| a == 0.0) {
        return Err(Error::Degenerate(format!(
            "aperture radius {} px contains no pixels",
            config.aperture
        )));
    }
    let mut field = mask_field(mask.phase(), &ap);
    Propagator::new(config)?.forward(&mut field);
    let n = config.mask_pixels;
    Psf::normalize(n, n, &field.iter().map(|c| c.norm_sqr()).collect::<Vec<_>>())
}

/// Full linear convolution of every channel with one PSF.
///
/// Uses the same cross-correlation indexing as [`crate::tensor::ops::conv2d`]
/// with padding `P-1`:
/// `out[c, y, x] = Σ_{u,v} img[c, y+u-(Ph-1), x+v-(Pw-1)] · psf[u, v]`,
/// which is the physical convolution written in the sensor's (inverted)
/// coordinate frame. Zero PSF entries are skipped.
pub fn optical_convolve(image: &Tensor, psf: &Psf) -> Result<Tensor> {
    if !psf.is_normalized() {
        return Err(Error::Contract(format!(
            "optical convolution needs a unit-sum PSF, sum is {}",
            psf.sum()
        )));
    }
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("optical_convolve", s, &[psf.height(), psf.width()]));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (ph, pw) = (psf.height(), psf.width());
    let (oh, ow) = (h + ph - 1, w + pw - 1);
    let mut out = vec![0.0f32; c * oh * ow];
    let src = image.data();
    for u in 0..ph {
        for v in 0..pw {
            let p = psf.at(u, v);
            if p == 0.0 {
                continue;
            }
            let (oy, ox) = (ph - 1 - u, pw - 1 - v);
            for ch in 0..c {
                for i in 0..h {
                    let dst = &mut out[(ch * oh + oy + i) * ow + ox..][..w];
                    let row = &src[(ch * h + i) * w..][..w];
                    dst.iter_mut().zip(row).for_each(|(d, &x)| *d += p * x);
                }
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// Normalized cross-correlation of two equally sized grids.
pub fn normalized_cross_correlation(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}
