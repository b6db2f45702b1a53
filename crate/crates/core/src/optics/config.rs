use crate::error::{Error, Result};

/// Fraction of the Nyquist band (per axis) the band limit must keep.
pub const MIN_BAND_FRACTION: f64 = 0.5;

/// Scalar propagation geometry shared by the mask, the PSF and retrieval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OpticsConfig {
    /// meters
    pub wavelength: f64,
    /// mask to sensor, meters
    pub distance: f64,
    pub mask_pixels: usize,
    /// meters per pixel, same on mask and sensor
    pub pitch: f64,
    /// aperture radius in pixels, centered on pixel (N/2, N/2)
    pub aperture: f64,
}

impl Default for OpticsConfig {
    fn default() -> Self {
        OpticsConfig {
            wavelength: 532e-9,
            distance: 5e-3,
            mask_pixels: 512,
            pitch: 2e-6,
            aperture: 256.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingReport {
    /// band-limit frequency of the band-limited angular spectrum, 1/m
    pub band_limit: f64,
    /// 1 / (2 pitch)
    pub nyquist: f64,
    /// min(1, band_limit / nyquist)
    pub kept: f64,
    /// smallest pitch for which `kept >= MIN_BAND_FRACTION`
    pub required_pitch: f64,
}

fn kept_fraction(wavelength: f64, distance: f64, n: usize, pitch: f64) -> (f64, f64, f64) {
    let df = 1.0 / (n as f64 * pitch);
    let band_limit = 1.0 / (wavelength * ((2.0 * df * distance).powi(2) + 1.0).sqrt());
    let nyquist = 0.5 / pitch;
    (band_limit, nyquist, (band_limit / nyquist).min(1.0))
}

impl OpticsConfig {
    /// Checks positivity. Logs a warning when the sampling criterion fails;
    /// propagation itself refuses such configs.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("wavelength", self.wavelength),
            ("pitch", self.pitch),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Parameter(format!("{name} must be > 0, got {v}")));
            }
        }
        // negative distances back-propagate
        if !self.distance.is_finite() {
            return Err(Error::Parameter(format!(
                "distance must be finite, got {}",
                self.distance
            )));
        }
        if self.mask_pixels < 2 {
            return Err(Error::Parameter("mask_pixels must be >= 2".into()));
        }
        if let Err(e) = self.check_sampling() {
            log::warn!("{e}");
        }
        Ok(())
    }

    pub fn with_distance(mut self, distance: f64) -> Self {
        self.distance = distance;
        self
    }

    pub fn sampling(&self) -> SamplingReport {
        let d = self.distance.abs();
        let (band_limit, nyquist, kept) =
            kept_fraction(self.wavelength, d, self.mask_pixels, self.pitch);
        let required_pitch = if kept >= MIN_BAND_FRACTION {
            self.pitch
        } else {
            // kept(p) is monotone increasing in p
            let (mut lo, mut hi) = (self.pitch, self.pitch);
            while kept_fraction(self.wavelength, d, self.mask_pixels, hi).2 < MIN_BAND_FRACTION {
                hi *= 2.0;
            }
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if kept_fraction(self.wavelength, d, self.mask_pixels, mid).2 >= MIN_BAND_FRACTION {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            hi
        };
        SamplingReport {
            band_limit,
            nyquist,
            kept,
            required_pitch,
        }
    }

    /// The band-limited transfer function must keep at least half of the
    /// Nyquist band on each axis, otherwise the grid is too fine for the
    /// distance and most of the angular spectrum would be discarded.
    pub fn check_sampling(&self) -> Result<()> {
        let r = self.sampling();
        if r.kept < MIN_BAND_FRACTION {
            return Err(Error::Sampling {
                pitch: self.pitch,
                distance: self.distance,
                kept: r.kept,
                required_pitch: r.required_pitch,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_satisfy_sampling() {
        let c = OpticsConfig::default();
        c.validate().unwrap();
        c.check_sampling().unwrap();
    }

    #[test]
    fn violation_names_required_pitch() {
        let c = OpticsConfig {
            mask_pixels: 64,
            pitch: 1e-6,
            distance: 20e-3,
            ..OpticsConfig::default()
        };
        let err = c.check_sampling().unwrap_err();
        let Error::Sampling { required_pitch, .. } = err else {
            panic!("{err:?}")
        };
        assert!(required_pitch > 1e-6);
        assert!(err.to_string().contains("required pitch"));
        let fixed = OpticsConfig {
            pitch: required_pitch,
            ..c
        };
        fixed.check_sampling().unwrap();
        let (_, _, k) = kept_fraction(c.wavelength, c.distance, c.mask_pixels, required_pitch * 0.99);
        assert!(k < MIN_BAND_FRACTION);
    }

    #[test]
    fn rejects_non_positive() {
        let c = OpticsConfig {
            wavelength: 0.0,
            ..OpticsConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
