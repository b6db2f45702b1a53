//! Scalar Fourier optics: propagation, PSF formation, optical convolution,
//! phase retrieval and the fabrication model.

pub mod config;
pub mod fab;
pub mod field;
pub mod pgm;
pub mod propagate;
pub mod psf;
pub mod retrieval;

pub use config::{OpticsConfig, SamplingReport};
pub use fab::{apply_fab_model, FabModel};
pub use field::ComplexField;
pub use pgm::{export_dose_map, read_dose_map, read_psf, read_psf_meta, write_psf, Gray16, PsfMeta};
pub use propagate::{propagate, Propagator};
pub use psf::{normalized_cross_correlation, optical_convolve, psf_from_phase, PhaseMask, Psf};
pub use retrieval::{
    gerchberg_saxton, gerchberg_saxton_traced, retrieve_phase_sgd, retrieve_phase_sgd_with,
    sparse_spot_target, Retrieval, SgdOptions,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adds i.i.d. Gaussian read noise to a simulated sensor image.
pub fn add_sensor_noise<R: Rng>(sensor: &Tensor, sigma: f32, rng: &mut R) -> Result<Tensor> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Parameter(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(sensor.clone());
    }
    let normal = Normal::new(0.0f32, sigma).expect("valid sigma");
    let data = sensor.data().iter().map(|&v| v + normal.sample(rng)).collect();
    Tensor::new(sensor.shape(), data)
}
