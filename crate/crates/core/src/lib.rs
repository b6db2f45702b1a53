//! Opto-electronic convolution co-design.
//!
//! The crate simulates a hybrid classifier whose first convolutional stage is
//! carried out by a diffractive optical element. Modules, bottom-up:
//!
//! - [`tensor`]: dense `f32` tensors, a reverse-mode tape and the CNN kernels.
//! - [`optics`]: band-limited angular-spectrum propagation, PSFs, optical
//!   convolution, phase retrieval and a lithography fabrication model.
//! - [`dad`]: the division-adjoint codec mapping signed multi-channel kernels
//!   onto one non-negative, unit-sum PSF and back.
//! - [`optical_layer`]: the trainable multi-branch optical front end and its
//!   re-parameterization into a single large kernel.
//! - [`harness`]: CIFAR-10 ingestion, model zoo, MAC counting, training and
//!   experiment reports.

pub mod dad;
pub mod error;
pub mod harness;
pub mod optical_layer;
pub mod optics;
pub mod tensor;

pub use error::{Error, Result};
