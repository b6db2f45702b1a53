//! Python bindings: tensors, optics, DAD encoding and MAC counting.
//! Tensors cross the boundary as `(shape, flat data)`.

use optikonv::dad::{self, DadLayout};
use optikonv::harness::{build_model, count_macs as count, Architecture, ModelSpec, Variant};
use optikonv::optics::{self, FabModel, OpticsConfig};
use optikonv::tensor::Tensor as CoreTensor;
use optikonv::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Config(_)
        | Error::Parameter(_)
        | Error::Geometry(_)
        | Error::Shape { .. }
        | Error::Index { .. }
        | Error::Sampling { .. }
        | Error::Format { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

#[pyclass(name = "Tensor", module = "optikonv", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor(CoreTensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        CoreTensor::new(&shape, data).map(PyTensor).map_err(err)
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        PyTensor(CoreTensor::zeros(&shape))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    fn max_abs_diff(&self, other: PyRef<'_, PyTensor>) -> PyResult<f32> {
        self.0.max_abs_diff(&other.0).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

#[pyclass(name = "OpticsConfig", module = "optikonv", skip_from_py_object)]
#[derive(Clone)]
pub struct PyOpticsConfig(OpticsConfig);

#[pymethods]
impl PyOpticsConfig {
    #[new]
    #[pyo3(signature = (mask_pixels, pitch, distance, wavelength = 532e-9, aperture = None))]
    fn new(mask_pixels: usize, pitch: f64, distance: f64, wavelength: f64, aperture: Option<f64>) -> PyResult<Self> {
        let c = OpticsConfig {
            wavelength,
            distance,
            mask_pixels,
            pitch,
            aperture: aperture.unwrap_or(mask_pixels as f64 / 2.0),
        };
        c.validate().map_err(err)?;
        Ok(PyOpticsConfig(c))
    }

    fn check_sampling(&self) -> PyResult<()> {
        self.0.check_sampling().map_err(err)
    }

    #[getter]
    fn mask_pixels(&self) -> usize {
        self.0.mask_pixels
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.0)
    }
}

#[pyclass(name = "Psf", module = "optikonv", skip_from_py_object)]
#[derive(Clone)]
pub struct PyPsf(optics::Psf);

#[pymethods]
impl PyPsf {
    /// Normalizes `intensity` to unit sum.
    #[new]
    fn new(height: usize, width: usize, intensity: Vec<f64>) -> PyResult<Self> {
        optics::Psf::normalize(height, width, &intensity).map(PyPsf).map_err(err)
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        optics::read_psf(path).map(PyPsf).map_err(err)
    }

    fn write(&self, path: &str) -> PyResult<()> {
        optics::write_psf(&self.0, path).map(|_| ()).map_err(err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    fn intensity(&self) -> Vec<f32> {
        self.0.intensity().to_vec()
    }

    fn sum(&self) -> f64 {
        self.0.sum()
    }

    fn ncc(&self, other: PyRef<'_, PyPsf>) -> f64 {
        optics::normalized_cross_correlation(self.0.intensity(), other.0.intensity())
    }
}

#[pyclass(name = "PhaseMask", module = "optikonv", skip_from_py_object)]
#[derive(Clone)]
pub struct PyPhaseMask(optics::PhaseMask);

#[pymethods]
impl PyPhaseMask {
    #[new]
    #[pyo3(signature = (phase, config, levels = 0))]
    fn new(phase: Vec<f32>, config: PyRef<'_, PyOpticsConfig>, levels: u32) -> PyResult<Self> {
        optics::PhaseMask::new(phase, levels, config.0).map(PyPhaseMask).map_err(err)
    }

    #[staticmethod]
    fn flat(config: PyRef<'_, PyOpticsConfig>) -> Self {
        PyPhaseMask(optics::PhaseMask::flat(config.0))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        optics::PhaseMask::load(path).map(PyPhaseMask).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(err)
    }

    fn phase(&self) -> Vec<f32> {
        self.0.phase().to_vec()
    }

    #[getter]
    fn levels(&self) -> u32 {
        self.0.levels()
    }

    fn psf(&self) -> PyResult<PyPsf> {
        optics::psf_from_phase(&self.0).map(PyPsf).map_err(err)
    }

    #[pyo3(signature = (levels, blur = 0.0))]
    fn fabricate(&self, levels: u32, blur: f64) -> PyResult<Self> {
        let fab = FabModel {
            levels,
            dose_blur_sigma: blur,
        };
        optics::apply_fab_model(&self.0, &fab).map(PyPhaseMask).map_err(err)
    }

    fn export_dose(&self, path: &str) -> PyResult<()> {
        optics::export_dose_map(&self.0, path).map_err(err)
    }
}

#[pyclass(name = "DadLayout", module = "optikonv", skip_from_py_object)]
#[derive(Clone)]
pub struct PyDadLayout(DadLayout);

#[pymethods]
impl PyDadLayout {
    #[getter]
    fn tile_pitch(&self) -> usize {
        self.0.tile_pitch
    }

    #[getter]
    fn grid(&self) -> (usize, usize) {
        (self.0.grid_rows, self.0.grid_cols)
    }

    #[getter]
    fn scale(&self) -> f32 {
        self.0.scale
    }

    fn sensor_size(&self) -> (usize, usize) {
        self.0.sensor_size()
    }
}

#[pyfunction]
fn optical_convolve(image: PyRef<'_, PyTensor>, psf: PyRef<'_, PyPsf>) -> PyResult<PyTensor> {
    optics::optical_convolve(&image.0, &psf.0).map(PyTensor).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (n, spots, sigma, margin, seed = 0))]
fn sparse_spot_target(n: usize, spots: usize, sigma: f64, margin: usize, seed: u64) -> PyResult<PyPsf> {
    optics::sparse_spot_target(n, spots, sigma, margin, seed).map(PyPsf).map_err(err)
}

/// Returns `(mask, loss_history)`.
#[pyfunction]
#[pyo3(signature = (target, config, iters = 500, lr = 0.1, seed = 0, levels = 0))]
fn retrieve_phase(
    target: PyRef<'_, PyPsf>,
    config: PyRef<'_, PyOpticsConfig>,
    iters: usize,
    lr: f64,
    seed: u64,
    levels: u32,
) -> PyResult<(PyPhaseMask, Vec<f64>)> {
    let opts = optics::SgdOptions {
        iters,
        lr,
        seed,
        fab: (levels > 0).then_some(FabModel {
            levels,
            dose_blur_sigma: 0.0,
        }),
    };
    let r = optics::retrieve_phase_sgd_with(&target.0, &config.0, &opts).map_err(err)?;
    Ok((PyPhaseMask(r.mask), r.loss_history))
}

#[pyfunction]
#[pyo3(signature = (target, config, iters = 200))]
fn gerchberg_saxton(target: PyRef<'_, PyPsf>, config: PyRef<'_, PyOpticsConfig>, iters: usize) -> PyResult<PyPhaseMask> {
    optics::gerchberg_saxton(&target.0, &config.0, iters).map(PyPhaseMask).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (channels, kernel, height, width, guard = dad::DEFAULT_GUARD))]
fn plan_layout(channels: usize, kernel: usize, height: usize, width: usize, guard: usize) -> PyResult<PyDadLayout> {
    dad::plan_layout(channels, kernel, height, width, guard).map(PyDadLayout).map_err(err)
}

/// Kernels `[K, k, k]` to `(psf, layout)`.
#[pyfunction]
fn dad_encode(kernels: PyRef<'_, PyTensor>, layout: PyRef<'_, PyDadLayout>) -> PyResult<(PyPsf, PyDadLayout)> {
    let (psf, l) = dad::encode(&kernels.0, &layout.0).map_err(err)?;
    Ok((PyPsf(psf), PyDadLayout(l)))
}

#[pyfunction]
fn dad_decode(sensor: PyRef<'_, PyTensor>, layout: PyRef<'_, PyDadLayout>) -> PyResult<PyTensor> {
    dad::decode(&sensor.0, &layout.0).map(PyTensor).map_err(err)
}

type MacRowTuple = (String, String, u64);

/// Returns `(electronic MFLOPs, [(layer, op, macs)])` at 32x32 input.
#[pyfunction]
#[pyo3(signature = (arch = "vgg13", variant = "electronic", width_div = 1))]
fn count_macs(arch: &str, variant: &str, width_div: usize) -> PyResult<(f64, Vec<MacRowTuple>)> {
    let a: Architecture = arch.parse().map_err(err)?;
    let v: Variant = variant.parse().map_err(err)?;
    let spec = if v == Variant::Codesign {
        ModelSpec::reference_codesign(a)
    } else {
        ModelSpec::new(a, v)
    }
    .with_width_div(width_div);
    let model = build_model(&spec, 0).map_err(err)?;
    let report = count(&model, [1, 3, 32, 32]).map_err(err)?;
    let rows = report.rows.iter().map(|r| (r.name.clone(), r.op.clone(), r.macs)).collect();
    Ok((report.mflops(), rows))
}

#[pymodule]
#[pyo3(name = "optikonv")]
fn init(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyOpticsConfig>()?;
    m.add_class::<PyPsf>()?;
    m.add_class::<PyPhaseMask>()?;
    m.add_class::<PyDadLayout>()?;
    m.add_function(wrap_pyfunction!(optical_convolve, m)?)?;
    m.add_function(wrap_pyfunction!(sparse_spot_target, m)?)?;
    m.add_function(wrap_pyfunction!(retrieve_phase, m)?)?;
    m.add_function(wrap_pyfunction!(gerchberg_saxton, m)?)?;
    m.add_function(wrap_pyfunction!(plan_layout, m)?)?;
    m.add_function(wrap_pyfunction!(dad_encode, m)?)?;
    m.add_function(wrap_pyfunction!(dad_decode, m)?)?;
    m.add_function(wrap_pyfunction!(count_macs, m)?)?;
    Ok(())
}
