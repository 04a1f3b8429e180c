//! Python bindings: fusion, training, mask decomposition, metrics and the
//! contextual similarity measure. Images cross the boundary as nested
//! lists of floats in `[0, 1]`.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ivfuse_core::checkpoint::load_net;
use ivfuse_core::cli::fuse_any_size;
use ivfuse_core::config::TrainConfig;
use ivfuse_core::contextual::{contextual_cs as cs, contextual_feature_similarity};
use ivfuse_core::fusion_net::{FusionNet, NetConfig};
use ivfuse_core::image::Image;
use ivfuse_core::mask::{decompose_masks as decompose, BinaryMask};
use ivfuse_core::metrics::evaluate as eval_metrics;
use ivfuse_core::tensor::Tensor;
use ivfuse_core::{synth, trainer, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::BatchNotDivisible { .. } | Error::Checkpoint(_) => PyValueError::new_err(e.to_string()),
        Error::DimensionMismatch { .. } | Error::ImageTooSmall { .. } | Error::ShapeNotDivisible { .. } => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io(_) | Error::UnreadableFile { .. } | Error::MalformedMaskFile { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFiniteLoss { .. } => PyArithmeticError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Rows of equal length into an image.
fn to_image(rows: Vec<Vec<f64>>) -> PyResult<Image> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("expected a non-empty rectangular list of rows"));
    }
    Ok(Image::new(h, w, rows.into_iter().flatten().collect()))
}

fn from_image(img: &Image) -> Vec<Vec<f64>> {
    img.data().chunks(img.width()).map(<[f64]>::to_vec).collect()
}

fn to_mask(rows: Vec<Vec<bool>>) -> PyResult<BinaryMask> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("mask rows differ in length"));
    }
    Ok(BinaryMask::from_fn(h, w, |y, x| rows[y][x]))
}

fn from_mask(m: &BinaryMask) -> Vec<Vec<bool>> {
    (0..m.height()).map(|y| (0..m.width()).map(|x| m.get(y, x)).collect()).collect()
}

fn to_feature(data: Vec<f64>, shape: (usize, usize, usize)) -> PyResult<Tensor> {
    let (c, h, w) = shape;
    if c * h * w != data.len() || data.is_empty() {
        return Err(PyValueError::new_err(format!("{} values do not fill shape {shape:?}", data.len())));
    }
    Ok(Tensor::new(vec![c, h, w], data))
}

/// A fusion network, freshly initialised or restored from a checkpoint.
#[pyclass(unsendable, module = "ivfuse")]
struct FusionModel {
    net: FusionNet,
}

#[pymethods]
impl FusionModel {
    #[new]
    #[pyo3(signature = (base_channels = 16, seed = 0))]
    fn new(base_channels: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            net: FusionNet::new(NetConfig::with_base_channels(base_channels), seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (net, _) = load_net(&path).map_err(py_err)?;
        Ok(Self { net })
    }

    /// Fuse luminance planes of any size; inputs are reflect-padded to a
    /// multiple of 16 and the output cropped back.
    fn fuse(&self, vi: Vec<Vec<f64>>, ir: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let (f, _) = fuse_any_size(&self.net, &to_image(vi)?, &to_image(ir)?).map_err(py_err)?;
        Ok(from_image(&f))
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.net.store().param_count()
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.net.config()).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!("FusionModel(base_channels={}, parameters={})", self.net.config().base_channels, self.net.store().param_count())
    }
}

/// Split a visible/infrared mask pair into shared, unique and background parts.
#[pyfunction]
fn decompose_masks(py: Python<'_>, vi: Vec<Vec<bool>>, ir: Vec<Vec<bool>>) -> PyResult<Py<PyDict>> {
    let p = decompose(&to_mask(vi)?, &to_mask(ir)?).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("shared", from_mask(&p.shared))?;
    d.set_item("unique_vi", from_mask(&p.unique_vi))?;
    d.set_item("unique_ir", from_mask(&p.unique_ir))?;
    d.set_item("background", from_mask(&p.background))?;
    Ok(d.unbind())
}

/// EN, SF, AG and CC of a fused image against its sources.
#[pyfunction]
fn evaluate(py: Python<'_>, fused: Vec<Vec<f64>>, vi: Vec<Vec<f64>>, ir: Vec<Vec<f64>>) -> PyResult<Py<PyDict>> {
    let r = eval_metrics(&to_image(fused)?, &to_image(vi)?, &to_image(ir)?).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("en", r.en)?;
    d.set_item("sf", r.sf)?;
    d.set_item("ag", r.ag)?;
    d.set_item("cc", r.cc)?;
    Ok(d.unbind())
}

/// Contextual similarity `s` of two `[C,H,W]` feature maps given flat.
#[pyfunction]
#[pyo3(signature = (phi1, shape1, phi2, shape2, epsilon = 1e-8))]
fn feature_similarity(phi1: Vec<f64>, shape1: (usize, usize, usize), phi2: Vec<f64>, shape2: (usize, usize, usize), epsilon: f64) -> PyResult<f64> {
    let (a, b) = (to_feature(phi1, shape1)?, to_feature(phi2, shape2)?);
    if shape1.0 != shape2.0 {
        return Err(PyValueError::new_err("feature maps have different channel counts"));
    }
    Ok(contextual_feature_similarity(&a, &b, epsilon))
}

/// `CS = -ln(s + λ‖φ1 − φ2‖ + ε)` of two equally shaped `[C,H,W]` maps.
#[pyfunction]
#[pyo3(signature = (phi1, phi2, shape, lambda_cs = 0.5, epsilon = 1e-8))]
fn contextual_cs(phi1: Vec<f64>, phi2: Vec<f64>, shape: (usize, usize, usize), lambda_cs: f64, epsilon: f64) -> PyResult<f64> {
    Ok(cs(&to_feature(phi1, shape)?, &to_feature(phi2, shape)?, lambda_cs, epsilon))
}

/// Write a procedurally generated registered dataset; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (directory, count = 16, size = 64, seed = 0, with_masks = true))]
fn write_synthetic_dataset(directory: PathBuf, count: usize, size: usize, seed: u64, with_masks: bool) -> PyResult<PathBuf> {
    synth::write_synthetic_dataset(&directory, count, size, seed, with_masks).map_err(py_err)
}

/// Train from a TOML configuration string; returns the run summary.
#[pyfunction]
#[pyo3(signature = (config_toml, manifest, out, resume = false))]
fn train(py: Python<'_>, config_toml: &str, manifest: PathBuf, out: PathBuf, resume: bool) -> PyResult<Py<PyDict>> {
    let cfg = TrainConfig::from_toml(config_toml).map_err(py_err)?;
    let s = trainer::run(cfg, &manifest, &out, resume).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("steps", s.steps)?;
    d.set_item("first_total", s.first.map(|r| r.total))?;
    d.set_item("last_total", s.last.map(|r| r.total))?;
    d.set_item("checkpoint", s.checkpoint)?;
    d.set_item("log", s.log)?;
    Ok(d.unbind())
}

#[pymodule]
fn ivfuse(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<FusionModel>()?;
    m.add_function(wrap_pyfunction!(decompose_masks, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(feature_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(contextual_cs, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rows_round_trip() {
        let rows = vec![vec![0.0, 0.5, 1.0], vec![0.25, 0.75, 0.125]];
        let img = to_image(rows.clone()).unwrap();
        assert_eq!(img.dims(), (2, 3));
        assert_eq!(from_image(&img), rows);
    }

    #[test]
    fn mask_rows_round_trip() {
        let rows = vec![vec![true, false], vec![false, false], vec![true, true]];
        assert_eq!(from_mask(&to_mask(rows.clone()).unwrap()), rows);
    }

    #[test]
    fn feature_shape_must_match_data() {
        assert!(to_feature(vec![1.0; 12], (3, 2, 2)).is_ok());
        assert!(to_feature(vec![1.0; 11], (3, 2, 2)).is_err());
    }
}
