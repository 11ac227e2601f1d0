//! Python bindings for the tumorseg core crate.
//!
//! Volumes cross the boundary as numpy arrays in `(D, H, W[, C])` order.
//! Label arrays hold internal class indices 0..=3; use `decode_labels` for
//! the on-disk codes {0, 1, 2, 4}.

use std::path::PathBuf;

use numpy::{IntoPyArray, PyArray1, PyArray3, PyArray4, PyReadonlyArray2, PyReadonlyArray3, PyReadonlyArray4};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tumorseg::ensemble;
use tumorseg::inference::predict_volume;
use tumorseg::metrics::{self, Region};
use tumorseg::phantom::{self, PhantomSpec};
use tumorseg::pipeline::{self, PipelineConfig};
use tumorseg::radiomics::{self, RadiomicRecord, Resection, NUM_IMAGE_FEATURES};
use tumorseg::sampler;
use tumorseg::unet::Checkpoint;
use tumorseg::volume::{self, LabelMap, MultiModalVolume, ProbabilityMap};

fn err(e: tumorseg::Error) -> PyErr {
    match e {
        tumorseg::Error::Io { .. } | tumorseg::Error::MissingArtifact { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn labels_from(a: PyReadonlyArray3<'_, u8>) -> PyResult<LabelMap> {
    LabelMap::new(a.as_array().to_owned()).map_err(err)
}

fn volume_from(a: PyReadonlyArray4<'_, f32>) -> PyResult<MultiModalVolume> {
    MultiModalVolume::new(a.as_array().to_owned()).map_err(err)
}

fn region_from(name: &str) -> PyResult<Region> {
    match name.to_ascii_uppercase().as_str() {
        "ET" => Ok(Region::Et),
        "WT" => Ok(Region::Wt),
        "TC" => Ok(Region::Tc),
        _ => Err(PyValueError::new_err(format!("unknown region {name:?}; expected ET, WT or TC"))),
    }
}

/// Load a fused 4D NIfTI file or a raw subject directory as float32 `(D, H, W, 4)`.
#[pyfunction]
fn load_volume<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyArray4<f32>>> {
    let v = pipeline::load_subject_volume(&path).map_err(err)?;
    Ok(v.data.into_pyarray(py))
}

#[pyfunction]
fn save_volume(volume: PyReadonlyArray4<'_, f32>, path: PathBuf) -> PyResult<()> {
    volume::save_multimodal(&volume_from(volume)?, path).map_err(err)
}

/// Load a segmentation and return internal class indices.
#[pyfunction]
fn load_labels<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyArray3<u8>>> {
    Ok(volume::load_label_map(path).map_err(err)?.data.into_pyarray(py))
}

#[pyfunction]
fn save_labels(labels: PyReadonlyArray3<'_, u8>, path: PathBuf) -> PyResult<()> {
    volume::save_label_map(&labels_from(labels)?, path).map_err(err)
}

/// Map internal classes 0..=3 to the on-disk codes {0, 1, 2, 4}.
#[pyfunction]
fn decode_labels<'py>(py: Python<'py>, labels: PyReadonlyArray3<'_, u8>) -> PyResult<Bound<'py, PyArray3<i64>>> {
    Ok(volume::decode_labels(&labels_from(labels)?).into_pyarray(py))
}

#[pyfunction]
fn encode_labels<'py>(py: Python<'py>, codes: PyReadonlyArray3<'_, i64>) -> PyResult<Bound<'py, PyArray3<u8>>> {
    let owned = codes.as_array().to_owned();
    Ok(volume::encode_labels(&owned).map_err(err)?.data.into_pyarray(py))
}

/// Per-voxel integer sampling weights for patch centers (0 outside the valid range).
#[pyfunction]
fn sampling_weights<'py>(
    py: Python<'py>,
    volume: PyReadonlyArray4<'_, f32>,
    labels: PyReadonlyArray3<'_, u8>,
    patch_size: usize,
) -> PyResult<Bound<'py, PyArray3<u8>>> {
    let w = sampler::compute_sampling_weights(&volume_from(volume)?, &labels_from(labels)?, patch_size).map_err(err)?;
    Ok(w.weights.into_pyarray(py))
}

#[pyfunction]
fn region_mask<'py>(py: Python<'py>, labels: PyReadonlyArray3<'_, u8>, region: &str) -> PyResult<Bound<'py, PyArray3<bool>>> {
    Ok(metrics::region_mask(&labels_from(labels)?, region_from(region)?).into_pyarray(py))
}

#[pyfunction]
fn dice(a: PyReadonlyArray3<'_, bool>, b: PyReadonlyArray3<'_, bool>) -> PyResult<f64> {
    metrics::dice(&a.as_array().to_owned(), &b.as_array().to_owned()).map_err(err)
}

/// 95th-percentile symmetric Hausdorff distance in voxels.
#[pyfunction]
fn hausdorff95(a: PyReadonlyArray3<'_, bool>, b: PyReadonlyArray3<'_, bool>) -> PyResult<f64> {
    metrics::hausdorff95(&a.as_array().to_owned(), &b.as_array().to_owned()).map_err(err)
}

/// Dice, HD95, sensitivity and specificity for ET, WT and TC.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    pred: PyReadonlyArray3<'_, u8>,
    truth: PyReadonlyArray3<'_, u8>,
) -> PyResult<Bound<'py, PyDict>> {
    let (pred, truth) = (labels_from(pred)?, labels_from(truth)?);
    let out = PyDict::new(py);
    for region in Region::ALL {
        let s = metrics::evaluate_region(&pred, &truth, region).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("dice", s.dice)?;
        d.set_item("hd95", s.hd95)?;
        d.set_item("sensitivity", s.sensitivity)?;
        d.set_item("specificity", s.specificity)?;
        out.set_item(region.to_string(), d)?;
    }
    Ok(out)
}

/// `[V1, S1, V2, S2, V3, S3]`: voxel count and surface area of each tumor class.
#[pyfunction]
fn radiomic_features(labels: PyReadonlyArray3<'_, u8>) -> PyResult<[f64; NUM_IMAGE_FEATURES]> {
    Ok(radiomics::extract_features(&labels_from(labels)?))
}

fn records(
    features: PyReadonlyArray2<'_, f64>,
    ages: Vec<f64>,
    resections: Vec<String>,
    days: Option<Vec<f64>>,
) -> PyResult<Vec<RadiomicRecord>> {
    let f = features.as_array();
    let n = f.nrows();
    if f.ncols() != NUM_IMAGE_FEATURES || ages.len() != n || resections.len() != n || days.as_ref().is_some_and(|d| d.len() != n) {
        return Err(PyValueError::new_err(format!(
            "expected features of shape (n, {NUM_IMAGE_FEATURES}) and n ages, resections and survival values"
        )));
    }
    (0..n)
        .map(|i| {
            let mut image_features = [0.0; NUM_IMAGE_FEATURES];
            for (j, v) in image_features.iter_mut().enumerate() {
                *v = f[[i, j]];
            }
            Ok(RadiomicRecord {
                subject_id: i.to_string(),
                image_features,
                age: ages[i],
                resection: resections[i].parse::<Resection>().map_err(err)?,
                survival_days: days.as_ref().map(|d| d[i]),
            })
        })
        .collect()
}

/// Linear survival regressor on z-scored radiomic and clinical features.
#[pyclass(name = "SurvivalModel", module = "tumorseg_py")]
struct PySurvivalModel {
    inner: radiomics::SurvivalModel,
}

#[pymethods]
impl PySurvivalModel {
    #[staticmethod]
    fn fit(features: PyReadonlyArray2<'_, f64>, ages: Vec<f64>, resections: Vec<String>, days: Vec<f64>) -> PyResult<Self> {
        let recs = records(features, ages, resections, Some(days))?;
        Ok(Self {
            inner: radiomics::fit_survival(&recs).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: radiomics::SurvivalModel::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn predict<'py>(
        &self,
        py: Python<'py>,
        features: PyReadonlyArray2<'_, f64>,
        ages: Vec<f64>,
        resections: Vec<String>,
    ) -> PyResult<Bound<'py, PyArray1<f64>>> {
        let recs = records(features, ages, resections, None)?;
        let out: Vec<f64> = recs.iter().map(|r| radiomics::predict_survival(&self.inner, r)).collect();
        Ok(out.into_pyarray(py))
    }

    #[getter]
    fn coefficients(&self) -> Vec<f64> {
        self.inner.coefficients.to_vec()
    }

    #[getter]
    fn intercept(&self) -> f64 {
        self.inner.intercept
    }

    #[getter]
    fn training_r2(&self) -> f64 {
        self.inner.training_r2
    }
}

/// Accuracy, MSE, median/std squared error, Spearman rho and R^2 of survival predictions.
#[pyfunction]
fn survival_metrics<'py>(py: Python<'py>, pred: Vec<f64>, truth: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let m = radiomics::survival_metrics(&pred, &truth, radiomics::SurvivalBuckets::default()).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("accuracy", m.accuracy)?;
    d.set_item("mse", m.mse)?;
    d.set_item("median_se", m.median_se)?;
    d.set_item("std_se", m.std_se)?;
    d.set_item("spearman", m.spearman)?;
    d.set_item("r2", m.r2)?;
    Ok(d)
}

#[pyfunction]
fn average_probabilities<'py>(py: Python<'py>, maps: Vec<PyReadonlyArray4<'_, f32>>) -> PyResult<Bound<'py, PyArray4<f32>>> {
    let maps: Vec<ProbabilityMap> = maps
        .into_iter()
        .map(|m| ProbabilityMap::new(m.as_array().to_owned()).map_err(err))
        .collect::<PyResult<_>>()?;
    Ok(ensemble::average_probabilities(&maps).map_err(err)?.data.into_pyarray(py))
}

/// Per-voxel argmax, ties resolved toward the lower class index.
#[pyfunction]
fn argmax_labels<'py>(py: Python<'py>, probs: PyReadonlyArray4<'_, f32>) -> PyResult<Bound<'py, PyArray3<u8>>> {
    let pm = ProbabilityMap::new(probs.as_array().to_owned()).map_err(err)?;
    Ok(ensemble::argmax_labels(&pm).data.into_pyarray(py))
}

/// Write `n` synthetic subjects under `out_dir` and return their ids.
#[pyfunction]
#[pyo3(signature = (out_dir, n, seed = 0, size = 48, noise = 0.03))]
fn generate_phantoms(out_dir: PathBuf, n: usize, seed: u64, size: usize, noise: f64) -> PyResult<Vec<String>> {
    let spec = PhantomSpec {
        shape: [size; 3],
        noise,
    };
    let phantoms = phantom::generate_phantoms(&spec, n, seed, out_dir).map_err(err)?;
    Ok(phantoms.into_iter().map(|p| p.id).collect())
}

/// Run the listed stages (`"all"` or a comma-separated list) of a TOML pipeline config.
#[pyfunction]
#[pyo3(signature = (config_path, stages = "all"))]
fn run_pipeline(config_path: PathBuf, stages: &str) -> PyResult<()> {
    let config = PipelineConfig::load(config_path).map_err(err)?;
    let stages = pipeline::parse_stages(stages).map_err(err)?;
    pipeline::run_pipeline(&config, &stages).map_err(err)
}

/// A trained network and the channel statistics it was trained with.
#[pyclass(name = "Model", module = "tumorseg_py")]
struct PyModel {
    inner: Checkpoint,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(path).map_err(err)?,
        })
    }

    /// Sliding-window class probabilities `(D, H, W, 4)` for a normalized volume.
    #[pyo3(signature = (volume, flip_tta = true))]
    fn predict<'py>(&self, py: Python<'py>, volume: PyReadonlyArray4<'_, f32>, flip_tta: bool) -> PyResult<Bound<'py, PyArray4<f32>>> {
        let v = volume_from(volume)?;
        let probs = predict_volume(&self.inner.model, &v, &self.inner.stats, flip_tta).map_err(err)?;
        Ok(probs.data.into_pyarray(py))
    }

    #[getter]
    fn patch_size(&self) -> usize {
        self.inner.model.config.patch_size
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.model.num_parameters()
    }
}

#[pymodule]
fn tumorseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(load_volume, m)?)?;
    m.add_function(wrap_pyfunction!(save_volume, m)?)?;
    m.add_function(wrap_pyfunction!(load_labels, m)?)?;
    m.add_function(wrap_pyfunction!(save_labels, m)?)?;
    m.add_function(wrap_pyfunction!(decode_labels, m)?)?;
    m.add_function(wrap_pyfunction!(encode_labels, m)?)?;
    m.add_function(wrap_pyfunction!(sampling_weights, m)?)?;
    m.add_function(wrap_pyfunction!(region_mask, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(hausdorff95, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(radiomic_features, m)?)?;
    m.add_function(wrap_pyfunction!(survival_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(average_probabilities, m)?)?;
    m.add_function(wrap_pyfunction!(argmax_labels, m)?)?;
    m.add_function(wrap_pyfunction!(generate_phantoms, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_class::<PySurvivalModel>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
