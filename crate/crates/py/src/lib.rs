//! Python module `consreid`: configs, datasets, models, training, clustering
//! and evaluation. Arrays cross the boundary as nested lists of floats.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use consreid_core::ablation;
use consreid_core::checkpoint::Checkpoint;
use consreid_core::clustering::{self, DbscanConfig};
use consreid_core::config::TrainConfig;
use consreid_core::data::{self, Dataset, Split, SynthConfig};
use consreid_core::ddl::DdlConfig;
use consreid_core::diff::Array;
use consreid_core::encoder::ModelState;
use consreid_core::eval::{self, EvalResult, Meta};
use consreid_core::trainer;

fn err(e: consreid_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Array> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Array::new(vec![rows.len(), cols], rows.concat()).map_err(err)
}

fn rows(a: &Array) -> Vec<Vec<f64>> {
    let width = a.dim(1).max(1);
    a.data().chunks(width).map(<[f64]>::to_vec).collect()
}

fn result_dict<'py>(py: Python<'py>, r: &EvalResult) -> PyResult<Bound<'py, PyDict>> {
    let m = r.metrics();
    let d = PyDict::new(py);
    d.set_item("mAP", m.map)?;
    d.set_item("cmc1", m.cmc1)?;
    d.set_item("cmc5", m.cmc5)?;
    d.set_item("cmc10", m.cmc10)?;
    d.set_item("num_queries", r.num_queries)?;
    d.set_item("excluded", r.excluded.clone())?;
    Ok(d)
}

/// Training configuration parsed from flat `key = value` text.
#[pyclass(name = "TrainConfig", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: TrainConfig::from_str(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: TrainConfig::load(&path).map_err(err)?,
        })
    }

    fn to_text(&self) -> PyResult<String> {
        self.inner.to_text().map_err(err)
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    #[getter]
    fn iters_per_epoch(&self) -> usize {
        self.inner.iters_per_epoch
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn learning_rate(&self) -> f64 {
        self.inner.learning_rate
    }

    fn __repr__(&self) -> String {
        format!(
            "TrainConfig(epochs={}, iters_per_epoch={}, seed={})",
            self.inner.epochs, self.inner.iters_per_epoch, self.inner.seed
        )
    }
}

#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (identities = 16, cameras = 3, seed = 0, test_identities = None, images_per_identity = None))]
    fn synthetic(
        identities: usize,
        cameras: usize,
        seed: u64,
        test_identities: Option<usize>,
        images_per_identity: Option<usize>,
    ) -> PyResult<Self> {
        let d = SynthConfig::default();
        let cfg = SynthConfig {
            num_identities: identities,
            num_cameras: cameras,
            seed,
            num_test_identities: test_identities.unwrap_or(d.num_test_identities),
            images_per_identity: images_per_identity.unwrap_or(d.images_per_identity),
            ..d
        };
        Ok(Self {
            inner: data::generate_synthetic(&cfg).map_err(err)?,
        })
    }

    /// A manifest directory, or Market-style `bounding_box_train` / `query` /
    /// `bounding_box_test` folders resized to `height × width`.
    #[staticmethod]
    #[pyo3(signature = (path, height = 32, width = 16))]
    fn load(path: PathBuf, height: usize, width: usize) -> PyResult<Self> {
        let loaded = data::load_dataset_dir(&path, [3, height, width]).map_err(err)?;
        Ok(Self { inner: loaded.dataset })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        std::fs::create_dir_all(&path).map_err(|e| PyValueError::new_err(e.to_string()))?;
        self.inner.save(&path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn image_shape(&self) -> [usize; 3] {
        self.inner.image_shape
    }

    fn names(&self) -> Vec<String> {
        self.inner.samples.iter().map(|s| s.name.clone()).collect()
    }

    fn identities(&self) -> Vec<usize> {
        self.inner.samples.iter().map(|s| s.identity).collect()
    }

    fn cameras(&self) -> Vec<usize> {
        self.inner.samples.iter().map(|s| s.camera).collect()
    }

    /// `"train"`, `"query"` or `"gallery"` per sample.
    fn splits(&self) -> Vec<&'static str> {
        self.inner
            .samples
            .iter()
            .map(|s| match s.split {
                Split::Train => "train",
                Split::Query => "query",
                Split::Gallery => "gallery",
            })
            .collect()
    }

    /// Raw-pixel retrieval baseline.
    fn evaluate_pixels<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        result_dict(py, &eval::evaluate_pixels(&self.inner).map_err(err)?)
    }
}

/// Student and teacher weights plus the encoder configuration.
#[pyclass(name = "Model")]
struct PyModel {
    inner: ModelState,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(&path).map_err(err)?.model,
        })
    }

    #[pyo3(signature = (path, epoch = 0))]
    fn save(&self, path: PathBuf, epoch: usize) -> PyResult<()> {
        Checkpoint::new(self.inner.clone(), epoch, None).save(&path).map_err(err)
    }

    /// Embeddings of every sample, in dataset order.
    #[pyo3(signature = (dataset, teacher = true))]
    fn embed(&self, dataset: &PyDataset, teacher: bool) -> PyResult<Vec<Vec<f64>>> {
        let idx: Vec<usize> = (0..dataset.inner.len()).collect();
        let images = dataset.inner.images(&idx).map_err(err)?;
        let h = clustering::embed(&self.inner, &images, &DdlConfig::disabled(), 64, teacher).map_err(err)?;
        Ok(rows(&h))
    }

    #[pyo3(signature = (dataset, teacher = true))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset, teacher: bool) -> PyResult<Bound<'py, PyDict>> {
        result_dict(py, &eval::evaluate_model(&self.inner, &dataset.inner, teacher).map_err(err)?)
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params.iter().map(|(n, _)| n.to_string()).collect()
    }
}

/// Trains on `dataset` (or the configured data when omitted). Returns the
/// model and a log dict with per-iteration losses and per-epoch clustering.
#[pyfunction]
#[pyo3(signature = (config, dataset = None))]
fn train<'py>(py: Python<'py>, config: &PyTrainConfig, dataset: Option<&PyDataset>) -> PyResult<(PyModel, Bound<'py, PyDict>)> {
    let owned;
    let data = match dataset {
        Some(d) => &d.inner,
        None => {
            owned = trainer::load_training_data(&config.inner).map_err(err)?;
            &owned
        }
    };
    let out = trainer::train(&config.inner, data).map_err(err)?;
    let log = PyDict::new(py);
    log.set_item("total", out.log.iterations.iter().map(|r| r.total).collect::<Vec<_>>())?;
    log.set_item("ce", out.log.iterations.iter().map(|r| r.ce).collect::<Vec<_>>())?;
    log.set_item("st", out.log.iterations.iter().map(|r| r.st).collect::<Vec<_>>())?;
    log.set_item("co", out.log.iterations.iter().map(|r| r.co).collect::<Vec<_>>())?;
    log.set_item("num_clusters", out.log.epochs.iter().map(|r| r.num_clusters).collect::<Vec<_>>())?;
    log.set_item("noise_fraction", out.log.epochs.iter().map(|r| r.noise_fraction).collect::<Vec<_>>())?;
    if let Some(m) = &out.log.final_metrics {
        log.set_item("mAP", m.map)?;
        log.set_item("cmc1", m.cmc1)?;
    }
    Ok((PyModel { inner: out.state }, log))
}

/// Cluster labels per point; `None` marks noise.
#[pyfunction]
#[pyo3(signature = (points, eps, min_pts, normalize = false))]
fn dbscan(points: Vec<Vec<f64>>, eps: f64, min_pts: usize, normalize: bool) -> PyResult<Vec<Option<usize>>> {
    let cfg = DbscanConfig {
        eps,
        min_pts,
        normalize,
        eps_quantile: None,
    };
    Ok(clustering::dbscan(&matrix(&points)?, &cfg).map_err(err)?.labels)
}

/// mAP and CMC from a `[Q×G]` distance matrix with identity/camera metadata.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    dist: Vec<Vec<f64>>,
    query_ids: Vec<usize>,
    query_cams: Vec<usize>,
    gallery_ids: Vec<usize>,
    gallery_cams: Vec<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let r = eval::evaluate(&matrix(&dist)?, &Meta::list(&query_ids, &query_cams), &Meta::list(&gallery_ids, &gallery_cams)).map_err(err)?;
    result_dict(py, &r)
}

/// `(identity, camera)` from a Market-style file name.
#[pyfunction]
fn parse_market_name(name: &str) -> PyResult<(usize, usize)> {
    data::parse_market_name(name).map_err(err)
}

/// One dict per setting with mean mAP/CMC over seeds `0..seeds`.
#[pyfunction]
#[pyo3(signature = (suite, config = None, seeds = 1, jobs = 1))]
fn run_ablation<'py>(py: Python<'py>, suite: &str, config: Option<&PyTrainConfig>, seeds: u64, jobs: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let base = config.map_or_else(TrainConfig::default, |c| c.inner.clone());
    let seeds: Vec<u64> = (0..seeds).collect();
    let report = ablation::run_ablation(suite, &base, &seeds, jobs).map_err(err)?;
    report
        .rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("setting", &r.setting)?;
            d.set_item("mAP", r.map)?;
            d.set_item("cmc1", r.cmc1)?;
            d.set_item("cmc5", r.cmc5)?;
            d.set_item("cmc10", r.cmc10)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn consreid(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(dbscan, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(parse_market_name, m)?)?;
    m.add_function(wrap_pyfunction!(run_ablation, m)?)?;
    m.add("SUITES", ablation::SUITES.to_vec())?;
    Ok(())
}
