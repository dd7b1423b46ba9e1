//! Python bindings. Geometry and the meta-learner work on in-memory values;
//! the pipeline functions take file paths like the command-line tool.

use std::path::PathBuf;

use obbstack_core::fusion::FusedDetection;
use obbstack_core::ingest::{load_ground_truth, load_run, DetectionRun};
use obbstack_core::metalearner::{self, FitConfig, LabeledCluster};
use obbstack_core::synth::{run_benchmark, Scenario};
use obbstack_core::{eval, pipeline, Error, PipelineConfig};
use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(obbstack, ObbStackError, PyValueError, "Raised for invalid input or failed fits.");

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io { .. } => PyIOError::new_err(err.to_string()),
        other => ObbStackError::new_err(other.to_string()),
    }
}

/// Oriented box with `w >= h` and `theta` in `[0, pi)` after canonicalization.
#[pyclass(name = "Obb", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyObb {
    inner: obbstack_core::Obb,
}

#[pymethods]
impl PyObb {
    #[new]
    fn new(x: f64, y: f64, w: f64, h: f64, theta: f64) -> PyResult<Self> {
        let inner = obbstack_core::Obb::canonicalize(x, y, w, h, theta).map_err(to_py)?;
        Ok(PyObb { inner })
    }

    /// Fits a box to four corners given as `[x1, y1, ..., x4, y4]`.
    #[staticmethod]
    fn from_corners(coords: [f64; 8]) -> PyResult<Self> {
        let quad = obbstack_core::CornerQuad::from_coords(coords);
        let inner = obbstack_core::Obb::from_corners(&quad).map_err(to_py)?;
        Ok(PyObb { inner })
    }

    #[getter]
    fn x(&self) -> f64 {
        self.inner.x
    }

    #[getter]
    fn y(&self) -> f64 {
        self.inner.y
    }

    #[getter]
    fn w(&self) -> f64 {
        self.inner.w
    }

    #[getter]
    fn h(&self) -> f64 {
        self.inner.h
    }

    #[getter]
    fn theta(&self) -> f64 {
        self.inner.theta
    }

    fn area(&self) -> f64 {
        self.inner.area()
    }

    fn corners(&self) -> Vec<(f64, f64)> {
        self.inner.corners().0.iter().map(|p| (p.x, p.y)).collect()
    }

    fn __repr__(&self) -> String {
        let o = self.inner;
        format!("Obb(x={}, y={}, w={}, h={}, theta={})", o.x, o.y, o.w, o.h, o.theta)
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

#[pyfunction]
fn iou(a: PyObb, b: PyObb) -> f64 {
    obbstack_core::iou(&a.inner, &b.inner)
}

#[pyfunction]
fn intersection_area(a: PyObb, b: PyObb) -> f64 {
    obbstack_core::intersection_area(&a.inner, &b.inner)
}

/// Signed orientation difference folded into `[-pi/2, pi/2]`.
#[pyfunction]
fn relative_angle(theta1: f64, theta2: f64) -> PyResult<f64> {
    obbstack_core::relative_angle(theta1, theta2).map_err(to_py)
}

#[pyclass(name = "MetaLearner", frozen)]
struct PyMetaLearner {
    inner: obbstack_core::MetaLearner,
}

#[pymethods]
impl PyMetaLearner {
    /// Fits weights and intercept on per-cluster feature vectors.
    #[staticmethod]
    #[pyo3(signature = (features, labels, models=None, z_miss=metalearner::DEFAULT_Z_MISS, l2=metalearner::DEFAULT_LAMBDA, max_iter=500))]
    fn fit(
        features: Vec<Vec<f64>>,
        labels: Vec<bool>,
        models: Option<Vec<String>>,
        z_miss: f64,
        l2: f64,
        max_iter: usize,
    ) -> PyResult<Self> {
        if features.len() != labels.len() {
            return Err(ObbStackError::new_err("features and labels differ in length"));
        }
        let m = features.first().map_or(0, Vec::len);
        let models = models.unwrap_or_else(|| (1..=m).map(|k| format!("model{k}")).collect());
        let samples: Vec<LabeledCluster> = features
            .into_iter()
            .zip(labels)
            .map(|(features, label)| LabeledCluster { features, label })
            .collect();
        let config = FitConfig { lambda: l2, max_iter, ..FitConfig::default() };
        let inner = metalearner::fit(&samples, models, z_miss, &config).map_err(to_py)?;
        Ok(PyMetaLearner { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyMetaLearner { inner: obbstack_core::MetaLearner::from_json(text).map_err(to_py)? })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(PyMetaLearner { inner: obbstack_core::MetaLearner::read(&path).map_err(to_py)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json(None)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path, None).map_err(to_py)
    }

    /// Fused probability for one feature vector (missing members at `z_miss`).
    fn predict(&self, z: Vec<f64>) -> PyResult<f64> {
        self.inner.predict(&z).map_err(to_py)
    }

    #[getter]
    fn models(&self) -> Vec<String> {
        self.inner.models.clone()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights.clone()
    }

    #[getter]
    fn intercept(&self) -> f64 {
        self.inner.intercept
    }

    #[getter]
    fn z_miss(&self) -> f64 {
        self.inner.z_miss
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.training_meta.converged
    }

    /// `1/w` for a single-model learner, otherwise `None`.
    fn equivalent_temperature(&self) -> Option<f64> {
        self.inner.equivalent_temperature()
    }

    fn __repr__(&self) -> String {
        format!("MetaLearner(models={:?}, weights={:?}, intercept={})", self.inner.models, self.inner.weights, self.inner.intercept)
    }
}

/// Temperature scaling; returns `(temperature, shift)`.
#[pyfunction]
#[pyo3(signature = (logits, labels, l2=metalearner::DEFAULT_LAMBDA))]
fn fit_temperature(logits: Vec<f64>, labels: Vec<bool>, l2: f64) -> PyResult<(f64, f64)> {
    if logits.len() != labels.len() {
        return Err(ObbStackError::new_err("logits and labels differ in length"));
    }
    let pairs: Vec<(f64, bool)> = logits.into_iter().zip(labels).collect();
    let config = FitConfig { lambda: l2, ..FitConfig::default() };
    let c = metalearner::fit_temperature(&pairs, &config).map_err(to_py)?;
    Ok((c.temperature, c.shift))
}

/// Factor `g` in `w = p * r * g`; `r` defaults to ones.
#[pyfunction]
#[pyo3(signature = (w, p, r=None))]
fn decompose_weights(w: Vec<f64>, p: Vec<f64>, r: Option<Vec<f64>>) -> PyResult<Vec<f64>> {
    let r = r.unwrap_or_else(|| vec![1.0; w.len()]);
    metalearner::decompose_weights(&w, &p, &r).map_err(to_py)
}

/// Pipeline settings from keyword arguments, e.g. `z_miss=-2.0, method="wbf"`.
fn pipeline_config(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<PipelineConfig> {
    let cfg: PipelineConfig = match kwargs {
        None => PipelineConfig::default(),
        Some(kw) => {
            let text: String = py.import("json")?.call_method1("dumps", (kw,))?.extract()?;
            serde_json::from_str(&text).map_err(|e| ObbStackError::new_err(format!("pipeline settings: {e}")))?
        }
    };
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

fn load_runs(paths: &[PathBuf], cfg: &PipelineConfig) -> PyResult<Vec<DetectionRun>> {
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| load_run(p, i + 1, cfg.min_score).map_err(to_py))
        .collect()
}

/// Fits the meta-learner on validation runs (one path per member, in order).
#[pyfunction]
#[pyo3(signature = (runs, gt, **kwargs))]
fn train_meta(py: Python<'_>, runs: Vec<PathBuf>, gt: PathBuf, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<PyMetaLearner> {
    let cfg = pipeline_config(py, kwargs)?;
    let runs = load_runs(&runs, &cfg)?;
    let gt = load_ground_truth(&gt).map_err(to_py)?;
    let inner = py.detach(|| pipeline::train_meta(&runs, &gt, &cfg)).map_err(to_py)?;
    Ok(PyMetaLearner { inner })
}

fn fused_to_dict<'py>(py: Python<'py>, f: &FusedDetection) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("image_id", &f.image_id)?;
    d.set_item("category", &f.category)?;
    d.set_item("score", f.score)?;
    d.set_item("obb", PyObb { inner: f.obb })?;
    d.set_item("members", f.provenance.clone())?;
    Ok(d)
}

/// Fuses test runs; `meta` is required when `method="stacking"` (the default).
#[pyfunction]
#[pyo3(signature = (runs, meta=None, **kwargs))]
fn ensemble<'py>(
    py: Python<'py>,
    runs: Vec<PathBuf>,
    meta: Option<&PyMetaLearner>,
    kwargs: Option<&Bound<'py, PyDict>>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = pipeline_config(py, kwargs)?;
    let runs = load_runs(&runs, &cfg)?;
    let learner = meta.map(|m| &m.inner);
    let fused = py.detach(|| pipeline::fuse(&runs, learner, &cfg)).map_err(to_py)?;
    fused.iter().map(|f| fused_to_dict(py, f)).collect()
}

/// Scores one run against ground truth; returns `{"map": ..., "per_category": {...}}`.
#[pyfunction]
#[pyo3(signature = (run, gt, **kwargs))]
fn evaluate<'py>(
    py: Python<'py>,
    run: PathBuf,
    gt: PathBuf,
    kwargs: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = pipeline_config(py, kwargs)?;
    let run = load_run(&run, 1, cfg.min_score).map_err(to_py)?;
    let gt = load_ground_truth(&gt).map_err(to_py)?;
    let result = py.detach(|| eval::evaluate(&run, &gt, &cfg.eval_config())).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("map", result.map)?;
    d.set_item("per_category", result.per_category_ap.clone())?;
    d.set_item("n_positive", result.n_positive.clone())?;
    Ok(d)
}

/// Runs a scenario file for one seed and returns the benchmark report.
#[pyfunction]
fn simulate<'py>(py: Python<'py>, scenario: PathBuf, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let scenario = Scenario::load(&scenario).map_err(to_py)?;
    scenario.validate().map_err(to_py)?;
    let report = py.detach(|| run_benchmark(&scenario, seed)).map_err(to_py)?.report;
    let d = PyDict::new(py);
    d.set_item("seed", report.seed)?;
    d.set_item("models", report.models.clone())?;
    d.set_item("weights", report.weights.clone())?;
    d.set_item("intercept", report.intercept)?;
    d.set_item("member_map", report.member_map.clone())?;
    d.set_item("nms_map", report.nms_map)?;
    d.set_item("wbf_map", report.wbf_map)?;
    d.set_item("stacking_map", report.stacking_map)?;
    Ok(d)
}

#[pymodule]
fn obbstack(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ObbStackError", m.py().get_type::<ObbStackError>())?;
    m.add_class::<PyObb>()?;
    m.add_class::<PyMetaLearner>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(intersection_area, m)?)?;
    m.add_function(wrap_pyfunction!(relative_angle, m)?)?;
    m.add_function(wrap_pyfunction!(fit_temperature, m)?)?;
    m.add_function(wrap_pyfunction!(decompose_weights, m)?)?;
    m.add_function(wrap_pyfunction!(train_meta, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
