//! Python bindings: dataset synthesis, feature extraction, training,
//! evaluation, checkpoint inference and the metric functions.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use dualbranch::config::RunConfig;
use dualbranch::data::synth::label_counts;
use dualbranch::data::{synth_generate, ClassMix, SynthParams};
use dualbranch::eval::{auroc, evaluate_run, iom as rect_iom, pauc_ratio, roc_curve, specificity_at_sensitivity};
use dualbranch::image::Rect;
use dualbranch::model::{predict, Checkpoint, Hyper, Task};
use dualbranch::pipeline;
use dualbranch::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::UnknownKey(_) | Error::DimensionMismatch { .. } => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Run configuration; keys as in configuration files.
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (path=None))]
    fn new(path: Option<PathBuf>) -> PyResult<Self> {
        let inner = match path {
            Some(p) => RunConfig::load(p).map_err(py_err)?,
            None => RunConfig::default(),
        };
        Ok(PyRunConfig { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(py_err)
    }

    fn get(&self, key: &str) -> PyResult<Option<String>> {
        self.inner.get(key).map_err(py_err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(mode={}, epochs={}, seed={})", self.inner.train.hyper.mode, self.inner.train.epochs, self.inner.train.seed)
    }
}

/// Trained weights loaded from a checkpoint.
#[pyclass(name = "Model")]
struct PyModel {
    checkpoint: Checkpoint,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            checkpoint: Checkpoint::load(path).map_err(py_err)?,
        })
    }

    /// Fresh weights for `input_dim`-dimensional features, at checkpoint
    /// (`f32`) precision so a saved copy predicts identically.
    #[staticmethod]
    #[pyo3(signature = (input_dim, hidden_dim=64, mode="full", k=10, seed=0))]
    fn init(input_dim: usize, hidden_dim: usize, mode: &str, k: usize, seed: u64) -> PyResult<Self> {
        let hyper = Hyper {
            mode: mode.parse().map_err(py_err)?,
            k,
            ..Hyper::default()
        };
        let mut params = dualbranch::model::init_params(seed, input_dim, hidden_dim, hyper).map_err(py_err)?;
        params.weights.round_to_f32();
        Ok(PyModel {
            checkpoint: Checkpoint::new(params),
        })
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.checkpoint.params.mode().as_str()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.checkpoint.params.input_dim()
    }

    #[getter]
    fn hidden_dim(&self) -> usize {
        self.checkpoint.params.hidden_dim()
    }

    /// Image posteriors `(p_M, p_B)` and per-region `(d_B, d_M)` localization
    /// scores for one image given as a list of region feature rows.
    fn predict(&self, features: Vec<Vec<f64>>) -> PyResult<((f64, f64), Vec<(f64, f64)>)> {
        let d = self.input_dim();
        if let Some(row) = features.iter().find(|r| r.len() != d) {
            return Err(PyValueError::new_err(format!("feature rows must have length {d}, got {}", row.len())));
        }
        let m = features.len();
        let x = Array2::from_shape_vec((m, d), features.concat()).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let (post, loc) = predict(&self.checkpoint.params, x.view()).map_err(py_err)?;
        let rows = loc.rows().into_iter().map(|r| (r[0], r[1])).collect();
        Ok(((post.malignant, post.benign), rows))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.checkpoint.save(path).map_err(py_err)
    }
}

/// Writes a synthetic dataset; returns label counts.
#[pyfunction]
#[pyo3(signature = (out, seed=1, n=800, mix="3:3:4"))]
fn synth(out: PathBuf, seed: u64, n: usize, mix: &str) -> PyResult<(usize, usize, usize, usize)> {
    let params = SynthParams {
        mix: ClassMix::parse_bmn(mix).map_err(py_err)?,
        ..SynthParams::default()
    };
    let mut ds = synth_generate(seed, n, &params).map_err(py_err)?;
    ds.write(&out).map_err(py_err)?;
    let [normal, m, b, both] = label_counts(&ds.manifest);
    Ok((normal, m, b, both))
}

/// Extracts the feature file of a dataset; returns per-image region counts.
#[pyfunction]
#[pyo3(signature = (data, out, config=None))]
fn extract(py: Python<'_>, data: PathBuf, out: PathBuf, config: Option<PyRunConfig>) -> PyResult<Vec<usize>> {
    let cfg = config.map(|c| c.inner).unwrap_or_default();
    py.detach(|| {
        let (store, counts) = pipeline::extract_features(&data, &cfg)?;
        store.write(&out)?;
        Ok(counts)
    })
    .map_err(py_err)
}

/// Cross-validated training into `run_dir`; returns the fold-assignment hash.
#[pyfunction]
fn train(py: Python<'_>, config: PyRunConfig, run_dir: PathBuf) -> PyResult<String> {
    let mut cfg = config.inner;
    cfg.run = Some(run_dir.clone());
    py.detach(|| {
        let dataset = pipeline::load_dataset(&cfg)?;
        let bank = pipeline::build_bank(&dataset, &cfg)?;
        let run = pipeline::train_run(&dataset, &cfg, bank.as_ref(), Some(&run_dir))?;
        Ok(run.folds.digest())
    })
    .map_err(py_err)
}

/// Evaluates a trained run; returns the metrics report as JSON.
#[pyfunction]
#[pyo3(signature = (run_dir, task, breast_level=false))]
fn evaluate(py: Python<'_>, run_dir: PathBuf, task: &str, breast_level: bool) -> PyResult<String> {
    let task: Task = task.parse().map_err(py_err)?;
    py.detach(|| {
        let (mut cfg, folds) = pipeline::load_run(&run_dir)?;
        cfg.train.augment = false;
        let dataset = pipeline::load_dataset(&cfg)?;
        let models = pipeline::load_fold_models(&run_dir, &dataset, &folds)?;
        let ev = evaluate_run(&dataset, &models, task, breast_level)?;
        pipeline::write_evaluation(&ev, &run_dir.join(pipeline::eval_dir_name(task, breast_level)))?;
        Ok(ev.report.to_json())
    })
    .map_err(py_err)
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    Ok(auroc(&roc_curve(&scores, &labels).map_err(py_err)?))
}

#[pyfunction]
#[pyo3(signature = (scores, labels, lo=0.8, hi=1.0))]
fn partial_auc_ratio(scores: Vec<f64>, labels: Vec<bool>, lo: f64, hi: f64) -> PyResult<f64> {
    if !(lo < hi) {
        return Err(PyValueError::new_err("sensitivity band must satisfy lo < hi"));
    }
    Ok(pauc_ratio(&roc_curve(&scores, &labels).map_err(py_err)?, lo, hi))
}

#[pyfunction]
#[pyo3(signature = (scores, labels, target=0.85))]
fn specificity_at(scores: Vec<f64>, labels: Vec<bool>, target: f64) -> PyResult<f64> {
    Ok(specificity_at_sensitivity(&roc_curve(&scores, &labels).map_err(py_err)?, target))
}

/// Intersection over the smaller area of two `(x, y, w, h)` rectangles.
#[pyfunction]
fn iom(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> PyResult<f64> {
    rect_iom(&Rect::new(a.0, a.1, a.2, a.3), &Rect::new(b.0, b.1, b.2, b.3)).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "dualbranch")]
fn dualbranch_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(extract, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(partial_auc_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(specificity_at, m)?)?;
    m.add_function(wrap_pyfunction!(iom, m)?)?;
    Ok(())
}
