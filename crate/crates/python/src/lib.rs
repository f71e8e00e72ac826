//! Python bindings: datasets, models, clustering and metrics.

use std::collections::BTreeSet;
use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pargraph::cluster::{cluster_groups as cluster, AffinityMode, ClusterConfig, Partition};
use pargraph::data::{
    load_dataset, save_dataset, synth_generate, FeatureStorage, FrameAnnotation, SynthConfig,
};
use pargraph::metrics::{evaluate, group_detection_scores, multilabel_prf as prf, VocabSizes};
use pargraph::model::{ModelConfig, ModelParams};
use pargraph::nn::{AdamState, Tensor2};
use pargraph::train::{infer, train_with, InferConfig, ParPrediction, TrainConfig};
use pargraph::Error;

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFinite(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Serializes through JSON into plain Python objects.
fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: serde::de::DeserializeOwned>(
    py: Python<'_>,
    value: Option<&Bound<'_, PyDict>>,
) -> PyResult<T> {
    let text: String = match value {
        Some(d) => py.import("json")?.call_method1("dumps", (d,))?.extract()?,
        None => "{}".into(),
    };
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(format!("config: {e}")))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor2> {
    Tensor2::from_rows(&rows).map_err(to_py_err)
}

/// A list of annotated frames.
#[pyclass(name = "Dataset", module = "pargraph_py")]
struct PyDataset {
    frames: Vec<FrameAnnotation>,
}

#[pymethods]
impl PyDataset {
    /// Generates a synthetic dataset; `config` overrides generator fields.
    #[staticmethod]
    #[pyo3(signature = (seed, config = None))]
    fn synth(py: Python<'_>, seed: u64, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg: SynthConfig = from_py(py, config)?;
        Ok(Self {
            frames: synth_generate(&cfg, seed).map_err(to_py_err)?,
        })
    }

    /// Reads an NDJSON annotation file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            frames: load_dataset(&path).map_err(to_py_err)?,
        })
    }

    /// Writes NDJSON; with `blob` set, features go to that file next to it.
    #[pyo3(signature = (path, blob = None))]
    fn save(&self, path: PathBuf, blob: Option<String>) -> PyResult<()> {
        let storage = blob.map_or(FeatureStorage::Inline, FeatureStorage::Blob);
        save_dataset(&path, &self.frames, &storage).map_err(to_py_err)
    }

    fn __len__(&self) -> usize {
        self.frames.len()
    }

    /// One frame as a dict.
    fn frame(&self, py: Python<'_>, index: usize) -> PyResult<Py<PyAny>> {
        let f = self
            .frames
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("frame {index} out of range")))?;
        to_py(py, f)
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.frames.first().map_or(0, |f| f.feature_dim())
    }

    /// Keeps frames whose id is a multiple of `stride`.
    fn key_frames(&self, stride: u64) -> PyResult<Self> {
        if stride == 0 {
            return Err(PyValueError::new_err("stride must be positive"));
        }
        Ok(Self {
            frames: self
                .frames
                .iter()
                .filter(|f| f.frame_id % stride == 0)
                .cloned()
                .collect(),
        })
    }
}

/// Model parameters together with optimizer state.
#[pyclass(name = "Model", module = "pargraph_py")]
struct PyModel {
    params: ModelParams,
    adam: Option<AdamState>,
    epochs_done: usize,
}

impl PyModel {
    fn infer_config(tau: f64, gt_groups: bool) -> InferConfig {
        InferConfig {
            tau,
            gt_groups,
            ..InferConfig::default()
        }
    }

    fn predictions(&self, data: &PyDataset, cfg: &InferConfig) -> PyResult<Vec<ParPrediction>> {
        data.frames
            .iter()
            .map(|f| infer(&self.params, f, cfg))
            .collect::<pargraph::Result<_>>()
            .map_err(to_py_err)
    }
}

#[pymethods]
impl PyModel {
    /// Fresh model; `config` overrides model fields (ablations, sizes, λ, ...).
    #[new]
    #[pyo3(signature = (feature_dim, seed = 0, config = None))]
    fn new(
        py: Python<'_>,
        feature_dim: usize,
        seed: u64,
        config: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<Self> {
        let mut cfg: ModelConfig = from_py(py, config)?;
        cfg.feature_dim = feature_dim;
        Ok(Self {
            params: ModelParams::init(cfg, seed).map_err(to_py_err)?,
            adam: None,
            epochs_done: 0,
        })
    }

    /// Loads weights saved by `save` or by the command-line trainer.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            params: ModelParams::load(&path).map_err(to_py_err)?,
            adam: None,
            epochs_done: 0,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.params.save(&path).map_err(to_py_err)
    }

    #[getter]
    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.params.config)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    /// Runs `epochs` more epochs of teacher-forced training and returns the
    /// mean loss of each.
    #[pyo3(signature = (data, epochs, lr = 1e-3, batch_size = 4, seed = 0))]
    fn train(
        &mut self,
        py: Python<'_>,
        data: &PyDataset,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let cfg = TrainConfig {
            lr,
            batch_size,
            epochs: self.epochs_done + epochs,
            seed,
            ..TrainConfig::default()
        };
        let (params, adam, start) = (self.params.clone(), self.adam.take(), self.epochs_done);
        let frames = &data.frames;
        let outcome = py
            .detach(|| train_with(params, adam, frames, &cfg, start, |_| Ok(())))
            .map_err(to_py_err)?;
        self.params = outcome.params;
        self.adam = Some(outcome.adam);
        self.epochs_done = cfg.epochs;
        Ok(outcome.trace.iter().map(|r| r.mean_loss).collect())
    }

    /// Per-frame predictions as dicts.
    #[pyo3(signature = (data, tau = 0.5, gt_groups = false))]
    fn predict(
        &self,
        py: Python<'_>,
        data: &PyDataset,
        tau: f64,
        gt_groups: bool,
    ) -> PyResult<Py<PyAny>> {
        to_py(
            py,
            &self.predictions(data, &Self::infer_config(tau, gt_groups))?,
        )
    }

    /// Full metrics report as a dict.
    #[pyo3(signature = (data, tau = 0.5, gt_groups = false))]
    fn evaluate(
        &self,
        py: Python<'_>,
        data: &PyDataset,
        tau: f64,
        gt_groups: bool,
    ) -> PyResult<Py<PyAny>> {
        let preds = self.predictions(data, &Self::infer_config(tau, gt_groups))?;
        let c = &self.params.config;
        let vocab = VocabSizes {
            actions: c.num_actions,
            social: c.num_social,
            global: c.num_global,
        };
        to_py(
            py,
            &evaluate(&preds, &data.frames, vocab).map_err(to_py_err)?,
        )
    }

    /// Relation matrix R of one frame.
    fn relation_matrix(&self, data: &PyDataset, index: usize) -> PyResult<Vec<Vec<f64>>> {
        let f = data
            .frames
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("frame {index} out of range")))?;
        let r = self.params.relation_bundle(f).map_err(to_py_err)?.r;
        Ok((0..r.rows()).map(|i| r.row(i).to_vec()).collect())
    }
}

/// Groups subjects from a symmetric relation matrix. Returns the groups of
/// two or more and the singletons.
#[pyfunction]
#[pyo3(signature = (relation, threshold = Some(0.5), k_max = None, seed = 0))]
fn cluster_groups(
    relation: Vec<Vec<f64>>,
    threshold: Option<f64>,
    k_max: Option<usize>,
    seed: u64,
) -> PyResult<(Vec<Vec<usize>>, Vec<usize>)> {
    let cfg = ClusterConfig {
        k_max,
        affinity: threshold.map_or(AffinityMode::Raw, AffinityMode::Threshold),
        seed,
        ..ClusterConfig::default()
    };
    let p = cluster(&matrix(relation)?, &cfg).map_err(to_py_err)?;
    Ok((
        p.groups()
            .iter()
            .map(|g| g.iter().copied().collect())
            .collect(),
        p.singletons().iter().copied().collect(),
    ))
}

/// Precision, recall and F1 of one multi-label prediction.
#[pyfunction]
fn multilabel_prf(
    pred: BTreeSet<usize>,
    gt: BTreeSet<usize>,
    vocab_size: usize,
) -> PyResult<(f64, f64, f64)> {
    let p = prf(&pred, &gt, vocab_size).map_err(to_py_err)?;
    Ok((p.precision, p.recall, p.f1))
}

/// IOU@0.5, IOU@AUC and Mat.IOU over frames given as per-subject cluster
/// labels.
#[pyfunction]
fn group_detection(
    py: Python<'_>,
    pred: Vec<Vec<usize>>,
    gt: Vec<Vec<usize>>,
) -> PyResult<Py<PyAny>> {
    let parts = |v: &[Vec<usize>]| {
        v.iter()
            .map(|l| Partition::from_labels(l))
            .collect::<Vec<_>>()
    };
    to_py(
        py,
        &group_detection_scores(&parts(&pred), &parts(&gt)).map_err(to_py_err)?,
    )
}

#[pyfunction]
fn overall_f1(f_i: f64, f_p: f64, f_g: f64) -> f64 {
    pargraph::metrics::overall_f1(f_i, f_p, f_g)
}

/// Built-in checks as `(name, passed, detail)` tuples.
#[pyfunction]
fn selftest() -> Vec<(String, bool, String)> {
    pargraph::selftest::run_selftest()
        .checks
        .into_iter()
        .map(|c| (c.name.to_string(), c.passed, c.detail))
        .collect()
}

#[pymodule]
pub fn pargraph_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(cluster_groups, m)?)?;
    m.add_function(wrap_pyfunction!(multilabel_prf, m)?)?;
    m.add_function(wrap_pyfunction!(group_detection, m)?)?;
    m.add_function(wrap_pyfunction!(overall_f1, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
