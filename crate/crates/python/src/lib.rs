//! Python module `tas`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use tas_core::alignment::{floored_log_probs, viterbi_align as align};
use tas_core::data::{load_checkpoint, load_features, synth_generate, SyntheticConfig};
use tas_core::metrics::{self, CorpusMetrics};
use tas_core::objectives;
use tas_core::rng::SplitMix64;
use tas_core::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix<F: tas_core::tensor::Scalar>(rows: Vec<Vec<F>>) -> PyResult<Tensor<F>> {
    Tensor::from_rows(&rows).map_err(py_err)
}

fn to_rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Aligns `transcript` to a T×C probability matrix.
/// Returns `(frame_labels, durations, score)`.
#[pyfunction]
fn viterbi_align(
    probs: Vec<Vec<f64>>,
    transcript: Vec<usize>,
) -> PyResult<(Vec<usize>, Vec<usize>, f64)> {
    let p = matrix(probs)?;
    let r = align(&floored_log_probs(&p), &transcript).map_err(py_err)?;
    Ok((r.frame_labels, r.durations, r.score))
}

#[pyfunction]
fn frame_accuracy(pred: Vec<usize>, gt: Vec<usize>) -> PyResult<f64> {
    metrics::frame_accuracy(&pred, &gt).map_err(py_err)
}

/// Edit score between two frame-label sequences (collapsed first).
#[pyfunction]
fn edit_score(pred: Vec<usize>, gt: Vec<usize>) -> f64 {
    use tas_core::alignment::collapse;
    metrics::edit_score(&collapse(&pred), &collapse(&gt))
}

#[pyfunction]
fn f1_at(pred: Vec<usize>, gt: Vec<usize>, tau: f64) -> f64 {
    use tas_core::alignment::segments_from_frames;
    metrics::f1_at(
        &segments_from_frames(&pred),
        &segments_from_frames(&gt),
        tau,
    )
}

/// Corpus scores over paired videos: accuracy, edit, f1@10/25/50.
#[pyfunction]
#[pyo3(signature = (preds, gts, ignore_class=None))]
fn evaluate<'py>(
    py: Python<'py>,
    preds: Vec<Vec<usize>>,
    gts: Vec<Vec<usize>>,
    ignore_class: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    if preds.len() != gts.len() {
        return Err(PyValueError::new_err("preds and gts differ in length"));
    }
    let mut corpus = CorpusMetrics::new(ignore_class);
    for (p, g) in preds.iter().zip(&gts) {
        corpus.add_video(p, g).map_err(py_err)?;
    }
    let r = corpus.report();
    let d = PyDict::new(py);
    d.set_item("accuracy", r.accuracy)?;
    d.set_item("edit", r.edit)?;
    for (tau, v) in &r.f1 {
        d.set_item(format!("f1@{:02}", (tau * 100.0).round()), v)?;
    }
    Ok(d)
}

/// Shifts labels by a random step in `±[1, eps]` drawn from `seed`.
#[pyfunction]
fn temporal_label_smooth(labels: Vec<usize>, eps: usize, seed: u64) -> Vec<usize> {
    objectives::temporal_label_smooth(&labels, eps, &mut SplitMix64::new(seed))
}

#[pyfunction]
fn categorical_label_smooth(
    labels: Vec<usize>,
    alpha: f64,
    classes: usize,
) -> PyResult<Vec<Vec<f64>>> {
    let t = objectives::categorical_label_smooth::<f64>(&labels, alpha, classes).map_err(py_err)?;
    Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
}

/// Generates the default synthetic dataset (optionally reseeded) and returns
/// a list of `{id, split, features, labels}` dicts.
#[pyfunction]
#[pyo3(signature = (seed=None, out=None))]
fn synth<'py>(
    py: Python<'py>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut cfg = SyntheticConfig::default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let data = synth_generate(&cfg)
        .map_err(py_err)?
        .to_dataset()
        .map_err(py_err)?;
    if let Some(root) = out {
        data.write(&root).map_err(py_err)?;
    }
    let mut videos = Vec::new();
    for (split, vs) in [("train", &data.train), ("val", &data.val)] {
        for v in vs {
            let d = PyDict::new(py);
            d.set_item("id", &v.id)?;
            d.set_item("split", split)?;
            d.set_item("features", to_rows(&v.features))?;
            d.set_item("labels", &v.labels)?;
            videos.push(d);
        }
    }
    Ok(videos)
}

/// A trained model loaded from a checkpoint directory.
#[pyclass(frozen)]
struct Model {
    inner: tas_core::model::Model<f32>,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        let (inner, _) = load_checkpoint::<f32>(&checkpoint).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.config.num_classes
    }

    /// Runs identification, reasoning and fusion on a T×D feature matrix, or
    /// on a feature file path.
    fn predict<'py>(
        &self,
        py: Python<'py>,
        features: &Bound<'py, PyAny>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let x = match features.extract::<PathBuf>() {
            Ok(path) if !features.is_instance_of::<pyo3::types::PyList>() => {
                load_features(&path).map_err(py_err)?
            }
            _ => matrix(features.extract::<Vec<Vec<f32>>>()?)?,
        };
        let p = tas_core::trainer::predict(&self.inner, "", &x).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("probabilities", to_rows(&p.probabilities))?;
        d.set_item("transcript", p.transcript)?;
        d.set_item("end_found", p.end_found)?;
        d.set_item("raw_labels", p.raw_labels)?;
        d.set_item("labels", p.fused_labels)?;
        d.set_item("fell_back", p.fell_back)?;
        Ok(d)
    }
}

#[pymodule]
fn tas(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(viterbi_align, m)?)?;
    m.add_function(wrap_pyfunction!(frame_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(edit_score, m)?)?;
    m.add_function(wrap_pyfunction!(f1_at, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(temporal_label_smooth, m)?)?;
    m.add_function(wrap_pyfunction!(categorical_label_smooth, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
