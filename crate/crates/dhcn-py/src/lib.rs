//! Python bindings: train / load / save / predict on dataset manifests, plus
//! evaluation metrics and the finite-difference gradient checker.

use std::path::Path;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use dhcn::context::Similarity;
use dhcn::dataset::load_dataset;
use dhcn::error::Error;
use dhcn::network::DepthConfig;
use dhcn::pipeline::{
    evaluate_predictions, predict as predict_dataset, train_model, InitialMapChoice,
    PredictionEntry, Predictions, TrainSpec,
};
use dhcn::train::{gradcheck, GradcheckLoss, TrainConfig, TrainMode};

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numeric(_) | Error::NonFinite { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

#[allow(clippy::too_many_arguments)]
fn build_spec(
    mode: &str,
    radius: f64,
    semantic_k: usize,
    semantic_links: bool,
    similarity: &str,
    geo_layers: usize,
    sem_layers: usize,
    gamma1: f64,
    gamma2: f64,
    init_map: &str,
    kpca_dim: usize,
    landmarks: usize,
    svm_c: f64,
    balance_classes: bool,
    epochs: usize,
    svm_tol: f64,
    outer_iters: usize,
    lr: f64,
    context_steps: usize,
    grad_clip: Option<f64>,
    renormalize_rows: bool,
    seed: u64,
) -> PyResult<TrainSpec> {
    let initial_map = match init_map {
        "linear" => InitialMapChoice::Linear,
        "hi-kpca" => InitialMapChoice::HiKpca {
            dim: kpca_dim,
            landmark_count: landmarks,
        },
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown init_map '{other}' (expected linear or hi-kpca)"
            )))
        }
    };
    Ok(TrainSpec {
        depth: DepthConfig {
            geo_layers,
            sem_layers,
            gamma1,
            gamma2,
        },
        radius,
        semantic_k,
        similarity: Similarity::parse(similarity).map_err(to_py_err)?,
        use_links: semantic_links,
        initial_map,
        svm_c,
        balance_classes,
        svm_epochs: epochs,
        svm_tol,
        cfg: TrainConfig {
            outer_iters,
            context_lr: lr,
            context_steps_per_outer: context_steps,
            grad_clip,
            seed,
            mode: TrainMode::parse(mode).map_err(to_py_err)?,
            renormalize_rows,
        },
    })
}

fn predictions_to_py(py: Python<'_>, predictions: &Predictions) -> PyResult<Py<PyList>> {
    let out = PyList::empty(py);
    for entry in &predictions.images {
        let d = PyDict::new(py);
        d.set_item("id", &entry.id)?;
        d.set_item("keywords", &entry.keywords)?;
        d.set_item("scores", &entry.scores)?;
        out.append(d)?;
    }
    Ok(out.unbind())
}

fn predictions_from_py(concepts: Vec<String>, items: &Bound<'_, PyList>) -> PyResult<Predictions> {
    let mut images = Vec::with_capacity(items.len());
    for item in items.iter() {
        let d = item.cast::<PyDict>()?;
        let id: String = d
            .get_item("id")?
            .ok_or_else(|| PyValueError::new_err("prediction entry is missing 'id'"))?
            .extract()?;
        let keywords: Vec<String> = match d.get_item("keywords")? {
            Some(v) => v.extract()?,
            None => Vec::new(),
        };
        let scores: Vec<f64> = d
            .get_item("scores")?
            .ok_or_else(|| PyValueError::new_err("prediction entry is missing 'scores'"))?
            .extract()?;
        images.push(PredictionEntry {
            id,
            keywords,
            scores,
        });
    }
    Ok(Predictions { concepts, images })
}

/// A trained annotation model.
#[pyclass(name = "Model")]
struct PyModel {
    inner: dhcn::model::DhcnModel,
}

#[pymethods]
impl PyModel {
    /// Train on a dataset manifest and return the fitted model.
    #[staticmethod]
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (manifest, *, mode="dhcn", radius=1.0, semantic_k=10,
        semantic_links=false, similarity="cosine", geo_layers=2, sem_layers=2,
        gamma1=1.0, gamma2=1.0, init_map="linear", kpca_dim=64, landmarks=256,
        svm_c=1.0, balance_classes=false, epochs=1000, svm_tol=1e-8,
        outer_iters=100, lr=0.01, context_steps=1, grad_clip=None,
        renormalize_rows=false, seed=0))]
    fn train(
        manifest: &str,
        mode: &str,
        radius: f64,
        semantic_k: usize,
        semantic_links: bool,
        similarity: &str,
        geo_layers: usize,
        sem_layers: usize,
        gamma1: f64,
        gamma2: f64,
        init_map: &str,
        kpca_dim: usize,
        landmarks: usize,
        svm_c: f64,
        balance_classes: bool,
        epochs: usize,
        svm_tol: f64,
        outer_iters: usize,
        lr: f64,
        context_steps: usize,
        grad_clip: Option<f64>,
        renormalize_rows: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let dataset = load_dataset(Path::new(manifest)).map_err(to_py_err)?;
        let spec = build_spec(
            mode,
            radius,
            semantic_k,
            semantic_links,
            similarity,
            geo_layers,
            sem_layers,
            gamma1,
            gamma2,
            init_map,
            kpca_dim,
            landmarks,
            svm_c,
            balance_classes,
            epochs,
            svm_tol,
            outer_iters,
            lr,
            context_steps,
            grad_clip,
            renormalize_rows,
            seed,
        )?;
        let inner = train_model(&dataset, &spec, |_| {}).map_err(to_py_err)?;
        Ok(PyModel { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: dhcn::model::load_model(Path::new(path)).map_err(to_py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        dhcn::model::save_model(&self.inner, Path::new(path)).map_err(to_py_err)
    }

    /// Score a manifest; returns a list of {id, keywords, scores} dicts.
    fn predict(&self, py: Python<'_>, manifest: &str) -> PyResult<Py<PyList>> {
        let dataset = load_dataset(Path::new(manifest)).map_err(to_py_err)?;
        let predictions = predict_dataset(&self.inner, &dataset).map_err(to_py_err)?;
        predictions_to_py(py, &predictions)
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode.name()
    }

    #[getter]
    fn concepts(&self) -> Vec<String> {
        self.inner.concepts.clone()
    }

    #[getter]
    fn final_objective(&self) -> f64 {
        self.inner.provenance.final_objective
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.provenance.seed
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(mode={}, concepts={}, objective={:.6})",
            self.inner.mode.name(),
            self.inner.concepts.len(),
            self.inner.provenance.final_objective
        )
    }
}

/// Compare predictions against a manifest's ground truth.
#[pyfunction]
fn evaluate(
    py: Python<'_>,
    manifest: &str,
    predictions: &Bound<'_, PyList>,
) -> PyResult<Py<PyDict>> {
    let dataset = load_dataset(Path::new(manifest)).map_err(to_py_err)?;
    let predictions = predictions_from_py(dataset.concepts.clone(), predictions)?;
    let report = evaluate_predictions(&predictions, &dataset).map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("mf_s", report.mf_s)?;
    d.set_item("mf_c", report.mf_c)?;
    d.set_item("map", report.map)?;
    let per_concept = PyList::empty(py);
    for c in &report.per_concept {
        let row = PyDict::new(py);
        row.set_item("concept", &c.concept)?;
        row.set_item("precision", c.precision)?;
        row.set_item("recall", c.recall)?;
        row.set_item("f1", c.f1)?;
        row.set_item("average_precision", c.average_precision)?;
        per_concept.append(row)?;
    }
    d.set_item("per_concept", per_concept)?;
    Ok(d.unbind())
}

/// Check analytic context gradients against central finite differences on a
/// small manifest; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (manifest, *, smooth=false, mode="dhcn", radius=1.0,
    semantic_k=3, geo_layers=2, sem_layers=2, gamma1=1.0, gamma2=1.0,
    svm_c=1.0, epochs=500, seed=0))]
#[allow(clippy::too_many_arguments)]
fn gradcheck_manifest(
    py: Python<'_>,
    manifest: &str,
    smooth: bool,
    mode: &str,
    radius: f64,
    semantic_k: usize,
    geo_layers: usize,
    sem_layers: usize,
    gamma1: f64,
    gamma2: f64,
    svm_c: f64,
    epochs: usize,
    seed: u64,
) -> PyResult<Py<PyDict>> {
    let dataset = load_dataset(Path::new(manifest)).map_err(to_py_err)?;
    let spec = build_spec(
        mode, radius, semantic_k, false, "cosine", geo_layers, sem_layers, gamma1, gamma2,
        "linear", 0, 0, svm_c, false, epochs, 1e-10, 1, 0.01, 1, None, false, seed,
    )?;
    let initial_map =
        dhcn::pipeline::build_initial_map(&dataset, spec.initial_map, seed).map_err(to_py_err)?;
    let problem = dhcn::pipeline::training_problem(&dataset, &initial_map).map_err(to_py_err)?;
    let opts = dhcn::pipeline::train_options(&dataset, &spec).map_err(to_py_err)?;
    let loss = if smooth {
        GradcheckLoss::Smooth
    } else {
        GradcheckLoss::Hinge
    };
    let report = gradcheck(&problem, &opts, loss, seed).map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("loss", report.loss)?;
    d.set_item("max_rel_error_context", report.max_rel_error_context)?;
    d.set_item("max_rel_error_svm", report.max_rel_error_svm)?;
    d.set_item("checked_context_entries", report.checked_context_entries)?;
    d.set_item("checked_svm_coordinates", report.checked_svm_coordinates)?;
    d.set_item("skipped_margin_ties", report.skipped_margin_ties)?;
    d.set_item("threshold", report.threshold)?;
    d.set_item("passed", report.passed)?;
    Ok(d.unbind())
}

#[pymodule]
fn dhcn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_manifest, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
