//! Python bindings: geometry, metrics, model scoring and training, and the
//! synthetic generator.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ctxscore::coco;
use ctxscore::evaluation::{self, evaluate};
use ctxscore::geometry::Relation;
use ctxscore::pipelines::{pipeline_eval_input, Mode};
use ctxscore::synth::{synth_generate, SynthSpec};
use ctxscore::{ContextModel, Detection, RelationConfig, RelationFamily, TrainConfig};

const RELATIONS: [Relation; 16] = [
    Relation::Cooccur,
    Relation::OverlapYes,
    Relation::OverlapNo,
    Relation::Larger,
    Relation::Smaller,
    Relation::Equal,
    Relation::BoundaryAbove,
    Relation::BoundaryBelow,
    Relation::BoundaryLeft,
    Relation::BoundaryRight,
    Relation::CentralAbove,
    Relation::CentralBelow,
    Relation::CentralLeft,
    Relation::CentralRight,
    Relation::Near,
    Relation::Far,
];

fn err(e: ctxscore::Error) -> PyErr {
    match e {
        ctxscore::Error::Io(e) => PyErr::from(e),
        e @ (ctxscore::Error::Config(_) | ctxscore::Error::Dimension { .. }) => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn snake<T: serde::Serialize>(v: T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

/// Relation config with only the named families on; all six when `None`.
fn relation_config(families: Option<Vec<String>>) -> PyResult<RelationConfig> {
    let Some(names) = families else {
        return Ok(RelationConfig::all());
    };
    let mut picked = Vec::new();
    for name in names {
        let f: RelationFamily = serde_json::from_value(serde_json::Value::String(name.clone()))
            .map_err(|_| PyValueError::new_err(format!("unknown relation family {name:?}")))?;
        picked.push(f);
    }
    let cfg = RelationConfig::only(&picked);
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// Axis-aligned box `(x, y, w, h)` with a top-left origin.
#[pyclass(name = "BBox", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyBBox(ctxscore::BBox);

#[pymethods]
impl PyBBox {
    #[new]
    fn new(x: f64, y: f64, w: f64, h: f64) -> PyResult<Self> {
        ctxscore::BBox::new(x, y, w, h).map(Self).map_err(err)
    }

    #[getter]
    fn x(&self) -> f64 {
        self.0.x()
    }

    #[getter]
    fn y(&self) -> f64 {
        self.0.y()
    }

    #[getter]
    fn w(&self) -> f64 {
        self.0.w()
    }

    #[getter]
    fn h(&self) -> f64 {
        self.0.h()
    }

    fn area(&self) -> f64 {
        self.0.area()
    }

    fn to_list(&self) -> [f64; 4] {
        self.0.to_array()
    }

    fn __repr__(&self) -> String {
        let [x, y, w, h] = self.0.to_array();
        format!("BBox({x}, {y}, {w}, {h})")
    }
}

#[pyfunction]
fn iou(a: &PyBBox, b: &PyBBox) -> f64 {
    ctxscore::iou(&a.0, &b.0)
}

/// All sixteen relation bits of `reference` against `other`, in layout order.
#[pyfunction]
#[pyo3(signature = (reference, other, families=None))]
fn relation_bits<'py>(
    py: Python<'py>,
    reference: &PyBBox,
    other: &PyBBox,
    families: Option<Vec<String>>,
) -> PyResult<Bound<'py, PyDict>> {
    let bits = ctxscore::relation_bits(&reference.0, &other.0, &relation_config(families)?);
    let out = PyDict::new(py);
    for r in RELATIONS {
        out.set_item(snake(r), bits.get(r))?;
    }
    Ok(out)
}

#[pyfunction]
#[pyo3(signature = (vocab_size, families=None))]
fn feature_length(vocab_size: usize, families: Option<Vec<String>>) -> PyResult<usize> {
    Ok(ctxscore::feature_length(&relation_config(families)?, vocab_size))
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    evaluation::auc(&scores, &labels).map_err(err)
}

/// `(precision, recall, f1)` from match counts.
#[pyfunction]
fn f1(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let s = evaluation::f1(tp, fp, fn_);
    (s.precision, s.recall, s.f1)
}

/// A trained context classifier.
#[pyclass(name = "ContextModel", frozen)]
struct PyModel(ContextModel);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ContextModel::load(path).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        ContextModel::from_json(text).map(Self).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(path).map_err(err)
    }

    #[getter]
    fn feature_length(&self) -> usize {
        self.0.feature_length()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.0.vocab.categories().iter().map(|c| c.name.clone()).collect()
    }

    /// Context score of every detection in one scene. Each detection is
    /// `(class_index, (x, y, w, h), confidence)`.
    fn score_scene(&self, detections: Vec<(usize, (f64, f64, f64, f64), f64)>) -> PyResult<Vec<f64>> {
        let dets = detections
            .into_iter()
            .map(|(c, (x, y, w, h), conf)| {
                let d = Detection::new(0, c, ctxscore::BBox::new(x, y, w, h)?, conf);
                d.validate(self.0.vocab.len())?;
                Ok(d)
            })
            .collect::<ctxscore::Result<Vec<_>>>()
            .map_err(err)?;
        self.0.score_scene(&dets).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "ContextModel(classes={}, hidden={}, seed={})",
            self.0.vocab.len(),
            self.0.network.hidden(),
            self.0.seed
        )
    }
}

fn load_bundle(annotations: PathBuf, detections: PathBuf, threshold: f64) -> PyResult<coco::DatasetBundle> {
    let mut bundle = coco::load_annotations(annotations).map_err(err)?;
    coco::load_detections(detections, &mut bundle, threshold).map_err(err)?;
    Ok(bundle)
}

/// Trains a model from COCO annotations and detector results.
#[pyfunction]
#[pyo3(signature = (annotations, detections, threshold=0.5, hidden=None, seed=None, validation_fraction=None))]
fn train(
    py: Python<'_>,
    annotations: PathBuf,
    detections: PathBuf,
    threshold: f64,
    hidden: Option<usize>,
    seed: Option<u64>,
    validation_fraction: Option<f64>,
) -> PyResult<PyModel> {
    let bundle = load_bundle(annotations, detections, threshold)?;
    let mut cfg = TrainConfig::default();
    cfg.hidden = hidden.unwrap_or(cfg.hidden);
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.validation_fraction = validation_fraction.unwrap_or(cfg.validation_fraction);
    cfg.validate().map_err(err)?;
    let relations = RelationConfig::all();
    py.detach(|| {
        let set = ctxscore::build_training_set(&bundle.detections, &bundle.ground_truth, &relations, &bundle.vocab)?;
        ContextModel::train(&set, &bundle.vocab, &relations, &cfg)
    })
    .map(|(m, _)| PyModel(m))
    .map_err(err)
}

/// Metrics of the detector, rescore or relabel output, as a dict.
#[pyfunction]
#[pyo3(signature = (annotations, detections, mode="detector", model=None, threshold=0.5, t=0.4))]
fn evaluate_files<'py>(
    py: Python<'py>,
    annotations: PathBuf,
    detections: PathBuf,
    mode: &str,
    model: Option<&PyModel>,
    threshold: f64,
    t: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let mode: Mode = mode.parse().map_err(err)?;
    let bundle = load_bundle(annotations, detections, threshold)?;
    let input = pipeline_eval_input(
        mode,
        model.map(|m| &m.0),
        &bundle.detections,
        &bundle.ground_truth,
        threshold,
        t,
    )
    .map_err(err)?;
    let r = evaluate(&input, &bundle.ground_truth, &bundle.vocab, mode.name(), threshold);
    let out = PyDict::new(py);
    out.set_item("mode", &r.mode)?;
    out.set_item("threshold", r.threshold)?;
    out.set_item("auc", r.auc)?;
    out.set_item("map50", r.map50)?;
    out.set_item("f1", r.f1)?;
    out.set_item("precision", r.precision)?;
    out.set_item("recall", r.recall)?;
    out.set_item("per_class_ap", r.per_class_ap)?;
    out.set_item("detections", r.detections)?;
    Ok(out)
}

/// Writes `annotations.json` and `detections.json` of a synthetic dataset
/// into `out_dir` and returns `(images, detections, correct, mislabeled)`.
#[pyfunction]
#[pyo3(signature = (out_dir, images=100, seed=0, first_image_id=1, mislabel_fraction=0.0))]
fn synth(
    out_dir: PathBuf,
    images: usize,
    seed: u64,
    first_image_id: u64,
    mislabel_fraction: f64,
) -> PyResult<(usize, usize, usize, usize)> {
    let spec = SynthSpec {
        images,
        seed,
        first_image_id,
        mislabel_fraction,
        ..SynthSpec::default()
    };
    let out = synth_generate(&spec).map_err(err)?;
    let b = &out.bundle;
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("annotations.json"), coco::annotations_json(b).map_err(err)?)?;
    let results = coco::results_json(b.detections.values().flatten(), &b.vocab).map_err(err)?;
    std::fs::write(out_dir.join("detections.json"), results)?;
    let s = out.summary;
    Ok((s.images, s.detections, s.correct, s.mislabeled))
}

#[pymodule]
#[pyo3(name = "ctxscore")]
fn ctxscore_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBBox>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(relation_bits, m)?)?;
    m.add_function(wrap_pyfunction!(feature_length, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(f1, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_files, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    Ok(())
}
