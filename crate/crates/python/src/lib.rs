//! Python bindings: scenes, foils, the model, scoring protocols, the
//! correlation helpers and the command-line driver.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use finevl::evalharness::{self, Scorer};
use finevl::model::{self, ModelConfig, VlmModel};
use finevl::synthdata::{self, Subtask};
use finevl::{dynamics, objectives, BBox, Error};

type Box4 = (f64, f64, f64, f64);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Dependency { .. } | Error::Io(_) => PyFileNotFoundError::new_err(e.to_string()),
        Error::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_box(b: Box4) -> PyResult<BBox> {
    BBox::new(b.0, b.1, b.2, b.3).map_err(py_err)
}

fn from_box(b: &BBox) -> Box4 {
    (b.x1, b.y1, b.x2, b.y2)
}

#[pyclass(name = "Scene", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyScene(synthdata::Scene);

#[pymethods]
impl PyScene {
    #[new]
    #[pyo3(signature = (seed, grid = synthdata::DEFAULT_GRID))]
    fn new(seed: u64, grid: usize) -> PyResult<Self> {
        if grid == 0 {
            return Err(PyValueError::new_err("grid must be positive"));
        }
        Ok(Self(synthdata::generate_scene_on(seed, grid)))
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[getter]
    fn side(&self) -> usize {
        self.0.grid.side
    }

    /// Patch features, row-major by patch.
    #[getter]
    fn patches(&self) -> Vec<Vec<f64>> {
        (0..self.0.grid.patches()).map(|p| self.0.grid.patch(p).to_vec()).collect()
    }

    /// `(shape, color, (x1, y1, x2, y2))` per object.
    #[getter]
    fn objects(&self) -> Vec<(String, String, Box4)> {
        self.0
            .objects
            .iter()
            .map(|o| (o.shape.to_string(), o.color.to_string(), from_box(&o.bbox)))
            .collect()
    }

    fn caption(&self) -> String {
        synthdata::caption_of(&self.0).caption
    }

    /// `(kind, text, bbox)` per detection annotation.
    fn detections(&self) -> Vec<(String, String, Box4)> {
        synthdata::detections_of(&self.0)
            .into_iter()
            .map(|d| (d.kind.name().to_string(), d.text, from_box(&d.bbox)))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!("Scene(seed={}, objects={})", self.0.seed, self.0.objects.len())
    }
}

#[pyclass(name = "Foil", frozen)]
struct PyFoil(synthdata::FoilPair);

#[pymethods]
impl PyFoil {
    #[getter]
    fn subtask(&self) -> String {
        self.0.subtask.to_string()
    }

    #[getter]
    fn positive_text(&self) -> String {
        self.0.positive_text.clone()
    }

    #[getter]
    fn negative_text(&self) -> String {
        self.0.negative_text.clone()
    }

    #[getter]
    fn positive_scene(&self) -> PyScene {
        PyScene(self.0.positive_scene.clone())
    }

    #[getter]
    fn negative_scene(&self) -> PyScene {
        PyScene(self.0.negative_scene.clone())
    }
}

/// Foil pair for `subtask` on `scene`; raises ValueError when the scene
/// cannot support it.
#[pyfunction]
fn make_foils(scene: &PyScene, subtask: &str) -> PyResult<PyFoil> {
    let subtask: Subtask = subtask.parse().map_err(py_err)?;
    synthdata::make_foils(&scene.0, subtask).map(PyFoil).map_err(py_err)
}

#[pyclass(name = "Model", frozen)]
struct PyModel(VlmModel);

#[pymethods]
impl PyModel {
    /// `config` is the model config as JSON; omitted fields take defaults.
    #[new]
    #[pyo3(signature = (seed = 0, config = None, tiny = false))]
    fn new(seed: u64, config: Option<&str>, tiny: bool) -> PyResult<Self> {
        let cfg = match config {
            Some(json) => serde_json::from_str(json).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None if tiny => ModelConfig::tiny(),
            None => ModelConfig::default(),
        };
        VlmModel::new(cfg, seed).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = model::load_checkpoint(&path).map_err(py_err)?;
        VlmModel::from_checkpoint(&ck).map(Self).map_err(py_err)
    }

    #[pyo3(signature = (path, config_hash = "", step = 0))]
    fn save(&self, path: PathBuf, config_hash: &str, step: usize) -> PyResult<()> {
        model::save_checkpoint(&path, &self.0.to_checkpoint(config_hash, step)).map_err(py_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    #[getter]
    fn temperature(&self) -> f64 {
        self.0.temperature()
    }

    #[getter]
    fn config(&self) -> String {
        serde_json::to_string(self.0.config()).expect("config serializes")
    }

    fn tokenize(&self, text: &str) -> PyResult<Vec<usize>> {
        self.0.tokenize(text).map_err(py_err)
    }

    /// Matching probability of each text against the scene.
    fn matching_scores(&self, py: Python<'_>, scene: &PyScene, texts: Vec<String>) -> PyResult<Vec<f64>> {
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        py.detach(|| evalharness::ModelScorer(&self.0).score_many(&scene.0, &refs))
            .map_err(py_err)
    }

    fn predict_bbox(&self, scene: &PyScene, text: &str) -> PyResult<Box4> {
        let tokens = self.0.tokenize(text).map_err(py_err)?;
        self.0.predict_bbox(&scene.0.grid, &tokens).map(|b| from_box(&b)).map_err(py_err)
    }
}

/// `(text, image, group)` over quads `s[caption][image]`.
#[pyfunction]
fn winoground_scores(quads: Vec<[[f64; 2]; 2]>) -> PyResult<(f64, f64, f64)> {
    let w = evalharness::winoground_scores(&quads).map_err(py_err)?;
    Ok((w.text, w.image, w.group))
}

/// `(text recall, image recall)` at `k`; `table[i][j]` scores image `i`
/// against text `j`.
#[pyfunction]
fn retrieval_recall(table: Vec<Vec<f64>>, k: usize) -> PyResult<(f64, f64)> {
    evalharness::retrieval_recall(&table, k).map_err(py_err)
}

#[pyfunction]
fn pairwise_ranking_accuracy(pairs: Vec<(f64, f64)>) -> PyResult<f64> {
    evalharness::pairwise_ranking_accuracy(&pairs).map_err(py_err)
}

#[pyfunction]
fn threshold_accuracy(scored: Vec<(f64, bool)>) -> PyResult<f64> {
    evalharness::threshold_accuracy(&scored).map_err(py_err)
}

#[pyfunction]
fn foil_accuracy(groups: Vec<(f64, Vec<f64>)>) -> PyResult<f64> {
    evalharness::foil_accuracy(&groups).map_err(py_err)
}

/// L1 distance of the corner vectors plus `1 - GIoU`.
#[pyfunction]
#[pyo3(signature = (pred, target, l1_weight = 1.0, giou_weight = 1.0))]
fn bbox_loss(pred: Box4, target: Box4, l1_weight: f64, giou_weight: f64) -> PyResult<f64> {
    Ok(objectives::bbox_loss(&to_box(pred)?, &to_box(target)?, l1_weight, giou_weight))
}

#[pyfunction]
#[pyo3(signature = (series, alpha = dynamics::DEFAULT_EMA_FACTOR))]
fn ema_smooth(series: Vec<f64>, alpha: f64) -> PyResult<Vec<f64>> {
    dynamics::ema_smooth(&series, alpha).map_err(py_err)
}

#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    dynamics::pearson(&x, &y).map_err(py_err)
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    dynamics::spearman(&x, &y).map_err(py_err)
}

/// Hash of a run config given as TOML text.
#[pyfunction]
fn config_hash(text: &str) -> PyResult<String> {
    finevl::cli::RunConfig::parse(text, "<string>").map(|c| c.hash()).map_err(py_err)
}

/// Runs the command-line driver in-process and returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    py.detach(|| finevl::cli::main_with(args))
}

#[pymodule]
fn pyfinevl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScene>()?;
    m.add_class::<PyFoil>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(make_foils, m)?)?;
    m.add_function(wrap_pyfunction!(winoground_scores, m)?)?;
    m.add_function(wrap_pyfunction!(retrieval_recall, m)?)?;
    m.add_function(wrap_pyfunction!(pairwise_ranking_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(foil_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(bbox_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ema_smooth, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("SUBTASKS", Subtask::ALL.iter().map(|s| s.name()).collect::<Vec<_>>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
