//! Python module `scan_match`. Matrices cross the boundary as lists of rows
//! (anything iterable, including 2-D numpy arrays).

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use scan_core::attention::{self, Direction, Pooling, Scorer};
use scan_core::checkpoint::Checkpoint;
use scan_core::dataio::{generate_synthetic as generate, SyntheticSpec};
use scan_core::encoders::{project_regions, ImageFeatures, WordSequence};
use scan_core::eval::{recall_at_k as recall, EvalReport, RecallReport, RetrievalDirection, ScoreGrid};
use scan_core::learning::{triplet_loss as loss, LossConfig, LossMode, ScoreMatrix};
use scan_core::{Matrix, ScanError};

fn py_err(e: ScanError) -> PyErr {
    match e {
        ScanError::Io(_) | ScanError::Format { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(py_err)
}

fn parse<T: std::str::FromStr<Err = ScanError>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

fn retrieval(s: &str) -> PyResult<RetrievalDirection> {
    match s {
        "sentence" | "sentence-retrieval" => Ok(RetrievalDirection::SentenceRetrieval),
        "image" | "image-retrieval" => Ok(RetrievalDirection::ImageRetrieval),
        other => Err(PyValueError::new_err(format!("unknown retrieval direction '{other}'"))),
    }
}

#[pyclass(name = "ScanConfig", module = "scan_match", frozen)]
struct PyScanConfig(attention::ScanConfig);

#[pymethods]
impl PyScanConfig {
    #[new]
    #[pyo3(signature = (direction = "t2i", pooling = "avg", lambda1 = 9.0, lambda2 = 6.0, max_regions = None))]
    fn new(direction: &str, pooling: &str, lambda1: f64, lambda2: f64, max_regions: Option<usize>) -> PyResult<Self> {
        let mut c = attention::ScanConfig::new(parse(direction)?, parse(pooling)?, lambda1, lambda2);
        c.max_regions = max_regions;
        c.validate().map_err(py_err)?;
        Ok(PyScanConfig(c))
    }

    #[getter]
    fn direction(&self) -> &'static str {
        self.0.direction.short_name()
    }

    #[getter]
    fn pooling(&self) -> String {
        format!("{:?}", self.0.pooling).to_lowercase()
    }

    #[getter]
    fn lambda1(&self) -> f64 {
        self.0.lambda1
    }

    #[getter]
    fn lambda2(&self) -> f64 {
        self.0.lambda2
    }

    fn __repr__(&self) -> String {
        format!(
            "ScanConfig(direction='{}', pooling='{}', lambda1={}, lambda2={})",
            self.direction(),
            self.pooling(),
            self.0.lambda1,
            self.0.lambda2
        )
    }
}

/// Intermediate values of one scored pair. Matrices are regions × words.
#[pyclass(name = "AttentionTrace", module = "scan_match", frozen)]
struct PyTrace(attention::AttentionTrace);

#[pymethods]
impl PyTrace {
    #[getter]
    fn score(&self) -> f64 {
        self.0.score
    }

    #[getter]
    fn direction(&self) -> &'static str {
        self.0.direction.short_name()
    }

    #[getter]
    fn similarity(&self) -> Vec<Vec<f64>> {
        self.0.sim.to_rows()
    }

    #[getter]
    fn normalized_similarity(&self) -> Vec<Vec<f64>> {
        self.0.sim_normalized.to_rows()
    }

    #[getter]
    fn weights(&self) -> Vec<Vec<f64>> {
        self.0.weights.to_rows()
    }

    #[getter]
    fn attended(&self) -> Vec<Vec<f64>> {
        self.0.attended.to_rows()
    }

    #[getter]
    fn relevance(&self) -> Vec<f64> {
        self.0.relevance.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "AttentionTrace(direction='{}', regions={}, words={}, score={})",
            self.direction(),
            self.0.weights.rows(),
            self.0.weights.cols(),
            self.0.score
        )
    }
}

/// SCAN score of one image (regions × d) against one sentence (words × d).
#[pyfunction]
fn score_pair(regions: Vec<Vec<f64>>, words: Vec<Vec<f64>>, config: &PyScanConfig) -> PyResult<PyTrace> {
    attention::score_pair(&matrix(regions)?, &matrix(words)?, &config.0)
        .map(PyTrace)
        .map_err(py_err)
}

/// Attention-free baseline on raw dot products.
#[pyfunction]
#[pyo3(signature = (regions, words, direction = "t2i"))]
fn sum_max(regions: Vec<Vec<f64>>, words: Vec<Vec<f64>>, direction: &str) -> PyResult<f64> {
    attention::sum_max_score(&matrix(regions)?, &matrix(words)?, parse::<Direction>(direction)?).map_err(py_err)
}

/// Bidirectional ranking loss of a square score matrix whose diagonal holds
/// the positive pairs (rows are images, columns sentences).
#[pyfunction]
#[pyo3(signature = (scores, margin = 0.2, mode = "hard"))]
fn triplet_loss(scores: Vec<Vec<f64>>, margin: f64, mode: &str) -> PyResult<f64> {
    let cfg = LossConfig {
        margin,
        mode: parse::<LossMode>(mode)?,
    };
    cfg.validate().map_err(py_err)?;
    loss(&ScoreMatrix::new(matrix(scores)?).map_err(py_err)?, &cfg).map_err(py_err)
}

/// Recall@K in percent. `truth[j]` is the image index of sentence `j`.
#[pyfunction]
#[pyo3(signature = (scores, truth, k, direction = "sentence"))]
fn recall_at_k(scores: Vec<Vec<f64>>, truth: Vec<usize>, k: usize, direction: &str) -> PyResult<f64> {
    let grid = ScoreGrid::new(matrix(scores)?, truth).map_err(py_err)?;
    Ok(recall(&grid, k, retrieval(direction)?).map_err(py_err)?.percent)
}

fn recall_dict<'py>(py: Python<'py>, r: &RecallReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("r1", r.r1)?;
    d.set_item("r5", r.r5)?;
    d.set_item("r10", r.r10)?;
    d.set_item("queries", r.queries)?;
    d.set_item("k_clamped", r.k_clamped)?;
    Ok(d)
}

/// R@1/5/10 in both directions plus rsum, as a dict.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, scores: Vec<Vec<f64>>, truth: Vec<usize>) -> PyResult<Bound<'py, PyDict>> {
    let grid = ScoreGrid::new(matrix(scores)?, truth).map_err(py_err)?;
    let r = EvalReport::compute(&grid).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("sentence_retrieval", recall_dict(py, &r.sentence_retrieval)?)?;
    d.set_item("image_retrieval", recall_dict(py, &r.image_retrieval)?)?;
    d.set_item("rsum", r.rsum)?;
    Ok(d)
}

/// Synthetic aligned corpus. Returns a dict with `features` (one region
/// matrix per image), `captions` as (image, text) tuples, `vocab`, and
/// `region_concepts`.
#[pyfunction]
#[pyo3(signature = (images = 150, concepts = 30, regions = 6, captions_per_image = 5, noise = 0.1, raw_dim = 64, seed = 7))]
#[allow(clippy::too_many_arguments)]
fn generate_synthetic<'py>(
    py: Python<'py>,
    images: usize,
    concepts: usize,
    regions: usize,
    captions_per_image: usize,
    noise: f64,
    raw_dim: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = SyntheticSpec {
        images,
        concepts,
        regions,
        captions_per_image,
        noise,
        raw_dim,
        seed,
        ..SyntheticSpec::default()
    };
    let data = generate(&spec).map_err(py_err)?;
    let features: Vec<Vec<Vec<f64>>> = data.corpus.features.images.iter().map(|b| b.to_matrix().to_rows()).collect();
    let captions: Vec<(usize, String)> = data
        .corpus
        .captions
        .iter()
        .map(|c| (c.image, c.tokens.join(" ")))
        .collect();
    let d = PyDict::new(py);
    d.set_item("features", features)?;
    d.set_item("captions", captions)?;
    d.set_item("vocab", data.vocab.tokens().to_vec())?;
    d.set_item("region_concepts", data.region_concepts)?;
    Ok(d)
}

/// A trained checkpoint written by `scan train`.
#[pyclass(name = "Model", module = "scan_match", frozen)]
struct PyModel(Checkpoint);

impl PyModel {
    fn embed(&self, regions: Vec<Vec<f64>>, caption: &str) -> PyResult<(Matrix, Matrix)> {
        let ck = &self.0;
        let feats = ImageFeatures::new(matrix(regions)?).map_err(py_err)?;
        let v = project_regions(&feats, &ck.params).map_err(py_err)?;
        let (ids, _) = ck.meta.vocab.encode(caption);
        let words = WordSequence::new(ids).map_err(py_err)?;
        let e = ck.meta.encoder.encode(&words, &ck.params).map_err(py_err)?;
        Ok((v, e))
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Checkpoint::load(&path).map(PyModel).map_err(py_err)
    }

    #[getter]
    fn scorer(&self) -> String {
        self.0.meta.scorer.describe()
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.0.meta.epoch
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.0.meta.dims.raw_dim
    }

    #[getter]
    fn vocab(&self) -> Vec<String> {
        self.0.meta.vocab.tokens().to_vec()
    }

    /// Score raw region features against whitespace-tokenized text.
    fn score(&self, regions: Vec<Vec<f64>>, caption: &str) -> PyResult<f64> {
        let (v, e) = self.embed(regions, caption)?;
        self.0.meta.scorer.score(&v, &e).map_err(py_err)
    }

    /// Attention trace with the checkpoint's scorer (SCAN models only).
    fn attend(&self, regions: Vec<Vec<f64>>, caption: &str) -> PyResult<PyTrace> {
        let Scorer::Scan(cfg) = &self.0.meta.scorer else {
            return Err(PyValueError::new_err("the Sum-Max baseline has no attention"));
        };
        let (v, e) = self.embed(regions, caption)?;
        attention::score_pair(&v, &e, cfg).map(PyTrace).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Model(scorer='{}', epoch={})", self.scorer(), self.epoch())
    }
}

/// Pooling names accepted by `ScanConfig`.
#[pyfunction]
fn poolings() -> Vec<&'static str> {
    [Pooling::Lse, Pooling::Avg, Pooling::Sum, Pooling::Max]
        .iter()
        .map(|p| match p {
            Pooling::Lse => "lse",
            Pooling::Avg => "avg",
            Pooling::Sum => "sum",
            Pooling::Max => "max",
        })
        .collect()
}

#[pymodule]
fn scan_match(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScanConfig>()?;
    m.add_class::<PyTrace>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(score_pair, m)?)?;
    m.add_function(wrap_pyfunction!(sum_max, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_loss, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(poolings, m)?)?;
    Ok(())
}
