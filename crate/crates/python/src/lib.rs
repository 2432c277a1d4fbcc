use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use sgn::harness::{Experiment as CoreExperiment, ExperimentConfig, RunOptions};
use sgn::metrics::{self, BleuMean, EvalReport};
use sgn::treekit::{self, AdjacencyVector};
use sgn::SgnError;

fn py_err(e: SgnError) -> PyErr {
    match e {
        SgnError::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn bleu_mean(name: &str) -> PyResult<BleuMean> {
    match name {
        "geometric" => Ok(BleuMean::Geometric),
        "arithmetic" => Ok(BleuMean::Arithmetic),
        other => Err(PyValueError::new_err(format!("unknown BLEU mean {other:?}"))),
    }
}

/// Rooted tree whose leaves are sentence indices.
#[pyclass(module = "sgnpy", frozen, eq, hash)]
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct SentenceTree {
    inner: treekit::SentenceTree,
}

#[pymethods]
impl SentenceTree {
    /// `parents[k]` is the parent of node `k + 1`.
    #[new]
    fn new(parents: Vec<usize>) -> PyResult<Self> {
        Ok(Self { inner: treekit::SentenceTree::from_parents(parents).map_err(py_err)? })
    }

    /// Decodes a lower-triangle adjacency bit string such as `"101"`.
    #[staticmethod]
    fn from_bits(bits: &str) -> PyResult<Self> {
        let v = AdjacencyVector::parse_bit_string(bits).map_err(py_err)?;
        Ok(Self { inner: treekit::decode_vector(&v) })
    }

    fn bits(&self) -> String {
        treekit::encode_tree(&self.inner).to_bit_string()
    }

    #[getter]
    fn parents(&self) -> Vec<usize> {
        self.inner.parents().to_vec()
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.inner.node_count()
    }

    #[getter]
    fn leaf_count(&self) -> usize {
        self.inner.leaf_count()
    }

    fn children(&self, node: usize) -> PyResult<Vec<usize>> {
        if node >= self.inner.node_count() {
            return Err(PyValueError::new_err(format!("no node {node}")));
        }
        Ok(self.inner.children(node))
    }

    /// Sentence spans of the internal nodes, sorted.
    fn spans(&self) -> Vec<Vec<usize>> {
        self.inner.constituent_spans().into_iter().collect()
    }

    fn canonical(&self) -> Self {
        Self { inner: self.inner.canonicalize() }
    }

    fn __str__(&self) -> String {
        self.inner.to_string()
    }

    fn __repr__(&self) -> String {
        format!("SentenceTree({})", self.inner)
    }
}

/// Unlabeled span F1 between two trees over the same sentences.
#[pyfunction]
fn unlabeled_f1(predicted: &SentenceTree, reference: &SentenceTree) -> PyResult<f64> {
    treekit::unlabeled_f1(&predicted.inner, &reference.inner).map_err(py_err)
}

/// Top-down tree from boundary distances between consecutive sentences.
#[pyfunction]
fn greedy_split(distances: Vec<f64>) -> SentenceTree {
    SentenceTree { inner: sgn::recipe2tree::greedy_split(&distances) }
}

/// Lowercased words with punctuation split off.
#[pyfunction]
fn split_words(text: &str) -> Vec<String> {
    sgn::corpus::split_words(text, sgn::corpus::TokenizerConfig::default())
}

#[pyfunction]
#[pyo3(signature = (candidates, references, mean = "geometric"))]
fn bleu(candidates: Vec<Vec<String>>, references: Vec<Vec<String>>, mean: &str) -> PyResult<f64> {
    metrics::bleu(&candidates, &references, bleu_mean(mean)?).map_err(py_err)
}

#[pyfunction]
fn rouge_l(candidates: Vec<Vec<String>>, references: Vec<Vec<String>>) -> PyResult<f64> {
    metrics::rouge_l(&candidates, &references).map_err(py_err)
}

#[pyfunction]
fn perplexity(log_probs: Vec<f64>) -> PyResult<f64> {
    metrics::perplexity(&log_probs).map_err(py_err)
}

#[pyfunction]
fn avg_length(recipes: Vec<Vec<String>>) -> PyResult<f64> {
    metrics::avg_length(&recipes).map_err(py_err)
}

/// Evaluation scores of one run; BLEU and ROUGE-L are fractions.
#[pyclass(module = "sgnpy", frozen)]
#[derive(Clone)]
pub struct Report {
    inner: EvalReport,
}

#[pymethods]
impl Report {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: EvalReport::from_json(text).map_err(py_err)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn split(&self) -> String {
        self.inner.split.clone()
    }

    #[getter]
    fn samples(&self) -> usize {
        self.inner.samples
    }

    #[getter]
    fn perplexity(&self) -> f64 {
        self.inner.perplexity
    }

    #[getter]
    fn bleu(&self) -> f64 {
        self.inner.bleu
    }

    #[getter]
    fn rouge_l(&self) -> f64 {
        self.inner.rouge_l
    }

    #[getter]
    fn avg_length(&self) -> f64 {
        self.inner.avg_length
    }

    #[getter]
    fn reference_length(&self) -> f64 {
        self.inner.reference_length
    }

    /// Deltas `other - self` as a dict, plus `closer_by` (positive when
    /// `other` is closer to the reference length).
    fn compare(&self, other: &Report) -> PyResult<Vec<(&'static str, f64)>> {
        let d = metrics::compare_reports(&self.inner, &other.inner).map_err(py_err)?;
        Ok(vec![
            ("perplexity", d.perplexity),
            ("bleu", d.bleu),
            ("rouge_l", d.rouge_l),
            ("avg_length", d.avg_length),
            ("closer_by", d.closer_by),
        ])
    }

    fn __repr__(&self) -> String {
        format!(
            "Report(split={:?}, samples={}, perplexity={:.3}, bleu={:.4}, rouge_l={:.4}, avg_length={:.1})",
            self.inner.split, self.inner.samples, self.inner.perplexity, self.inner.bleu, self.inner.rouge_l, self.inner.avg_length
        )
    }
}

/// A configured run with artifacts under `root/<fingerprint>/`.
#[pyclass(module = "sgnpy")]
pub struct Experiment {
    inner: CoreExperiment,
}

#[pymethods]
impl Experiment {
    /// `config` is flat TOML; unset keys take the desk preset.
    #[new]
    #[pyo3(signature = (config = "", root = "artifacts", baseline = false))]
    fn new(config: &str, root: &str, baseline: bool) -> PyResult<Self> {
        let mut cfg = ExperimentConfig::from_toml(config).map_err(py_err)?;
        if baseline {
            cfg = cfg.baseline();
        }
        Ok(Self { inner: CoreExperiment::new(cfg, &PathBuf::from(root)).map_err(py_err)? })
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.fingerprint.clone()
    }

    #[getter]
    fn directory(&self) -> String {
        self.inner.dir.display().to_string()
    }

    fn config_toml(&self) -> String {
        self.inner.config.to_toml()
    }

    /// Runs (or resumes) every stage. Returns `None` when stopped early.
    #[pyo3(signature = (stop_after_joint_epochs = None, verbose = false))]
    fn run(&self, py: Python<'_>, stop_after_joint_epochs: Option<usize>, verbose: bool) -> PyResult<Option<Report>> {
        let opts = RunOptions { stop_after_joint_epochs, verbose };
        let out = py.allow_threads(|| self.inner.run(&opts)).map_err(py_err)?;
        Ok(out.report.map(|inner| Report { inner }))
    }

    /// `(stage, epoch, loss)` rows of the saved loss curve.
    fn curve(&self) -> PyResult<Vec<(String, usize, f64)>> {
        Ok(self.inner.read_curves().map_err(py_err)?.into_iter().map(|r| (r.stage, r.epoch, r.loss)).collect())
    }
}

#[pymodule]
pub fn sgnpy(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<SentenceTree>()?;
    m.add_class::<Report>()?;
    m.add_class::<Experiment>()?;
    m.add_function(wrap_pyfunction!(unlabeled_f1, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_split, m)?)?;
    m.add_function(wrap_pyfunction!(split_words, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(perplexity, m)?)?;
    m.add_function(wrap_pyfunction!(avg_length, m)?)?;
    Ok(())
}
