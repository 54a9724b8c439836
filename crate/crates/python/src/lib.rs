//! Python bindings for `grouptie`.
//!
//! Matrices cross the boundary as lists of rows, documents as lists of
//! tokens or ids.

use std::path::Path;

use grouptie::config::RunConfig;
use grouptie::corpus::{Dataset, EmbeddingMatrix, RawCorpus, RawDocument, VocabOrder, Vocabulary};
use grouptie::eval;
use grouptie::groups::{self, GroupTable, ResourceKind};
use grouptie::hashshare::HashSpec;
use grouptie::model::{self, Channel2Mode, ModelConfig, Trainer};
use grouptie::Error;
use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::RawIo(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

#[pyclass(name = "Vocabulary", module = "grouptie_py", skip_from_py_object)]
#[derive(Clone)]
struct PyVocabulary {
    inner: Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    /// Builds a vocabulary from tokenized documents.
    #[new]
    #[pyo3(signature = (docs, order = "first_occurrence"))]
    fn new(docs: Vec<Vec<String>>, order: &str) -> PyResult<Self> {
        let order = match order {
            "first_occurrence" => VocabOrder::FirstOccurrence,
            "sorted" => VocabOrder::Sorted,
            other => return Err(PyValueError::new_err(format!("unknown vocabulary order {other:?}"))),
        };
        let inner = Vocabulary::build(&docs, order).map_err(to_py)?;
        Ok(PyVocabulary { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn words(&self) -> Vec<String> {
        self.inner.words().to_vec()
    }

    #[getter]
    fn unk_id(&self) -> usize {
        self.inner.unk_id()
    }

    #[getter]
    fn pad_id(&self) -> usize {
        self.inner.pad_id()
    }

    /// Token ids, unknown tokens mapped to the UNK id.
    fn encode(&self, tokens: Vec<String>) -> Vec<usize> {
        tokens.iter().map(|t| self.inner.lookup(t)).collect()
    }

    fn decode(&self, ids: Vec<usize>) -> Vec<String> {
        self.inner.decode(&ids)
    }
}

#[pyclass(name = "GroupTable", module = "grouptie_py", skip_from_py_object)]
#[derive(Clone)]
struct PyGroupTable {
    inner: GroupTable,
}

#[pymethods]
impl PyGroupTable {
    /// Groups given as lists of word ids over `num_words` words.
    #[new]
    fn new(num_words: usize, members: Vec<Vec<usize>>) -> PyResult<Self> {
        let inner = GroupTable::from_members(num_words, members).map_err(to_py)?;
        Ok(PyGroupTable { inner })
    }

    #[getter]
    fn num_groups(&self) -> usize {
        self.inner.num_groups()
    }

    fn keys(&self) -> Vec<String> {
        self.inner.keys().to_vec()
    }

    fn members(&self, group: usize) -> PyResult<Vec<usize>> {
        if group >= self.inner.num_groups() {
            return Err(PyValueError::new_err(format!("no group {group}")));
        }
        Ok(self.inner.members(group).to_vec())
    }

    fn groups_of(&self, word: usize) -> PyResult<Vec<usize>> {
        if word >= self.inner.num_words() {
            return Err(PyValueError::new_err(format!("no word {word}")));
        }
        Ok(self.inner.groups_of(word).to_vec())
    }

    fn covered_words(&self) -> usize {
        self.inner.covered_words()
    }
}

/// Compiles a lexical resource into groups over `vocab`.
#[pyfunction]
#[pyo3(signature = (kind, path, vocab, prefix_depth = groups::DEFAULT_PREFIX_DEPTH))]
fn build_groups(kind: &str, path: &str, vocab: &PyVocabulary, prefix_depth: usize) -> PyResult<PyGroupTable> {
    let kind: ResourceKind = kind.parse().map_err(to_py)?;
    let inner = groups::build_groups(kind, Path::new(path), &vocab.inner, prefix_depth).map_err(to_py)?;
    Ok(PyGroupTable { inner })
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<EmbeddingMatrix> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("ragged embedding rows"));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let values = Array2::from_shape_vec((n, d), flat).map_err(|e| PyValueError::new_err(e.to_string()))?;
    EmbeddingMatrix::new(values).map_err(to_py)
}

#[pyclass(name = "Model", module = "grouptie_py")]
struct PyModel {
    trainer: Trainer,
    vocab: Vocabulary,
}

#[pymethods]
impl PyModel {
    /// A fresh two-channel classifier over `pretrained` (one row per word).
    #[new]
    #[pyo3(signature = (
        vocab, pretrained, groups = None, num_classes = 2,
        channel2_mode = "group_init_share", filter_heights = vec![3, 4, 5],
        filters_per_height = 100, dropout_rate = 0.5, signing_enabled = true, seed = 0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        vocab: &PyVocabulary,
        pretrained: Vec<Vec<f64>>,
        groups: Option<&PyGroupTable>,
        num_classes: usize,
        channel2_mode: &str,
        filter_heights: Vec<usize>,
        filters_per_height: usize,
        dropout_rate: f64,
        signing_enabled: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let mode: Channel2Mode = channel2_mode.parse().map_err(to_py)?;
        let config = ModelConfig {
            filter_heights,
            filters_per_height,
            num_classes,
            dropout_rate,
            channel2_mode: mode,
            signing_enabled,
            seed,
            ..ModelConfig::default()
        };
        let pretrained = matrix(pretrained)?;
        let trainer = Trainer::new(config, &pretrained, groups.map(|g| &g.inner)).map_err(to_py)?;
        Ok(PyModel {
            trainer,
            vocab: vocab.inner.clone(),
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (trainer, vocab) = model::load_checkpoint(path).map_err(to_py)?;
        Ok(PyModel { trainer, vocab })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        model::save_checkpoint(path, &self.trainer, &self.vocab).map_err(to_py)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.trainer.step
    }

    fn vocabulary(&self) -> PyVocabulary {
        PyVocabulary {
            inner: self.vocab.clone(),
        }
    }

    /// One Adadelta step on `(ids, label)` pairs; returns the batch loss.
    fn train_step(&mut self, batch: Vec<(Vec<usize>, usize)>) -> PyResult<f64> {
        let refs: Vec<(&[usize], usize)> = batch.iter().map(|(d, y)| (d.as_slice(), *y)).collect();
        self.trainer.train_step(&refs).map_err(to_py)
    }

    fn loss(&self, batch: Vec<(Vec<usize>, usize)>) -> PyResult<f64> {
        let refs: Vec<(&[usize], usize)> = batch.iter().map(|(d, y)| (d.as_slice(), *y)).collect();
        self.trainer.evaluate_loss(&refs).map_err(to_py)
    }

    /// Class probabilities per document.
    fn predict_proba(&self, docs: Vec<Vec<usize>>) -> PyResult<Vec<Vec<f64>>> {
        let preds = self.trainer.predict(&docs).map_err(to_py)?;
        Ok(preds.into_iter().map(|p| p.probs).collect())
    }

    fn predict(&self, docs: Vec<Vec<usize>>) -> PyResult<Vec<usize>> {
        let preds = self.trainer.predict(&docs).map_err(to_py)?;
        Ok(preds.into_iter().map(|p| p.label).collect())
    }

    /// Channel-2 embedding rows, or `None` without a second channel.
    fn channel2_rows(&self) -> Option<Vec<Vec<f64>>> {
        self.trainer
            .params
            .channel2
            .as_ref()
            .map(|c| c.matrix().rows().into_iter().map(|r| r.to_vec()).collect())
    }
}

/// Trains on labelled token lists for a number of epochs; returns epoch losses.
#[pyfunction]
#[pyo3(signature = (model, docs, labels, epochs = 1, batch_size = 50))]
fn fit(
    model: &mut PyModel,
    docs: Vec<Vec<String>>,
    labels: Vec<usize>,
    epochs: usize,
    batch_size: usize,
) -> PyResult<Vec<f64>> {
    if docs.len() != labels.len() {
        return Err(PyValueError::new_err("docs and labels differ in length"));
    }
    let raw = RawCorpus {
        name: "python".into(),
        docs: docs
            .into_iter()
            .zip(&labels)
            .map(|(tokens, y)| RawDocument {
                label: y.to_string(),
                tokens,
            })
            .collect(),
    };
    let data: Dataset = Dataset::encode(&raw, &model.vocab).map_err(to_py)?;
    let train: Vec<usize> = (0..data.len()).collect();
    let schedule = eval::Schedule {
        epochs,
        batch_size,
        downsample: false,
    };
    eval::fit(&mut model.trainer, &data, &train, schedule, |_, _| {}).map_err(to_py)
}

#[pyfunction]
fn accuracy(predicted: Vec<usize>, gold: Vec<usize>) -> PyResult<f64> {
    eval::accuracy(&predicted, &gold).map_err(to_py)
}

#[pyfunction]
fn auc(scores: Vec<f64>, positive: Vec<bool>) -> PyResult<f64> {
    eval::auc(&scores, &positive).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (labels, k, seed = 0, stratified = true))]
fn kfold_split(labels: Vec<usize>, k: usize, seed: u64, stratified: bool) -> PyResult<Vec<Vec<usize>>> {
    eval::kfold_split(&labels, k, seed, stratified).map_err(to_py)
}

/// Which of word `i`'s `k` groups coordinate `j` reads from.
#[pyfunction]
#[pyo3(signature = (i, j, k, seed = 0))]
fn hash_dim(i: usize, j: usize, k: usize, seed: u64) -> PyResult<usize> {
    HashSpec::new(seed, true).hash_dim(i, j, k).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (i, j, seed = 0, signing_enabled = true))]
fn sign(i: usize, j: usize, seed: u64, signing_enabled: bool) -> i8 {
    HashSpec::new(seed, signing_enabled).sign(i, j)
}

/// Runs the cross-validation experiment described by a TOML config file and
/// returns the rendered report.
#[pyfunction]
#[pyo3(signature = (config_path, jobs = 1))]
fn evaluate(py: Python<'_>, config_path: &str, jobs: usize) -> PyResult<String> {
    let cfg = RunConfig::read(config_path).map_err(to_py)?;
    py.detach(|| {
        let loaded = cfg.load()?;
        let template = cfg.model_config(loaded.data.dataset.num_classes(), cfg.seed);
        let report = eval::run_experiment(&loaded.data, &template, &cfg.protocol(), &cfg.echo(), jobs)?;
        Ok(report.render())
    })
    .map_err(to_py)
}

#[pymodule]
fn grouptie_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyGroupTable>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(build_groups, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(kfold_split, m)?)?;
    m.add_function(wrap_pyfunction!(hash_dim, m)?)?;
    m.add_function(wrap_pyfunction!(sign, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
