//! Python bindings: train or load a Siamese encoder, score text pairs, and
//! decompose predictions into token-token attribution matrices.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use std::str::FromStr;

use xjac::attribution::{self, AttributionOptions, Scheme};
use xjac::checkpoint;
use xjac::model::ScoreMode;
use xjac::train::{self, Objective, TrainConfig};
use xjac::{tokenize, Architecture, EncoderConfig, SiameseModel, Vocabulary};

fn to_py_err(e: xjac::Error) -> PyErr {
    match &e {
        xjac::Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// One attribution result.
#[pyclass]
struct Attribution {
    #[pyo3(get)]
    tokens_a: Vec<String>,
    #[pyo3(get)]
    tokens_b: Vec<String>,
    #[pyo3(get)]
    layer: usize,
    #[pyo3(get)]
    steps: usize,
    #[pyo3(get)]
    scheme: String,
    #[pyo3(get)]
    score: f64,
    #[pyo3(get)]
    attribution_sum: f64,
    #[pyo3(get)]
    error: f64,
    /// Token-token matrix, row-major, S_a x S_b.
    #[pyo3(get)]
    matrix: Vec<Vec<f64>>,
}

#[pymethods]
impl Attribution {
    fn __repr__(&self) -> String {
        format!(
            "Attribution(layer={}, steps={}, score={:.6}, error={:.3e})",
            self.layer, self.steps, self.score, self.error
        )
    }
}

/// A Siamese text encoder with attribution support.
#[pyclass]
struct Model {
    inner: SiameseModel,
}

#[pymethods]
impl Model {
    /// Train a fresh encoder on a pair TSV (text_a, text_b, score in [0,1]).
    #[staticmethod]
    #[pyo3(signature = (data, objective="dot", seed=42, epochs=5, batch_size=16,
                        learning_rate=1e-3, arch="transformer", dim=16, layers=2, heads=2))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        data: &str,
        objective: &str,
        seed: u64,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        arch: &str,
        dim: usize,
        layers: usize,
        heads: usize,
    ) -> PyResult<Model> {
        let pairs = train::load_dataset(data).map_err(to_py_err)?;
        let objective = Objective::from_str(objective).map_err(to_py_err)?;
        let texts: Vec<&str> = pairs
            .iter()
            .flat_map(|p| [p.text_a.as_str(), p.text_b.as_str()])
            .collect();
        let vocab = Vocabulary::build(&texts, 1).map_err(to_py_err)?;
        let config = EncoderConfig {
            arch: Architecture::from_str(arch).map_err(to_py_err)?,
            dim,
            layers,
            heads,
            out_dim: dim,
            adjusted: objective == Objective::Dot,
            ..EncoderConfig::default()
        };
        let mut model = SiameseModel::new(config, vocab, seed).map_err(to_py_err)?;
        let cfg = TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            objective,
            seed,
            ..TrainConfig::default()
        };
        train::train(&mut model, &pairs, &cfg).map_err(to_py_err)?;
        Ok(Model { inner: model })
    }

    /// Load a checkpoint written by `save` or the `xjac train` command.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Model> {
        Ok(Model {
            inner: checkpoint::load_checkpoint(path).map_err(to_py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save_checkpoint(&self.inner, path).map_err(to_py_err)
    }

    /// Similarity score of two texts.
    #[pyo3(signature = (text_a, text_b, mode="dot", shifted=true))]
    fn score(&self, text_a: &str, text_b: &str, mode: &str, shifted: bool) -> PyResult<f64> {
        let a = tokenize(text_a, &self.inner.vocab).map_err(to_py_err)?;
        let b = tokenize(text_b, &self.inner.vocab).map_err(to_py_err)?;
        let mode = ScoreMode::from_str(mode).map_err(to_py_err)?;
        self.inner.score(&a, &b, mode, shifted).map_err(to_py_err)
    }

    /// Decompose the pair prediction into a token-token attribution matrix.
    /// `layer` defaults to the deepest layer; the reported `error` is
    /// |score - attribution_sum|.
    #[pyo3(signature = (text_a, text_b, layer=None, steps=100, scheme="midpoint", batch=16))]
    fn attribute(
        &self,
        text_a: &str,
        text_b: &str,
        layer: Option<usize>,
        steps: usize,
        scheme: &str,
        batch: usize,
    ) -> PyResult<Attribution> {
        let a = tokenize(text_a, &self.inner.vocab).map_err(to_py_err)?;
        let b = tokenize(text_b, &self.inner.vocab).map_err(to_py_err)?;
        let layer = layer.unwrap_or(self.inner.config.layers);
        let opts = AttributionOptions {
            steps,
            scheme: Scheme::from_str(scheme).map_err(to_py_err)?,
            batch,
            full_matrix: false,
        };
        let out = attribution::attribute(&self.inner, &a, &b, layer, &opts).map_err(to_py_err)?;
        Ok(Attribution {
            tokens_a: out.tokens_a,
            tokens_b: out.tokens_b,
            layer: out.layer,
            steps: out.steps,
            scheme: out.scheme.to_string(),
            score: out.score,
            attribution_sum: out.attribution_sum,
            error: out.error,
            matrix: (0..out.matrix.rows())
                .map(|i| out.matrix.row(i).to_vec())
                .collect(),
        })
    }

    /// Spearman correlation of model scores against the labels of a pair TSV.
    #[pyo3(signature = (data, mode="dot"))]
    fn evaluate(&self, data: &str, mode: &str) -> PyResult<f64> {
        let pairs = train::load_dataset(data).map_err(to_py_err)?;
        let mode = ScoreMode::from_str(mode).map_err(to_py_err)?;
        train::evaluate(&self.inner, &pairs, mode, self.inner.config.adjusted).map_err(to_py_err)
    }

    #[getter]
    fn layers(&self) -> usize {
        self.inner.config.layers
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.config.dim
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab.len()
    }

    #[getter]
    fn adjusted(&self) -> bool {
        self.inner.config.adjusted
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(arch={:?}, dim={}, layers={}, vocab={})",
            self.inner.config.arch,
            self.inner.config.dim,
            self.inner.config.layers,
            self.inner.vocab.len()
        )
    }
}

/// Spearman rank correlation with average ranks for ties.
#[pyfunction]
fn spearman(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    train::spearman(&a, &b).map_err(to_py_err)
}

/// Write a synthetic graded-similarity corpus as TSV.
#[pyfunction]
#[pyo3(signature = (path, n_pairs, grades=5, seed=42))]
fn write_synthetic_corpus(path: &str, n_pairs: usize, grades: usize, seed: u64) -> PyResult<()> {
    let mut text = String::new();
    for pair in train::synthetic_corpus(n_pairs, grades, seed) {
        text.push_str(&format!(
            "{}\t{}\t{}\n",
            pair.text_a, pair.text_b, pair.label
        ));
    }
    std::fs::write(path, text).map_err(|e| PyIOError::new_err(e.to_string()))
}

#[pymodule]
fn xjac_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    xjac::configure_threads_from_env();
    m.add_class::<Model>()?;
    m.add_class::<Attribution>()?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic_corpus, m)?)?;
    Ok(())
}
