//! Python bindings: vocabulary, checkpoints, decoding, training, evaluation
//! and metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rsvqa::corpus::{generate_split, read_dataset, write_dataset, DataConfig, ImageTensor};
use rsvqa::decoding::{beam_search, greedy_decode, score_choices, LengthNorm, Query};
use rsvqa::eval::{evaluate, DecodeConfig};
use rsvqa::model::{build_vocabulary, ModelConfig, PromptMode, VlmModel};
use rsvqa::training::{self, load_checkpoint, save_checkpoint, Checkpoint, Stage, TrainConfig};
use rsvqa::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Format { .. } => PyIOError::new_err(e.to_string()),
        Error::Numerical { .. } | Error::Diverged { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn prompt_mode(name: &str) -> PyResult<PromptMode> {
    match name {
        "pretrain" => Ok(PromptMode::Pretrain),
        "finetune" => Ok(PromptMode::Finetune),
        other => Err(PyValueError::new_err(format!("prompt mode must be pretrain or finetune, got {other:?}"))),
    }
}

#[pyclass(name = "Vocabulary", module = "rsvqa_py", skip_from_py_object)]
#[derive(Clone)]
struct PyVocabulary {
    inner: rsvqa::tokenizer::Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    #[staticmethod]
    #[pyo3(signature = (texts, min_count = 1))]
    fn build(texts: Vec<String>, min_count: usize) -> PyResult<Self> {
        Ok(Self {
            inner: rsvqa::tokenizer::Vocabulary::build(&texts, min_count).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: rsvqa::tokenizer::Vocabulary::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        self.inner.encode(text)
    }

    fn decode(&self, ids: Vec<u32>) -> PyResult<String> {
        self.inner.decode(&ids).map_err(py_err)
    }

    fn sha256(&self) -> String {
        self.inner.hash()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// A model with its vocabulary, as stored in a checkpoint directory.
#[pyclass(name = "Model", module = "rsvqa_py")]
struct PyModel {
    ckpt: Checkpoint,
}

#[pymethods]
impl PyModel {
    /// Fresh model with the default architecture for `vocab` and 32×32×4 images.
    #[staticmethod]
    #[pyo3(signature = (vocab, seed = 0))]
    fn init(vocab: &PyVocabulary, seed: u64) -> PyResult<Self> {
        let model = VlmModel::init(ModelConfig::new(vocab.inner.len()), seed).map_err(py_err)?;
        Ok(Self {
            ckpt: Checkpoint {
                model,
                vocab: vocab.inner.clone(),
                stage: None,
                step: 0,
                seed,
                rng: None,
            },
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            ckpt: load_checkpoint(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.ckpt, &path).map_err(py_err)
    }

    #[getter]
    fn vocab(&self) -> PyVocabulary {
        PyVocabulary {
            inner: self.ckpt.vocab.clone(),
        }
    }

    #[getter]
    fn stage(&self) -> Option<&'static str> {
        self.ckpt.stage.map(Stage::as_str)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.ckpt.model.num_scalars()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.ckpt.model.names().to_vec()
    }

    /// Flat copy of one parameter tensor and its shape.
    fn parameter(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let p = self
            .ckpt
            .model
            .param(name)
            .ok_or_else(|| PyValueError::new_err(format!("no parameter {name:?}")))?;
        Ok((p.shape().to_vec(), p.data().to_vec()))
    }

    /// Σ log p(answer, EOS | image, question).
    #[pyo3(signature = (image_path, question, answer, prompt = "finetune"))]
    fn sequence_log_prob(&self, image_path: PathBuf, question: &str, answer: &str, prompt: &str) -> PyResult<f64> {
        let image = ImageTensor::load(&image_path).map_err(py_err)?;
        let ids = self.ckpt.vocab.encode(answer);
        self.ckpt
            .model
            .sequence_log_prob(&self.ckpt.vocab, &image, question, &ids, prompt_mode(prompt)?)
            .map_err(py_err)
    }

    /// Beam-search answer and its score; `beam=1` is greedy decoding.
    #[pyo3(signature = (image_path, question, beam = 3, max_answer_len = 8, prompt = "finetune"))]
    fn answer(
        &self,
        image_path: PathBuf,
        question: &str,
        beam: usize,
        max_answer_len: usize,
        prompt: &str,
    ) -> PyResult<(String, f64)> {
        let image = ImageTensor::load(&image_path).map_err(py_err)?;
        let q = Query::new(&self.ckpt.model, &self.ckpt.vocab, &image, question, prompt_mode(prompt)?).map_err(py_err)?;
        let (tokens, score) = if beam == 1 {
            let h = greedy_decode(&q, max_answer_len).map_err(py_err)?;
            (h.answer().to_vec(), h.log_prob)
        } else {
            let r = beam_search(&q, beam, max_answer_len, LengthNorm::None).map_err(py_err)?;
            (r.hypothesis.answer().to_vec(), r.score)
        };
        Ok((self.ckpt.vocab.decode(&tokens).map_err(py_err)?, score))
    }

    /// Index of the best choice and the per-choice length-normalized scores.
    #[pyo3(signature = (image_path, question, choices, prompt = "finetune"))]
    fn score_choices(
        &self,
        image_path: PathBuf,
        question: &str,
        choices: Vec<String>,
        prompt: &str,
    ) -> PyResult<(usize, Vec<f64>)> {
        let image = ImageTensor::load(&image_path).map_err(py_err)?;
        let q = Query::new(&self.ckpt.model, &self.ckpt.vocab, &image, question, prompt_mode(prompt)?).map_err(py_err)?;
        let s = score_choices(&q, &self.ckpt.vocab, &choices, LengthNorm::ByLength).map_err(py_err)?;
        Ok((s.index, s.scores))
    }

    /// Trains in place for `steps` updates; returns the per-step losses.
    #[pyo3(signature = (data_dir, stage = "pretrain", steps = 500, lr = 3e-3, batch_size = 16, seed = 0, lambda1 = 1.0, lambda2 = 1.0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        data_dir: PathBuf,
        stage: &str,
        steps: usize,
        lr: f64,
        batch_size: usize,
        seed: u64,
        lambda1: f64,
        lambda2: f64,
    ) -> PyResult<Vec<f64>> {
        let stage = Stage::from_name(stage)
            .ok_or_else(|| PyValueError::new_err(format!("unknown stage {stage:?}")))?;
        let data = read_dataset(&data_dir).and_then(|d| d.examples()).map_err(py_err)?;
        let config = TrainConfig {
            stage,
            steps,
            lr,
            batch_size,
            seed,
            lambda1,
            lambda2,
            ..TrainConfig::default()
        };
        let out = training::train(self.ckpt.model.clone(), &self.ckpt.vocab, &data, &config, |_| {}).map_err(py_err)?;
        self.ckpt = out.checkpoint;
        Ok(out.log.iter().map(|r| r.loss).collect())
    }

    /// Metrics on a split directory as a dict (the report's JSON form).
    #[pyo3(signature = (data_dir, beam = 3, prompt = "finetune"))]
    fn evaluate<'py>(&self, py: Python<'py>, data_dir: PathBuf, beam: usize, prompt: &str) -> PyResult<Bound<'py, PyAny>> {
        let data = read_dataset(&data_dir).and_then(|d| d.examples()).map_err(py_err)?;
        let config = DecodeConfig {
            beam_width: beam,
            prompt_mode: prompt_mode(prompt)?,
            ..DecodeConfig::default()
        };
        let report = evaluate(&self.ckpt.model, &self.ckpt.vocab, &data, &config).map_err(py_err)?;
        let json = py.import("json")?;
        json.call_method1("loads", (report.to_json(),))
    }
}

/// Writes a generated split (samples.jsonl, images/, vocab.txt) to `out_dir`.
#[pyfunction]
#[pyo3(signature = (out_dir, n_samples, seed = 0, name = "train"))]
fn generate_dataset(out_dir: PathBuf, n_samples: usize, seed: u64, name: &str) -> PyResult<PyVocabulary> {
    let split = generate_split(name, n_samples, seed, &DataConfig::default()).map_err(py_err)?;
    write_dataset(&split.samples, &split.images, &out_dir).map_err(py_err)?;
    let vocab = build_vocabulary(&split.samples).map_err(py_err)?;
    vocab.save(&out_dir.join("vocab.txt")).map_err(py_err)?;
    Ok(PyVocabulary { inner: vocab })
}

#[pyfunction]
fn yesno_accuracy(pred: Vec<String>, gold: Vec<String>) -> PyResult<f64> {
    rsvqa::eval::yesno_accuracy(&pred, &gold).map_err(py_err)
}

#[pyfunction]
fn mc_accuracy(pred: Vec<usize>, gold: Vec<usize>) -> PyResult<f64> {
    rsvqa::eval::mc_accuracy(&pred, &gold).map_err(py_err)
}

#[pyfunction]
fn open_f1(pred: Vec<String>, gold: Vec<String>) -> PyResult<f64> {
    rsvqa::eval::open_f1(&pred, &gold).map_err(py_err)
}

/// Per-method, per-criterion means from a human-score CSV.
#[pyfunction]
fn aggregate_human_eval<'py>(py: Python<'py>, csv_path: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let records = rsvqa::eval::read_human_eval_csv(&csv_path).map_err(py_err)?;
    let table = rsvqa::eval::aggregate_human_eval(&records).map_err(py_err)?;
    let out = PyDict::new(py);
    for (method, cells) in table.rows {
        let row = PyDict::new(py);
        for (c, v) in rsvqa::eval::Criterion::ALL.iter().zip(cells) {
            let key = serde_json::to_value(c).expect("serializes");
            row.set_item(key.as_str().unwrap_or_default(), v)?;
        }
        out.set_item(method, row)?;
    }
    Ok(out)
}

#[pymodule]
fn rsvqa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(yesno_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(mc_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(open_f1, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_human_eval, m)?)?;
    Ok(())
}
