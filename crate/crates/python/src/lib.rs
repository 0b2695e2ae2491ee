//! Python bindings: tokenizer, config, model, pretraining and the benchmark driver.

use std::path::PathBuf;

use flue_core::bpe;
use flue_core::checkpoint::{Checkpoint, CheckpointHeader};
use flue_core::config::PipelineConfig;
use flue_core::corpus::{filter_corpus, prepare_text, ShardInput};
use flue_core::harness::{self, RunOptions};
use flue_core::mlm::{pack_sequences, MaskingConfig};
use flue_core::model::{encode_tokens, Parameters};
use flue_core::nn::ParamSet;
use flue_core::pretrain::{eval_loss, Trainer as CoreTrainer};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(flue_py, FlueError, PyException);

fn err(e: flue_core::Error) -> PyErr {
    FlueError::new_err(e.to_string())
}

fn json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| FlueError::new_err(e.to_string()))
}

/// Resolved pipeline configuration (INI file plus `section.key=value` overrides).
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: PipelineConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (path=None, overrides=Vec::new()))]
    fn new(path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Self> {
        let inner = PipelineConfig::load(path.as_deref(), &overrides).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self { inner: PipelineConfig::parse(text).map_err(err)? })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    /// INI text that reparses to this config.
    fn render(&self) -> String {
        self.inner.render()
    }

    fn to_json(&self) -> PyResult<String> {
        json(&self.inner)
    }

    /// Learning rate at optimizer step `step` under the `[adam]` schedule.
    fn lr_at_step(&self, step: u64) -> PyResult<f64> {
        self.inner.adam.schedule().lr_at_step(step).map_err(err)
    }
}

/// Normalize and tokenize one line the way the corpus cleaner does.
#[pyfunction]
#[pyo3(signature = (text, config=None))]
fn prepare(text: &str, config: Option<&PyConfig>) -> Vec<String> {
    let cfg = config.map(|c| c.inner.cleaning.clone()).unwrap_or_default();
    prepare_text(text, &cfg)
}

/// Clean raw lines; returns (kept sentences as token lists, stats JSON).
#[pyfunction]
#[pyo3(signature = (lines, config=None))]
fn clean_lines(lines: Vec<String>, config: Option<&PyConfig>) -> PyResult<(Vec<Vec<String>>, String)> {
    let cfg = config.map(|c| c.inner.cleaning.clone()).unwrap_or_default();
    let shard = ShardInput::Memory { id: "<python>".into(), bytes: lines.join("\n").into_bytes() };
    let (kept, stats) = filter_corpus(&[shard], &cfg, 1).map_err(err)?;
    Ok((kept.into_iter().map(|s| s.tokens).collect(), stats.to_json()))
}

#[pyclass(name = "Tokenizer", from_py_object)]
#[derive(Clone)]
struct PyTokenizer {
    inner: bpe::Tokenizer,
}

#[pymethods]
impl PyTokenizer {
    /// Learn `merges` BPE merges from tokenized sentences.
    #[staticmethod]
    fn learn(sentences: Vec<Vec<String>>, merges: usize) -> PyResult<Self> {
        let (table, vocab) = bpe::learn_bpe(&sentences, merges).map_err(err)?;
        Ok(Self { inner: bpe::Tokenizer::new(vocab, table).map_err(err)? })
    }

    /// Load `vocab.txt` and `merges.txt` from a directory.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: harness::load_tokenizer(&dir).map_err(err)? })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        let (v, m) = harness::tokenizer_paths(&dir);
        let io = |p: &PathBuf, e: std::io::Error| err(flue_core::Error::io(p, e));
        std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        std::fs::write(&v, self.inner.vocab.to_vocab_file()).map_err(|e| io(&v, e))?;
        std::fs::write(&m, self.inner.table.to_merges_file()).map_err(|e| io(&m, e))
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab.len()
    }

    #[getter]
    fn vocab_hash(&self) -> String {
        self.inner.vocab.hash()
    }

    fn merges(&self) -> Vec<(String, String)> {
        self.inner.table.merges().to_vec()
    }

    /// Sub-word symbols of one word, the last carrying the end-of-word marker.
    fn segment(&self, word: &str) -> Vec<String> {
        self.inner.table.apply(word)
    }

    fn encode(&self, tokens: Vec<String>) -> Vec<u32> {
        self.inner.encode_sequence(&tokens).ids
    }

    fn decode(&self, ids: Vec<u32>) -> Vec<String> {
        self.inner.decode(&ids)
    }

    fn id_of(&self, symbol: &str) -> Option<u32> {
        self.inner.vocab.id(symbol)
    }

    fn symbol_of(&self, id: u32) -> Option<String> {
        self.inner.vocab.symbol(id).map(str::to_string)
    }
}

/// Encoder weights plus the header needed to write a checkpoint.
#[pyclass(name = "Model", from_py_object)]
#[derive(Clone)]
struct PyModel {
    params: Parameters,
    vocab_hash: String,
}

#[pymethods]
impl PyModel {
    /// Fresh model for `tokenizer` with the `[model]` section of `config`.
    #[staticmethod]
    #[pyo3(signature = (tokenizer, config, seed=0))]
    fn init(tokenizer: &PyTokenizer, config: &PyConfig, seed: u64) -> PyResult<Self> {
        let cfg = config.inner.model_for_vocab(tokenizer.inner.vocab.len());
        Ok(Self { params: Parameters::init(&cfg, seed).map_err(err)?, vocab_hash: tokenizer.inner.vocab.hash() })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let c = Checkpoint::load(&path).map_err(err)?;
        Ok(Self { params: c.params, vocab_hash: c.header.vocab_hash })
    }

    /// Write a weights-only checkpoint.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ckpt = Checkpoint {
            header: CheckpointHeader {
                config: self.params.cfg.clone(),
                vocab_hash: self.vocab_hash.clone(),
                step: 0,
                has_optimizer: false,
                cursor: None,
                seed: None,
                tool_version: flue_core::TOOL_VERSION.to_string(),
            },
            params: self.params.clone(),
            optimizer: None,
        };
        ckpt.save(&path).map_err(err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    #[getter]
    fn hidden(&self) -> usize {
        self.params.cfg.hidden
    }

    fn config_json(&self) -> PyResult<String> {
        json(&self.params.cfg)
    }

    fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.params.tensors().into_iter().map(|(n, t)| (n, t.shape.clone())).collect()
    }

    /// Final-layer states, one row of `hidden` floats per id.
    fn encode(&self, ids: Vec<u32>) -> PyResult<Vec<Vec<f64>>> {
        let h = self.params.cfg.hidden;
        let flat = encode_tokens(&self.params, &ids).map_err(err)?;
        Ok(flat.chunks(h).map(<[f64]>::to_vec).collect())
    }

    /// Mean masked-LM loss over id sequences (framed with `<s>`/`</s>`), masks fixed by `seed`.
    #[pyo3(signature = (sequences, seed=0, batch_size=32))]
    fn mlm_loss(&self, sequences: Vec<Vec<u32>>, seed: u64, batch_size: usize) -> PyResult<f64> {
        let seqs = pack_sequences(&sequences, self.params.cfg.max_positions).map_err(err)?;
        eval_loss(&self.params, &seqs, &MaskingConfig { seed, ..MaskingConfig::default() }, batch_size).map_err(err)
    }
}

/// Masked-LM trainer driven one optimizer step at a time.
#[pyclass(name = "Trainer")]
struct PyTrainer {
    inner: CoreTrainer,
}

#[pymethods]
impl PyTrainer {
    /// `sequences` are unframed id lists, e.g. from `Tokenizer.encode`.
    #[new]
    fn new(model: &PyModel, sequences: Vec<Vec<u32>>, config: &PyConfig) -> PyResult<Self> {
        let c = &config.inner;
        let max_len = c.masking.max_len.min(model.params.cfg.max_positions);
        let seqs = pack_sequences(&sequences, max_len).map_err(err)?;
        let masking = MaskingConfig { seed: c.seed, ..c.masking.clone() };
        let inner = CoreTrainer::new(
            model.params.clone(),
            seqs,
            c.adam.clone(),
            masking,
            c.train.clone(),
            c.seed,
            model.vocab_hash.clone(),
        )
        .map_err(err)?;
        Ok(Self { inner })
    }

    /// One optimizer step; returns (step, lr, loss).
    fn step(&mut self) -> PyResult<(u64, f64, f64)> {
        let r = self.inner.step().map_err(err)?;
        Ok((r.step, r.lr, r.loss))
    }

    #[getter]
    fn effective_batch(&self) -> usize {
        self.inner.effective_batch()
    }

    #[getter]
    fn current_step(&self) -> u64 {
        self.inner.state.step
    }

    /// Checkpoint with optimizer state and data cursor.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.checkpoint().save(&path).map_err(err)
    }

    fn model(&self) -> PyModel {
        PyModel { params: self.inner.params.clone(), vocab_hash: self.inner.vocab_hash.clone() }
    }
}

/// Run benchmark tasks; returns (JSONL reports, failures as JSON).
#[pyfunction]
#[pyo3(signature = (ckpt, tasks, data, seeds, config, tokenizer=None, strict=false))]
fn run_benchmark(
    ckpt: PathBuf,
    tasks: Vec<String>,
    data: PathBuf,
    seeds: Vec<u64>,
    config: &PyConfig,
    tokenizer: Option<&PyTokenizer>,
    strict: bool,
) -> PyResult<(String, String)> {
    let tok = match tokenizer {
        Some(t) => t.inner.clone(),
        None => harness::load_tokenizer(ckpt.parent().unwrap_or(std::path::Path::new("."))).map_err(err)?,
    };
    let opts = RunOptions { strict, parallel: false };
    let out = harness::run_benchmark(&ckpt, &tok, &tasks, &data, &seeds, &config.inner, opts).map_err(err)?;
    Ok((out.to_jsonl().map_err(err)?, json(&out.failures)?))
}

/// Write a synthetic raw corpus (`raw.txt`) and benchmark task files (`tasks/`).
#[pyfunction]
#[pyo3(signature = (out, bytes=1_000_000, seed=1, task_size=200))]
fn write_synthetic(out: PathBuf, bytes: usize, seed: u64, task_size: usize) -> PyResult<()> {
    std::fs::create_dir_all(&out).map_err(|e| err(flue_core::Error::io(&out, e)))?;
    let raw = out.join("raw.txt");
    std::fs::write(&raw, flue_core::synth::raw_corpus(seed, bytes)).map_err(|e| err(flue_core::Error::io(&raw, e)))?;
    flue_core::synth::write_benchmark_data(&out.join("tasks"), seed, task_size).map_err(err)
}

#[pymodule]
fn flue_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FlueError", m.py().get_type::<FlueError>())?;
    m.add("__version__", flue_core::TOOL_VERSION)?;
    m.add("TASK_NAMES", harness::TASK_NAMES.to_vec())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyTokenizer>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(prepare, m)?)?;
    m.add_function(wrap_pyfunction!(clean_lines, m)?)?;
    m.add_function(wrap_pyfunction!(run_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic, m)?)?;
    Ok(())
}
