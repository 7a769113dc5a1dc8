//! Python bindings. Documents, pairs and tasks cross the boundary as JSON
//! strings or JSONL files; vectors as lists of floats.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use vlmforge::corpus::{self, InterleavedDocument, PairPolicy, PairSample};
use vlmforge::diagnostics::{self, ChamferVariant};
use vlmforge::eval::{self, EvalTask};
use vlmforge::fixture;
use vlmforge::images::SyntheticImages;
use vlmforge::model::{self as vm, ModelConfig};
use vlmforge::packing::{self, Tokenizer};
use vlmforge::trainer::{self, Corpora, Preset, PresetBudget};

fn err(e: vlmforge::Error) -> PyErr {
    match e {
        vlmforge::Error::NonFinite { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyfunction]
fn tokens_per_image(resolution: usize, patch: usize, downsample: usize) -> PyResult<usize> {
    packing::tokens_per_image(resolution, patch, downsample).map_err(err)
}

/// `(image_id, caption, clip_score)` for every pair of one JSON document.
#[pyfunction]
#[pyo3(signature = (doc_json, policy = "best-sim"))]
fn to_pairs(doc_json: &str, policy: &str) -> PyResult<Vec<(String, String, f64)>> {
    let doc: InterleavedDocument = serde_json::from_str(doc_json).map_err(json_err)?;
    doc.validate().map_err(err)?;
    let policy: PairPolicy = policy.parse().map_err(err)?;
    Ok(corpus::to_pairs(&doc, policy)
        .map_err(err)?
        .into_iter()
        .map(|p| (p.image_id, p.caption, p.clip_score))
        .collect())
}

#[pyfunction]
fn subsample_topk(pairs: Vec<(String, String, f64)>, k: usize) -> Vec<(String, String, f64)> {
    corpus::subsample_topk(pairs.into_iter().map(|(i, c, s)| PairSample::new(i, c, s)), k)
        .kept
        .into_iter()
        .map(|p| (p.image_id, p.caption, p.clip_score))
        .collect()
}

#[pyfunction]
#[pyo3(signature = (a, b, variant = "symmetric"))]
fn chamfer_cosine(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, variant: &str) -> PyResult<f64> {
    let variant: ChamferVariant = variant.parse().map_err(err)?;
    let ra: Vec<&[f64]> = a.iter().map(|r| r.as_slice()).collect();
    let rb: Vec<&[f64]> = b.iter().map(|r| r.as_slice()).collect();
    diagnostics::chamfer_cosine_with(&ra, &rb, variant).map_err(err)
}

/// Writes `interleaved.jsonl` and `pairs.jsonl` shaped like a web corpus
/// (`mmc4`), a caption corpus (`coyo`) or the topic corpus (`topic`).
#[pyfunction]
fn write_fixture(out_dir: PathBuf, kind: &str, n_docs: usize, seed: u64) -> PyResult<()> {
    let (docs, pairs) = match kind {
        "mmc4" | "coyo" => {
            let spec = if kind == "mmc4" {
                fixture::FixtureSpec::mmc4_like(n_docs, seed)
            } else {
                fixture::FixtureSpec::coyo_like(n_docs, seed)
            };
            let fx = fixture::fixture_gen(&spec).map_err(err)?;
            (fx.interleaved, fx.pairs)
        }
        "topic" => {
            let docs = fixture::topic_corpus(n_docs, 3, seed);
            let mut pairs = Vec::new();
            for d in &docs {
                pairs.extend(corpus::to_pairs(d, PairPolicy::BestSim).map_err(err)?);
            }
            (docs, pairs)
        }
        other => return Err(PyValueError::new_err(format!("unknown fixture kind {other:?}"))),
    };
    std::fs::create_dir_all(&out_dir).map_err(|e| PyValueError::new_err(e.to_string()))?;
    corpus::write_jsonl(&out_dir.join("interleaved.jsonl"), &docs).map_err(err)?;
    corpus::write_jsonl(&out_dir.join("pairs.jsonl"), &pairs).map_err(err)?;
    Ok(())
}

/// `{num_docs, num_images, total_text_tokens, images_per_sample, tokens_per_image}`.
#[pyfunction]
fn corpus_stats(path: PathBuf) -> PyResult<String> {
    let docs = corpus::parse_interleaved(&path, true).map_err(err)?.records;
    serde_json::to_string(&corpus::compute_stats(&docs, &Tokenizer::new())).map_err(json_err)
}

/// A toy vision-language model.
#[pyclass(name = "Model")]
struct PyModel {
    inner: vm::Model,
}

#[pymethods]
impl PyModel {
    /// Build from a JSON config, or the desk-scale default.
    #[new]
    #[pyo3(signature = (config_json = None, seed = 0))]
    fn new(config_json: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg = match config_json {
            Some(j) => serde_json::from_str(j).map_err(json_err)?,
            None => ModelConfig::desk(),
        };
        Ok(Self { inner: vm::Model::new(cfg.with_seed(seed)).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: vm::load_checkpoint(&path, None).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        vm::save_checkpoint(&self.inner, &path).map_err(err)
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.config()).map_err(json_err)
    }

    fn num_params(&self) -> usize {
        self.inner.params().num_scalars()
    }

    /// Parameter count per group name.
    fn group_sizes(&self) -> Vec<(String, usize)> {
        vm::ParamGroup::ALL
            .iter()
            .map(|&g| (g.as_str().to_string(), self.inner.params().group_scalars(g)))
            .collect()
    }

    fn checksum(&self, group: &str) -> PyResult<String> {
        let g: vm::ParamGroup = group.parse().map_err(err)?;
        Ok(self.inner.params().checksum(g))
    }

    /// Mean next-token loss over a packed JSON document.
    fn document_loss(&self, doc_json: &str) -> PyResult<f64> {
        let doc: InterleavedDocument = serde_json::from_str(doc_json).map_err(json_err)?;
        let cfg = self.inner.config();
        let samples = packing::pack_document(&doc, &Tokenizer::new(), &cfg.geometry(), cfg.max_positions).map_err(err)?;
        let mut total = 0.0;
        for s in &samples {
            total += self.inner.sample_loss(s, &SyntheticImages).map_err(err)?;
        }
        Ok(total / samples.len() as f64)
    }

    /// Per-layer image/text alignment over the documents of a JSONL file.
    #[pyo3(signature = (docs_path, variant = "symmetric"))]
    fn alignment_profile(&self, docs_path: PathBuf, variant: &str) -> PyResult<Vec<f64>> {
        let variant: ChamferVariant = variant.parse().map_err(err)?;
        let cfg = self.inner.config();
        let docs = corpus::parse_interleaved(&docs_path, true).map_err(err)?.records;
        let mut batch = Vec::new();
        for d in &docs {
            batch.extend(packing::pack_document(d, &Tokenizer::new(), &cfg.geometry(), cfg.max_positions).map_err(err)?);
        }
        Ok(diagnostics::alignment_profile(&self.inner, &batch, &SyntheticImages, variant, "py")
            .map_err(err)?
            .layers)
    }

    /// Accuracy and `(item_id, prediction, correct)` records on a task file.
    #[pyo3(signature = (task_path, k = 0, seed = 0))]
    fn evaluate(&self, task_path: PathBuf, k: usize, seed: u64) -> PyResult<(f64, Vec<(String, String, bool)>)> {
        let task = EvalTask::load(&task_path).map_err(err)?;
        let r = eval::run_eval(&self.inner, &task, &SyntheticImages, k, seed).map_err(err)?;
        Ok((r.accuracy, r.records.into_iter().map(|x| (x.item_id, x.prediction, x.correct)).collect()))
    }
}

/// Train one preset (`a`-`d`) on an interleaved and a pairs corpus.
/// Returns the model and the run log as CSV text.
#[pyfunction]
#[pyo3(signature = (preset, interleaved, pairs, seed = 0, init_steps = 50, pretrain_steps = 200, sft_steps = 50, config_json = None))]
#[allow(clippy::too_many_arguments)]
fn train_preset(
    py: Python<'_>,
    preset: &str,
    interleaved: PathBuf,
    pairs: PathBuf,
    seed: u64,
    init_steps: usize,
    pretrain_steps: usize,
    sft_steps: usize,
    config_json: Option<&str>,
) -> PyResult<(PyModel, String)> {
    let preset: Preset = preset.parse().map_err(err)?;
    let cfg = match config_json {
        Some(j) => serde_json::from_str(j).map_err(json_err)?,
        None => ModelConfig::desk(),
    };
    let budget = PresetBudget { init_steps, pretrain_steps, sft_steps, ..PresetBudget::default() };
    let plan = preset.plan(cfg, budget);
    let docs = corpus::parse_interleaved(&interleaved, true).map_err(err)?.records;
    let pairs = corpus::parse_pairs(&pairs, true).map_err(err)?.records;
    let corpora = Corpora::new()
        .with_docs(trainer::corpus_names::INTERLEAVED, docs)
        .with_pairs(trainer::corpus_names::PAIRS, &pairs)
        .with_demos(trainer::corpus_names::SFT_VISUAL, fixture::class_demos(512, seed))
        .with_demos(trainer::corpus_names::SFT_TEXT, fixture::arithmetic_demos(512, seed));
    let (model, log) = py
        .detach(|| trainer::train(plan, &corpora, &SyntheticImages, seed))
        .map_err(err)?;
    Ok((PyModel { inner: model }, log.to_csv()))
}

#[pymodule]
#[pyo3(name = "vlmforge")]
pub fn vlmforge_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tokens_per_image, m)?)?;
    m.add_function(wrap_pyfunction!(to_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(subsample_topk, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer_cosine, m)?)?;
    m.add_function(wrap_pyfunction!(write_fixture, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_stats, m)?)?;
    m.add_function(wrap_pyfunction!(train_preset, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
