//! Zero- and k-shot evaluation on toy tasks.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::images::ImageSource;
use crate::model::Model;
use crate::packing::{Builder, PackedSample, SlotGeometry, StageTag, Tokenizer};
use crate::rng::SeedStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// Greedy decode, whitespace-normalized string compare.
    ExactMatch,
    /// Lowest mean cross-entropy among the candidates.
    CandidateRank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalItem {
    pub item_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    pub prompt: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTask {
    pub name: String,
    pub metric: Metric,
    pub items: Vec<EvalItem>,
    pub demo_pool: Vec<EvalItem>,
}

/// First line of a task file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskHeader {
    task: String,
    metric: Metric,
    /// Demo pool file, relative to the task file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    demo_pool: Option<String>,
}

fn read_items(path: &Path, skip_first: bool) -> Result<(Option<String>, Vec<EvalItem>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut first = None;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if skip_first && first.is_none() {
            first = Some(line);
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Schema { line: i + 1, message: e.to_string() })?;
        items.push(item);
    }
    Ok((first, items))
}

impl EvalTask {
    pub fn validate(&self) -> Result<()> {
        let ids: HashSet<&str> = self.items.iter().map(|i| i.item_id.as_str()).collect();
        if ids.len() != self.items.len() {
            return Err(Error::Invalid(format!("task {}: duplicate item ids", self.name)));
        }
        for d in &self.demo_pool {
            if ids.contains(d.item_id.as_str()) {
                return Err(Error::Invalid(format!("demo {} is also an eval item", d.item_id)));
            }
        }
        for item in &self.items {
            if self.metric == Metric::CandidateRank && item.candidates.is_empty() {
                return Err(Error::Invalid(format!("item {} has no candidates", item.item_id)));
            }
            if !item.candidates.is_empty() && !item.candidates.contains(&item.answer) {
                return Err(Error::Invalid(format!("item {}: answer is not a candidate", item.item_id)));
            }
        }
        Ok(())
    }

    /// Load a task file: a header line `{"task", "metric", "demo_pool"?}`
    /// followed by one item per line.
    pub fn load(path: &Path) -> Result<Self> {
        let (header, items) = read_items(path, true)?;
        let header = header.ok_or_else(|| Error::Schema { line: 1, message: "missing task header".into() })?;
        let header: TaskHeader =
            serde_json::from_str(&header).map_err(|e| Error::Schema { line: 1, message: e.to_string() })?;
        let demo_pool = match &header.demo_pool {
            Some(rel) => read_items(&path.parent().unwrap_or(Path::new(".")).join(rel), false)?.1,
            None => Vec::new(),
        };
        let task = Self {
            name: header.task,
            metric: header.metric,
            items,
            demo_pool,
        };
        task.validate()?;
        Ok(task)
    }

    /// Write the task file and, when there are demos, a sibling
    /// `<stem>.demos.jsonl`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let demo_name = (!self.demo_pool.is_empty()).then(|| {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("task");
            format!("{stem}.demos.jsonl")
        });
        let header = TaskHeader {
            task: self.name.clone(),
            metric: self.metric,
            demo_pool: demo_name.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes") + "\n";
        for item in &self.items {
            out += &(serde_json::to_string(item).expect("item serializes") + "\n");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
        if let Some(name) = demo_name {
            let demo_path = path.with_file_name(name);
            crate::corpus::write_jsonl(&demo_path, &self.demo_pool)?;
        }
        Ok(())
    }
}

/// Seeded choice of `k` distinct demos for one item.
pub fn select_demos<'a>(item: &EvalItem, k: usize, pool: &'a [EvalItem], seed: u64) -> Result<Vec<&'a EvalItem>> {
    if k > pool.len() {
        return Err(Error::Invalid(format!("k={k} exceeds the demo pool of {}", pool.len())));
    }
    let mut rng = SeedStream::new(seed).derive("eval-demos").derive(&item.item_id).rng();
    Ok(rand::seq::index::sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|i| &pool[i])
        .collect())
}

/// The k-shot context for `item`, ending right after the query prompt:
/// `BOS, [slot, prompt, answer] x k, slot, prompt`. No position is scored.
pub fn kshot_prefix(
    item: &EvalItem,
    k: usize,
    pool: &[EvalItem],
    seed: u64,
    geometry: &SlotGeometry,
) -> Result<PackedSample> {
    let tok = Tokenizer::new();
    let mut b = Builder::new(StageTag::Sft);
    for demo in select_demos(item, k, pool, seed)? {
        if let Some(id) = &demo.image_id {
            b.push_image(id, geometry.slot_len());
        }
        b.push_text(&tok.encode(&demo.prompt));
        b.push_text(&tok.encode(&demo.answer));
    }
    if let Some(id) = &item.image_id {
        b.push_image(id, geometry.slot_len());
    }
    b.push_text(&tok.encode(&item.prompt));
    let mut s = b.finish();
    s.loss_mask.iter_mut().for_each(|m| *m = false);
    Ok(s)
}

/// Append `answer` to a prefix; only the answer tokens are scored.
pub fn with_answer(prefix: &PackedSample, answer: &str) -> PackedSample {
    let mut s = prefix.clone();
    for t in Tokenizer::new().encode(answer) {
        s.tokens.push(t);
        s.modality.push(crate::packing::Modality::Text);
        s.loss_mask.push(true);
    }
    s
}

fn check_fits(len: usize, max_positions: usize, k: usize) -> Result<()> {
    if len > max_positions {
        return Err(Error::Overflow(format!(
            "{k}-shot prompt needs {len} positions but the model has {max_positions}; \
             use a smaller k or a larger max_positions"
        )));
    }
    Ok(())
}

/// The k-shot sample with the gold answer appended and scored.
pub fn build_kshot(
    item: &EvalItem,
    k: usize,
    pool: &[EvalItem],
    seed: u64,
    geometry: &SlotGeometry,
    max_positions: usize,
) -> Result<PackedSample> {
    let s = with_answer(&kshot_prefix(item, k, pool, seed, geometry)?, &item.answer);
    check_fits(s.len(), max_positions, k)?;
    Ok(s)
}

pub fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Mean cross-entropy of `candidate` given `prefix`.
pub fn candidate_loss(model: &Model, prefix: &PackedSample, candidate: &str, images: &dyn ImageSource) -> Result<f64> {
    if candidate.is_empty() {
        return Err(Error::Invalid("empty candidate".into()));
    }
    let s = with_answer(prefix, candidate);
    check_fits(s.len(), model.config().max_positions, 0)?;
    model.sample_loss(&s, images)
}

/// Score one item from its prefix. Returns (prediction, correct).
pub fn score_item(
    model: &Model,
    prefix: &PackedSample,
    item: &EvalItem,
    metric: Metric,
    images: &dyn ImageSource,
) -> Result<(String, bool)> {
    match metric {
        Metric::ExactMatch => {
            let room = model.config().max_positions.saturating_sub(prefix.len());
            if room == 0 {
                check_fits(prefix.len() + 1, model.config().max_positions, 0)?;
            }
            let max_new = room.min(Tokenizer::new().count(&item.answer) + 16);
            let out = model.generate(prefix, images, max_new)?;
            let pred = Tokenizer::new().decode(&out);
            let correct = normalize_ws(&pred) == normalize_ws(&item.answer);
            Ok((pred, correct))
        }
        Metric::CandidateRank => {
            if item.candidates.is_empty() {
                return Err(Error::Invalid(format!("item {} has no candidates", item.item_id)));
            }
            let mut best: Option<(f64, &str)> = None;
            for c in &item.candidates {
                let loss = candidate_loss(model, prefix, c, images)?;
                if best.is_none_or(|(b, _)| loss < b) {
                    best = Some((loss, c));
                }
            }
            let pred = best.expect("non-empty candidates").1.to_string();
            let correct = pred == item.answer;
            Ok((pred, correct))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub prediction: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: String,
    pub k: usize,
    pub accuracy: f64,
    pub records: Vec<ItemRecord>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("item_id,prediction,correct\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{}", csv_field(&r.item_id), csv_field(&r.prediction), u8::from(r.correct));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Evaluate every item k-shot. Items run in parallel; records are sorted
/// by item id.
pub fn run_eval(model: &Model, task: &EvalTask, images: &dyn ImageSource, k: usize, seed: u64) -> Result<EvalReport> {
    task.validate()?;
    let geometry = model.config().geometry();
    let mut records: Vec<ItemRecord> = task
        .items
        .par_iter()
        .map(|item| {
            let prefix = kshot_prefix(item, k, &task.demo_pool, seed, &geometry)?;
            check_fits(prefix.len(), model.config().max_positions, k)?;
            let (prediction, correct) = score_item(model, &prefix, item, task.metric, images)?;
            Ok(ItemRecord {
                item_id: item.item_id.clone(),
                prediction,
                correct,
            })
        })
        .collect::<Result<_>>()?;
    records.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    let accuracy = if records.is_empty() {
        0.0
    } else {
        records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64
    };
    Ok(EvalReport {
        task: task.name.clone(),
        k,
        accuracy,
        records,
    })
}
