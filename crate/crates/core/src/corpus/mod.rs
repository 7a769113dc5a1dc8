//! Interleaved and paired image-text corpora: record types, JSONL parsing,
//! statistics, and the dataset transforms used by the pre-training recipe.

mod blend;
mod stats;
mod transform;

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use blend::{BlendDraw, BlendSampler};
pub use stats::{compute_stats, CorpusStats};
pub use transform::{
    reformat_images_first, subsample_topk, to_pairs, PairPolicy, TopK,
};

/// A text segment of an interleaved document.
#[derive(Debug, Clone, PartialEq)]
pub struct TextSegment {
    pub text: String,
}

/// An image segment. `sim_scores` maps the position of a text segment in
/// the same document to its precomputed image-text similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSegment {
    pub image_id: String,
    pub sim_scores: Option<BTreeMap<usize, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSegment", into = "RawSegment")]
pub enum Segment {
    Text(TextSegment),
    Image(ImageSegment),
}

/// Wire form of a segment: exactly one of `text` or `image_id`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSegment {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sim_scores: Option<BTreeMap<String, f64>>,
}

impl TryFrom<RawSegment> for Segment {
    type Error = String;

    fn try_from(raw: RawSegment) -> std::result::Result<Self, String> {
        match (raw.text, raw.image_id) {
            (Some(text), None) if raw.sim_scores.is_none() => Ok(Segment::Text(TextSegment { text })),
            (None, Some(image_id)) => {
                let sim_scores = raw
                    .sim_scores
                    .map(|m| {
                        m.into_iter()
                            .map(|(k, v)| {
                                k.parse::<usize>()
                                    .map(|k| (k, v))
                                    .map_err(|_| format!("sim_scores key {k:?} is not a segment index"))
                            })
                            .collect::<std::result::Result<BTreeMap<_, _>, _>>()
                    })
                    .transpose()?;
                Ok(Segment::Image(ImageSegment { image_id, sim_scores }))
            }
            _ => Err("a segment must carry exactly one of `text` or `image_id`".into()),
        }
    }
}

impl From<Segment> for RawSegment {
    fn from(seg: Segment) -> Self {
        match seg {
            Segment::Text(t) => RawSegment {
                text: Some(t.text),
                image_id: None,
                sim_scores: None,
            },
            Segment::Image(im) => RawSegment {
                text: None,
                image_id: Some(im.image_id),
                sim_scores: im
                    .sim_scores
                    .map(|m| m.into_iter().map(|(k, v)| (k.to_string(), v)).collect()),
            },
        }
    }
}

impl Segment {
    pub fn text(text: impl Into<String>) -> Self {
        Segment::Text(TextSegment { text: text.into() })
    }

    pub fn image(image_id: impl Into<String>) -> Self {
        Segment::Image(ImageSegment {
            image_id: image_id.into(),
            sim_scores: None,
        })
    }

    pub fn image_scored(image_id: impl Into<String>, scores: &[(usize, f64)]) -> Self {
        Segment::Image(ImageSegment {
            image_id: image_id.into(),
            sim_scores: Some(scores.iter().copied().collect()),
        })
    }

    pub fn is_image(&self) -> bool {
        matches!(self, Segment::Image(_))
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Segment::Text(t) => Some(&t.text),
            Segment::Image(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterleavedDocument {
    pub doc_id: String,
    pub segments: Vec<Segment>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl InterleavedDocument {
    pub fn new(doc_id: impl Into<String>, segments: Vec<Segment>) -> Self {
        Self {
            doc_id: doc_id.into(),
            segments,
            meta: BTreeMap::new(),
        }
    }

    pub fn num_images(&self) -> usize {
        self.segments.iter().filter(|s| s.is_image()).count()
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Image(im) => Some(im.image_id.as_str()),
            Segment::Text(_) => None,
        })
    }

    /// Concatenation of every text segment in order.
    pub fn full_text(&self) -> String {
        self.segments.iter().filter_map(Segment::as_text).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Error::InvalidDocument {
            doc_id: self.doc_id.clone(),
            message,
        };
        if self.segments.is_empty() {
            return Err(bad("no segments".into()));
        }
        for (i, seg) in self.segments.iter().enumerate() {
            match seg {
                Segment::Text(t) if t.text.trim().is_empty() => {
                    return Err(bad(format!("segment {i} has blank text")));
                }
                Segment::Text(_) => {}
                Segment::Image(im) => {
                    if im.image_id.is_empty() {
                        return Err(bad(format!("segment {i} has an empty image_id")));
                    }
                    for (&k, &v) in im.sim_scores.iter().flatten() {
                        if !matches!(self.segments.get(k), Some(Segment::Text(_))) {
                            return Err(bad(format!(
                                "image {} scores segment {k}, which is not a text segment",
                                im.image_id
                            )));
                        }
                        if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                            return Err(bad(format!(
                                "image {} has similarity {v} outside [-1, 1]",
                                im.image_id
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// One image with one caption (alt-text style).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSample {
    pub image_id: String,
    pub caption: String,
    pub clip_score: f64,
}

impl PairSample {
    pub fn new(image_id: impl Into<String>, caption: impl Into<String>, clip_score: f64) -> Self {
        Self {
            image_id: image_id.into(),
            caption: caption.into(),
            clip_score,
        }
    }

    /// Two-segment document `<image><caption>`.
    pub fn to_document(&self, doc_id: impl Into<String>) -> InterleavedDocument {
        InterleavedDocument::new(
            doc_id,
            vec![
                Segment::image_scored(self.image_id.clone(), &[(1, self.clip_score)]),
                Segment::text(self.caption.clone()),
            ],
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Interleaved,
    Pairs,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interleaved-jsonl" | "interleaved" => Ok(CorpusFormat::Interleaved),
            "pairs-jsonl" | "pairs" => Ok(CorpusFormat::Pairs),
            other => Err(Error::Invalid(format!("unknown corpus format {other:?}"))),
        }
    }
}

/// A record type that can be read from one JSONL line.
pub trait Record: Sized + serde::de::DeserializeOwned {
    /// `Ok(None)` drops the record silently (counted by the reader).
    fn check(self) -> std::result::Result<Option<Self>, String>;
}

impl Record for InterleavedDocument {
    fn check(self) -> std::result::Result<Option<Self>, String> {
        self.validate().map_err(|e| e.to_string())?;
        Ok(Some(self))
    }
}

impl Record for PairSample {
    fn check(self) -> std::result::Result<Option<Self>, String> {
        if !self.clip_score.is_finite() {
            return Err(format!("image {} has a non-finite clip_score", self.image_id));
        }
        if self.caption.trim().is_empty() {
            return Ok(None);
        }
        Ok(Some(self))
    }
}

/// Streaming JSONL reader. Yields records in file order; schema violations
/// come back as [`Error::Schema`] carrying the 1-based line number.
pub struct Records<R, T> {
    lines: std::io::Lines<R>,
    line_no: usize,
    dropped: usize,
    _marker: std::marker::PhantomData<T>,
}

impl<R: BufRead, T: Record> Records<R, T> {
    pub fn new(reader: R) -> Self {
        Self {
            lines: reader.lines(),
            line_no: 0,
            dropped: 0,
            _marker: std::marker::PhantomData,
        }
    }

    /// Records skipped as noise (empty captions).
    pub fn dropped(&self) -> usize {
        self.dropped
    }
}

impl<R: BufRead, T: Record> Iterator for Records<R, T> {
    type Item = Result<T>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => {
                    self.line_no += 1;
                    return Some(Err(Error::Schema {
                        line: self.line_no,
                        message: format!("unreadable line: {e}"),
                    }));
                }
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let schema = |message: String| Error::Schema {
                line: self.line_no,
                message,
            };
            let parsed: T = match serde_json::from_str(&line) {
                Ok(v) => v,
                Err(e) => return Some(Err(schema(e.to_string()))),
            };
            match parsed.check() {
                Ok(Some(v)) => return Some(Ok(v)),
                Ok(None) => self.dropped += 1,
                Err(msg) => return Some(Err(schema(msg))),
            }
        }
    }
}

/// Fully materialized parse result.
#[derive(Debug)]
pub struct Parsed<T> {
    pub records: Vec<T>,
    pub errors: Vec<Error>,
    pub dropped: usize,
}

pub fn open_records<T: Record>(path: &Path) -> Result<Records<BufReader<File>, T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(Records::new(BufReader::new(file)))
}

/// Read a whole corpus file. In strict mode the first bad line aborts.
pub fn read_records<T: Record + HasId>(path: &Path, strict: bool) -> Result<Parsed<T>> {
    let mut it = open_records::<T>(path)?;
    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut seen = HashSet::new();
    while let Some(item) = it.next() {
        let line = it.line_no;
        let item = item.and_then(|r| match r.unique_id() {
            Some(id) if !seen.insert(id.to_string()) => Err(Error::Schema {
                line,
                message: format!("duplicate id {id:?}"),
            }),
            _ => Ok(r),
        });
        match item {
            Ok(r) => records.push(r),
            Err(e) if strict => return Err(e),
            Err(e) => errors.push(e),
        }
    }
    Ok(Parsed {
        records,
        errors,
        dropped: it.dropped(),
    })
}

/// Identity that must be unique within one corpus file.
pub trait HasId {
    fn unique_id(&self) -> Option<&str>;
}

impl HasId for InterleavedDocument {
    fn unique_id(&self) -> Option<&str> {
        Some(&self.doc_id)
    }
}

impl HasId for PairSample {
    fn unique_id(&self) -> Option<&str> {
        None
    }
}

pub fn parse_interleaved(path: &Path, strict: bool) -> Result<Parsed<InterleavedDocument>> {
    read_records(path, strict)
}

pub fn parse_pairs(path: &Path, strict: bool) -> Result<Parsed<PairSample>> {
    read_records(path, strict)
}

/// Write records as JSONL (one object per line, LF-terminated).
pub fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(&r).map_err(|e| Error::Invalid(e.to_string()))?;
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
