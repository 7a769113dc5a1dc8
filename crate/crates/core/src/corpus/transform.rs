use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};

use super::{ImageSegment, InterleavedDocument, PairSample, Segment};
use crate::error::{Error, Result};

/// How an image picks its caption when an interleaved document is broken
/// into pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairPolicy {
    /// Highest precomputed similarity; ties go to the lowest segment index.
    BestSim,
    /// First text segment after the image.
    AdjacentNext,
}

impl std::str::FromStr for PairPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "best-sim" => Ok(PairPolicy::BestSim),
            "adjacent-next" => Ok(PairPolicy::AdjacentNext),
            other => Err(Error::Invalid(format!("unknown pair policy {other:?}"))),
        }
    }
}

/// Break an interleaved document into (image, text segment) pairs,
/// discarding interleave order. Each image yields at most one pair; the
/// same text segment may be chosen by several images.
pub fn to_pairs(doc: &InterleavedDocument, policy: PairPolicy) -> Result<Vec<PairSample>> {
    let mut out = Vec::new();
    for (pos, seg) in doc.segments.iter().enumerate() {
        let Segment::Image(im) = seg else { continue };
        let picked = match policy {
            PairPolicy::BestSim => Some(best_match(doc, im)?),
            PairPolicy::AdjacentNext => doc.segments[pos + 1..]
                .iter()
                .position(|s| !s.is_image())
                .map(|off| pos + 1 + off),
        };
        let Some(text_pos) = picked else { continue };
        let caption = doc.segments[text_pos]
            .as_text()
            .expect("picked segment is text")
            .to_string();
        let score = im
            .sim_scores
            .as_ref()
            .and_then(|s| s.get(&text_pos).copied())
            .unwrap_or(0.0);
        out.push(PairSample::new(im.image_id.clone(), caption, score));
    }
    Ok(out)
}

fn best_match(doc: &InterleavedDocument, im: &ImageSegment) -> Result<usize> {
    let missing = || Error::MissingScores {
        image_id: im.image_id.clone(),
    };
    let scores = im.sim_scores.as_ref().ok_or_else(missing)?;
    let mut best: Option<(usize, f64)> = None;
    // BTreeMap iterates keys ascending, so strict `>` keeps the lowest index on ties.
    for (&k, &v) in scores {
        if !matches!(doc.segments.get(k), Some(Segment::Text(_))) {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k).ok_or_else(missing)
}

/// Move every image to the front, keeping relative order within images and
/// within text. Similarity keys are remapped to the new positions.
pub fn reformat_images_first(doc: &InterleavedDocument) -> InterleavedDocument {
    let order: Vec<usize> = (0..doc.segments.len())
        .filter(|&i| doc.segments[i].is_image())
        .chain((0..doc.segments.len()).filter(|&i| !doc.segments[i].is_image()))
        .collect();
    let mut new_pos = vec![0usize; order.len()];
    for (new, &old) in order.iter().enumerate() {
        new_pos[old] = new;
    }
    let segments = order
        .iter()
        .map(|&old| match &doc.segments[old] {
            Segment::Image(im) => Segment::Image(ImageSegment {
                image_id: im.image_id.clone(),
                sim_scores: im.sim_scores.as_ref().map(|s| {
                    s.iter()
                        .map(|(&k, &v)| (new_pos.get(k).copied().unwrap_or(k), v))
                        .collect::<BTreeMap<_, _>>()
                }),
            }),
            text => text.clone(),
        })
        .collect();
    InterleavedDocument {
        doc_id: doc.doc_id.clone(),
        segments,
        meta: doc.meta.clone(),
    }
}

/// Result of [`subsample_topk`].
#[derive(Debug, Clone, Default)]
pub struct TopK {
    /// Kept samples, best first.
    pub kept: Vec<PairSample>,
    /// Diagnostics for records that were rejected (non-finite scores).
    pub rejected: Vec<String>,
}

struct Ranked {
    sample: PairSample,
    seq: usize,
}

impl Ranked {
    // Greater = better: higher score, then lower image_id, then earlier input.
    fn rank(&self, other: &Self) -> Ordering {
        self.sample
            .clip_score
            .total_cmp(&other.sample.clip_score)
            .then_with(|| other.sample.image_id.cmp(&self.sample.image_id))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.rank(other) == Ordering::Equal
    }
}
impl Eq for Ranked {}
impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank(other)
    }
}

/// Keep the `k` pairs with the highest `clip_score` in a single streaming
/// pass with O(k) memory. Ties break by ascending `image_id`, then input
/// order; the output is sorted best-first.
pub fn subsample_topk(pairs: impl IntoIterator<Item = PairSample>, k: usize) -> TopK {
    let mut heap: BinaryHeap<Reverse<Ranked>> = BinaryHeap::new();
    let mut rejected = Vec::new();
    for (seq, sample) in pairs.into_iter().enumerate() {
        if !sample.clip_score.is_finite() {
            rejected.push(format!(
                "record {seq} (image {}): non-finite clip_score {}",
                sample.image_id, sample.clip_score
            ));
            continue;
        }
        if k == 0 {
            continue;
        }
        let item = Ranked { sample, seq };
        if heap.len() < k {
            heap.push(Reverse(item));
        } else if let Some(mut worst) = heap.peek_mut() {
            if item > worst.0 {
                *worst = Reverse(item);
            }
        }
    }
    let mut kept: Vec<Ranked> = heap.into_iter().map(|r| r.0).collect();
    kept.sort_by(|a, b| b.cmp(a));
    TopK {
        kept: kept.into_iter().map(|r| r.sample).collect(),
        rejected,
    }
}
