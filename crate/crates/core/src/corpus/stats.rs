use serde::Serialize;

use super::{InterleavedDocument, Segment};
use crate::packing::Tokenizer;

/// Aggregate corpus shape: images per sample and text tokens per image.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CorpusStats {
    pub num_docs: usize,
    pub num_images: usize,
    pub total_text_tokens: usize,
    pub images_per_sample: f64,
    /// Absent when the corpus has no images.
    pub tokens_per_image: Option<f64>,
}

pub fn compute_stats<'a>(
    docs: impl IntoIterator<Item = &'a InterleavedDocument>,
    tokenizer: &Tokenizer,
) -> CorpusStats {
    let mut stats = CorpusStats::default();
    for doc in docs {
        stats.num_docs += 1;
        for seg in &doc.segments {
            match seg {
                Segment::Image(_) => stats.num_images += 1,
                Segment::Text(t) => stats.total_text_tokens += tokenizer.count(&t.text),
            }
        }
    }
    if stats.num_docs > 0 {
        stats.images_per_sample = stats.num_images as f64 / stats.num_docs as f64;
    }
    if stats.num_images > 0 {
        stats.tokens_per_image = Some(stats.total_text_tokens as f64 / stats.num_images as f64);
    }
    stats
}
