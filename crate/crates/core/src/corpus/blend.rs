use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::InterleavedDocument;
use crate::error::{Error, Result};
use crate::rng::{Rng, SeedStream};

/// One draw from a [`BlendSampler`].
#[derive(Debug, Clone)]
pub struct BlendDraw {
    pub source: usize,
    pub doc: Arc<InterleavedDocument>,
}

struct Source {
    docs: Vec<Arc<InterleavedDocument>>,
    order: Vec<usize>,
    cursor: usize,
}

/// Infinite, seeded mixture over several corpora. Proportions are given
/// over *images*; each source's document rate is its image proportion
/// divided by its mean images per document. Within a source, documents are
/// visited in a fresh shuffled order every epoch.
pub struct BlendSampler {
    sources: Vec<Source>,
    cumulative: Vec<f64>,
    rng: Rng,
}

impl BlendSampler {
    pub fn new(
        sources: Vec<(Vec<Arc<InterleavedDocument>>, f64)>,
        seed: SeedStream,
    ) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::Config("blend needs at least one source".into()));
        }
        let total: f64 = sources.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("blend proportions sum to {total}, not 1")));
        }
        let mut rates = Vec::with_capacity(sources.len());
        for (i, (docs, p)) in sources.iter().enumerate() {
            if !(p.is_finite() && *p > 0.0) {
                return Err(Error::Config(format!("source {i} has proportion {p}")));
            }
            if docs.is_empty() {
                return Err(Error::Config(format!("source {i} is empty")));
            }
            let images: usize = docs.iter().map(|d| d.num_images()).sum();
            if images == 0 {
                return Err(Error::Config(format!(
                    "source {i} has no images, so an image proportion is meaningless"
                )));
            }
            let per_doc = images as f64 / docs.len() as f64;
            rates.push(p / per_doc);
        }
        let norm: f64 = rates.iter().sum();
        let mut acc = 0.0;
        let cumulative = rates
            .iter()
            .map(|r| {
                acc += r / norm;
                acc
            })
            .collect();
        let mut rng = seed.rng();
        let sources = sources
            .into_iter()
            .map(|(docs, _)| {
                let mut order: Vec<usize> = (0..docs.len()).collect();
                order.shuffle(&mut rng);
                Source {
                    docs,
                    order,
                    cursor: 0,
                }
            })
            .collect();
        Ok(Self {
            sources,
            cumulative,
            rng,
        })
    }

    /// Per-source probability of drawing a document.
    pub fn doc_rates(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.cumulative
            .iter()
            .map(|&c| {
                let r = c - prev;
                prev = c;
                r
            })
            .collect()
    }
}

impl Iterator for BlendSampler {
    type Item = BlendDraw;

    fn next(&mut self) -> Option<BlendDraw> {
        let u: f64 = self.rng.random();
        let source = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1);
        let src = &mut self.sources[source];
        if src.cursor == src.order.len() {
            src.order.shuffle(&mut self.rng);
            src.cursor = 0;
        }
        let doc = Arc::clone(&src.docs[src.order[src.cursor]]);
        src.cursor += 1;
        Some(BlendDraw { source, doc })
    }
}
