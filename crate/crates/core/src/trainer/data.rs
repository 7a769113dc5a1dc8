use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::plan::DataSpec;
use crate::corpus::{BlendSampler, InterleavedDocument, PairSample};
use crate::error::{Error, Result};
use crate::packing::{pack_document, pack_sft, PackedSample, SftDemo, SlotGeometry, Tokenizer};
use crate::rng::{Rng, SeedStream};

/// Named corpora available to a training plan.
#[derive(Debug, Clone, Default)]
pub struct Corpora {
    pub docs: HashMap<String, Vec<Arc<InterleavedDocument>>>,
    pub demos: HashMap<String, Vec<SftDemo>>,
}

impl Corpora {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_docs(mut self, name: &str, docs: impl IntoIterator<Item = InterleavedDocument>) -> Self {
        self.docs.insert(name.to_string(), docs.into_iter().map(Arc::new).collect());
        self
    }

    /// Pairs enter as two-segment `<image><caption>` documents.
    pub fn with_pairs(self, name: &str, pairs: &[PairSample]) -> Self {
        let docs = pairs
            .iter()
            .enumerate()
            .map(|(i, p)| p.to_document(format!("{name}-{i}")));
        self.with_docs(name, docs)
    }

    pub fn with_demos(mut self, name: &str, demos: Vec<SftDemo>) -> Self {
        self.demos.insert(name.to_string(), demos);
        self
    }

    fn docs(&self, name: &str) -> Result<Vec<Arc<InterleavedDocument>>> {
        self.docs
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("plan references unknown corpus {name:?}")))
    }

    fn demos(&self, name: &str) -> Result<Vec<SftDemo>> {
        let d = self
            .demos
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("plan references unknown demo set {name:?}")))?;
        if d.is_empty() {
            return Err(Error::Config(format!("demo set {name:?} is empty")));
        }
        Ok(d)
    }
}

/// Cycles through items in a fresh shuffled order each epoch.
struct EpochCycler<T> {
    items: Vec<T>,
    order: Vec<usize>,
    cursor: usize,
}

impl<T> EpochCycler<T> {
    fn new(items: Vec<T>, rng: &mut Rng) -> Self {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(rng);
        Self { items, order, cursor: 0 }
    }

    fn next(&mut self, rng: &mut Rng) -> &T {
        if self.cursor == self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let i = self.order[self.cursor];
        self.cursor += 1;
        &self.items[i]
    }
}

enum Inner {
    Blend {
        sampler: BlendSampler,
        queue: VecDeque<PackedSample>,
    },
    Sft {
        visual: EpochCycler<SftDemo>,
        text: Option<EpochCycler<SftDemo>>,
        fraction: f64,
        rng: Rng,
    },
}

/// Deterministic infinite stream of packed samples for one stage.
pub struct SampleStream {
    inner: Inner,
    tok: Tokenizer,
    geometry: SlotGeometry,
    max_len: usize,
}

impl SampleStream {
    pub fn new(
        spec: &DataSpec,
        corpora: &Corpora,
        geometry: SlotGeometry,
        max_len: usize,
        seed: SeedStream,
    ) -> Result<Self> {
        let inner = match spec {
            DataSpec::Blend { sources } => {
                let sources = sources
                    .iter()
                    .map(|s| Ok((corpora.docs(&s.corpus)?, s.proportion)))
                    .collect::<Result<Vec<_>>>()?;
                Inner::Blend {
                    sampler: BlendSampler::new(sources, seed.derive("blend"))?,
                    queue: VecDeque::new(),
                }
            }
            DataSpec::Sft { visual, text_only, text_only_fraction } => {
                let mut rng = seed.derive("sft").rng();
                let visual = EpochCycler::new(corpora.demos(visual)?, &mut rng);
                let text = match text_only {
                    Some(name) if *text_only_fraction > 0.0 => Some(EpochCycler::new(corpora.demos(name)?, &mut rng)),
                    _ => None,
                };
                Inner::Sft {
                    visual,
                    text,
                    fraction: *text_only_fraction,
                    rng,
                }
            }
        };
        Ok(Self {
            inner,
            tok: Tokenizer::new(),
            geometry,
            max_len,
        })
    }

    pub fn next_sample(&mut self) -> Result<PackedSample> {
        match &mut self.inner {
            Inner::Blend { sampler, queue } => loop {
                if let Some(s) = queue.pop_front() {
                    return Ok(s);
                }
                let draw = sampler.next().expect("blend sampler is infinite");
                queue.extend(pack_document(&draw.doc, &self.tok, &self.geometry, self.max_len)?);
            },
            Inner::Sft { visual, text, fraction, rng } => {
                let u: f64 = rng.random();
                let demo = match text {
                    Some(t) if u < *fraction => t.next(rng),
                    _ => visual.next(rng),
                };
                let s = pack_sft(demo, &self.tok, &self.geometry)?;
                if s.len() > self.max_len {
                    return Err(Error::Overflow(format!(
                        "instruction demo packs to {} tokens, max_len is {}",
                        s.len(),
                        self.max_len
                    )));
                }
                Ok(s)
            }
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Result<Vec<PackedSample>> {
        (0..size).map(|_| self.next_sample()).collect()
    }
}
