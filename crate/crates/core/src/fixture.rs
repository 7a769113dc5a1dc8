//! Synthetic corpora: stat-targeted fixtures, a small topic corpus where
//! document context carries information, and instruction/eval items.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{compute_stats, to_pairs, CorpusStats, InterleavedDocument, PairPolicy, PairSample, Segment};
use crate::error::{Error, Result};
use crate::eval::{EvalItem, EvalTask, Metric};
use crate::packing::{SftDemo, Tokenizer};
use crate::rng::{Rng, SeedStream};
use crate::trainer::{corpus_names, Corpora};

const DEFAULT_VOCAB: &[&str] = &[
    "the", "a", "of", "and", "to", "in", "red", "blue", "small", "large", "cat", "dog", "tree", "river", "house",
    "city", "photo", "shows", "near", "with", "on", "bright", "old", "new", "street", "sky", "water", "people",
    "table", "light", "green", "window", "road", "field", "boat", "bird",
];

/// Per-document image count: uniform over `[min, max]`, adjusted so the
/// corpus total equals `mean * n_docs` (rounded).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagesPerDoc {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

impl ImagesPerDoc {
    pub fn fixed(n: usize) -> Self {
        Self { min: n, max: n, mean: n as f64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub n_docs: usize,
    pub images_per_doc: ImagesPerDoc,
    pub tokens_per_image: f64,
    #[serde(default)]
    pub vocab: Option<Vec<String>>,
    #[serde(default)]
    pub seed: u64,
}

impl FixtureSpec {
    /// Shaped like an interleaved web corpus: 4 images and 122.5 text
    /// tokens per image.
    pub fn mmc4_like(n_docs: usize, seed: u64) -> Self {
        Self {
            n_docs,
            images_per_doc: ImagesPerDoc { min: 2, max: 6, mean: 4.0 },
            tokens_per_image: 122.5,
            vocab: None,
            seed,
        }
    }

    /// Shaped like an alt-text caption corpus: one image, 22.7 tokens.
    pub fn coyo_like(n_docs: usize, seed: u64) -> Self {
        Self {
            n_docs,
            images_per_doc: ImagesPerDoc::fixed(1),
            tokens_per_image: 22.7,
            vocab: None,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub interleaved: Vec<InterleavedDocument>,
    pub pairs: Vec<PairSample>,
}

impl Fixture {
    pub fn interleaved_stats(&self) -> CorpusStats {
        compute_stats(&self.interleaved, &Tokenizer::new())
    }

    pub fn pairs_stats(&self) -> CorpusStats {
        let docs: Vec<_> = self
            .pairs
            .iter()
            .enumerate()
            .map(|(i, p)| p.to_document(format!("p{i}")))
            .collect();
        compute_stats(&docs, &Tokenizer::new())
    }
}

/// Split `total` into `parts` integers, each at least `floor`, with
/// random jitter.
fn split_total(total: usize, parts: usize, floor: usize, rng: &mut Rng) -> Vec<usize> {
    let spare = total - parts * floor;
    let weights: Vec<f64> = (0..parts).map(|_| rng.random_range(0.5..1.5)).collect();
    let wsum: f64 = weights.iter().sum();
    let mut out: Vec<usize> = weights
        .iter()
        .map(|w| floor + (spare as f64 * w / wsum).floor() as usize)
        .collect();
    let mut left = total - out.iter().sum::<usize>();
    while left > 0 {
        let i = rng.random_range(0..parts);
        out[i] += 1;
        left -= 1;
    }
    out
}

/// Text of exactly `len` bytes built from whole vocabulary words, padded
/// with ASCII letters.
fn text_of_len(len: usize, vocab: &[String], rng: &mut Rng) -> String {
    let mut s = String::with_capacity(len);
    loop {
        let w = vocab.choose(rng).expect("vocab is non-empty");
        let need = if s.is_empty() { w.len() } else { w.len() + 1 };
        if s.len() + need > len {
            break;
        }
        if !s.is_empty() {
            s.push(' ');
        }
        s.push_str(w);
    }
    while s.len() < len {
        s.push(char::from(b'a' + rng.random_range(0..26u8)));
    }
    s
}

fn score(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo..hi) * 1e4).round() / 1e4
}

/// Generate an interleaved corpus and a pairs corpus whose statistics hit
/// the spec targets within 1%.
pub fn fixture_gen(spec: &FixtureSpec) -> Result<Fixture> {
    let ipd = spec.images_per_doc;
    if spec.n_docs == 0 {
        return Err(Error::Config("n_docs must be positive".into()));
    }
    if ipd.min == 0 || ipd.min > ipd.max || !(ipd.min as f64..=ipd.max as f64).contains(&ipd.mean) {
        return Err(Error::Config(format!("images_per_doc {ipd:?} is inconsistent")));
    }
    if !(spec.tokens_per_image >= 1.0 && spec.tokens_per_image.is_finite()) {
        return Err(Error::Config(format!(
            "tokens_per_image {} is unreachable; every image needs at least one text token",
            spec.tokens_per_image
        )));
    }
    let vocab: Vec<String> = match &spec.vocab {
        Some(v) => v.iter().filter(|w| !w.trim().is_empty()).cloned().collect(),
        None => DEFAULT_VOCAB.iter().map(|w| w.to_string()).collect(),
    };
    if vocab.is_empty() {
        return Err(Error::Config("vocab is empty".into()));
    }
    let seeds = SeedStream::new(spec.seed).derive("fixture");
    let mut rng = seeds.derive("layout").rng();

    let n = spec.n_docs;
    let total_images = (ipd.mean * n as f64).round() as usize;
    let mut counts = vec![ipd.min; n];
    let mut left = total_images - ipd.min * n;
    let mut open: Vec<usize> = (0..n).collect();
    while left > 0 {
        let k = rng.random_range(0..open.len());
        counts[open[k]] += 1;
        if counts[open[k]] == ipd.max {
            open.swap_remove(k);
        }
        left -= 1;
    }

    // Each image is followed by a text segment; some documents also open
    // with one.
    let leads: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let n_text: usize = counts.iter().sum::<usize>() + leads.iter().filter(|&&l| l).count();
    let total_tokens = (spec.tokens_per_image * total_images as f64).round() as usize;
    if total_tokens < n_text {
        return Err(Error::Config("tokens_per_image too small for the segment layout".into()));
    }
    let lengths = split_total(total_tokens, n_text, 1, &mut rng);

    let mut text_rng = seeds.derive("text").rng();
    let mut len_iter = lengths.into_iter();
    let mut interleaved = Vec::with_capacity(n);
    for d in 0..n {
        let mut segments = Vec::new();
        let mut image_slots = Vec::new();
        if leads[d] {
            segments.push(Segment::text(text_of_len(len_iter.next().unwrap(), &vocab, &mut text_rng)));
        }
        for j in 0..counts[d] {
            image_slots.push((segments.len(), format!("c{}-d{d}-{j}", rng.random_range(0..8))));
            segments.push(Segment::image("placeholder"));
            segments.push(Segment::text(text_of_len(len_iter.next().unwrap(), &vocab, &mut text_rng)));
        }
        let text_positions: Vec<usize> = (0..segments.len()).filter(|&i| !segments[i].is_image()).collect();
        for (pos, id) in image_slots {
            let scores: Vec<(usize, f64)> = text_positions
                .iter()
                .map(|&t| (t, if t == pos + 1 { score(&mut rng, 0.25, 0.35) } else { score(&mut rng, 0.0, 0.2) }))
                .collect();
            segments[pos] = Segment::image_scored(id, &scores);
        }
        interleaved.push(InterleavedDocument::new(format!("doc{d:05}"), segments));
    }

    let mut pair_rng = seeds.derive("pairs").rng();
    let ids: Vec<String> = interleaved
        .iter()
        .flat_map(|d| d.image_ids().map(str::to_string).collect::<Vec<_>>())
        .collect();
    let lengths = split_total(total_tokens, ids.len(), 1, &mut pair_rng);
    let pairs = ids
        .into_iter()
        .zip(lengths)
        .map(|(id, len)| {
            let caption = text_of_len(len, &vocab, &mut pair_rng);
            PairSample::new(id, caption, score(&mut pair_rng, 0.2, 0.4))
        })
        .collect();

    let fixture = Fixture { interleaved, pairs };
    for stats in [fixture.interleaved_stats(), fixture.pairs_stats()] {
        let tpi = stats.tokens_per_image.unwrap_or(0.0);
        if (tpi - spec.tokens_per_image).abs() > 0.01 * spec.tokens_per_image {
            return Err(Error::Config(format!("tokens_per_image target missed: {tpi}")));
        }
    }
    let ips = fixture.interleaved_stats().images_per_sample;
    if (ips - ipd.mean).abs() > 0.01 * ipd.mean {
        return Err(Error::Config(format!(
            "images_per_sample {} is not reachable with {n} documents",
            ipd.mean
        )));
    }
    Ok(fixture)
}

/// Pronounceable nonce words, one per index.
pub fn nonce_word(i: usize) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let mut s = String::new();
    let mut k = i;
    for _ in 0..2 {
        s.push(C[k % C.len()] as char);
        k /= C.len();
        s.push(V[k % V.len()] as char);
        k /= V.len();
    }
    s.push(C[(i * 7 + 3) % C.len()] as char);
    s
}

const VERBS: &[&str] = &["runs", "sits", "hops", "naps"];

/// Number of subject names in the topic corpus.
pub const TOPIC_NAMES: usize = 48;
/// Number of image classes; a name's class is `name % TOPIC_CLASSES`.
pub const TOPIC_CLASSES: usize = 4;

/// Documents about one named subject each. Every text segment mentions
/// the subject, so later segments are predictable from earlier ones; an
/// image only reveals the subject's class, which narrows it to a few names.
///
/// Layout: `text, (image, text) x images_per_doc`. Each image scores
/// highest against the text right after it.
pub fn topic_corpus(n_docs: usize, images_per_doc: usize, seed: u64) -> Vec<InterleavedDocument> {
    let mut rng = SeedStream::new(seed).derive("topic-corpus").rng();
    (0..n_docs)
        .map(|d| {
            let name = nonce_word(rng.random_range(0..TOPIC_NAMES));
            let class = name_class(&name);
            let line = |rng: &mut Rng| {
                format!("{name} {}.", VERBS.choose(rng).unwrap())
            };
            let mut segments = vec![Segment::text(line(&mut rng))];
            let mut image_positions = Vec::new();
            for j in 0..images_per_doc {
                image_positions.push((segments.len(), format!("c{class}-t{d}-{j}")));
                segments.push(Segment::image("placeholder"));
                segments.push(Segment::text(line(&mut rng)));
            }
            let texts: Vec<usize> = (0..segments.len()).step_by(2).collect();
            for (pos, id) in image_positions {
                let scores: Vec<(usize, f64)> = texts
                    .iter()
                    .map(|&t| (t, if t == pos + 1 { score(&mut rng, 0.3, 0.4) } else { score(&mut rng, 0.0, 0.2) }))
                    .collect();
                segments[pos] = Segment::image_scored(id, &scores);
            }
            InterleavedDocument::new(format!("topic{d:05}"), segments)
        })
        .collect()
}

fn name_class(name: &str) -> usize {
    (0..TOPIC_NAMES).position(|i| nonce_word(i) == name).expect("known name") % TOPIC_CLASSES
}

/// Visual instruction demos: name the class shown in the image.
pub fn class_demos(n: usize, seed: u64) -> Vec<SftDemo> {
    let mut rng = SeedStream::new(seed).derive("class-demos").rng();
    (0..n)
        .map(|i| {
            let class = rng.random_range(0..TOPIC_CLASSES);
            SftDemo {
                image_id: Some(format!("c{class}-q{i}")),
                prompt: "Q:kind? A:".into(),
                answer: nonce_word(class),
            }
        })
        .collect()
}

/// Text-only instruction demos: single-digit addition.
pub fn arithmetic_demos(n: usize, seed: u64) -> Vec<SftDemo> {
    let mut rng = SeedStream::new(seed).derive("arith-demos").rng();
    (0..n)
        .map(|_| {
            let (a, b) = (rng.random_range(0..10), rng.random_range(0..10));
            SftDemo {
                image_id: None,
                prompt: format!("Q:{a}+{b} A:"),
                answer: (a + b).to_string(),
            }
        })
        .collect()
}

/// Two-candidate task: is the number odd or even. Gold labels are exactly
/// balanced and shuffled.
pub fn parity_task(n_items: usize, seed: u64) -> EvalTask {
    let mut rng = SeedStream::new(seed).derive("parity").rng();
    let mut parities: Vec<usize> = (0..n_items).map(|i| i % 2).collect();
    parities.shuffle(&mut rng);
    let items = parities
        .into_iter()
        .enumerate()
        .map(|(i, parity)| {
            let n = 2 * rng.random_range(0..500) + parity;
            EvalItem {
                item_id: format!("parity{i:04}"),
                image_id: None,
                prompt: format!("Q:{n} odd? A:"),
                answer: if parity == 1 { "odd" } else { "even" }.into(),
                candidates: vec!["odd".into(), "even".into()],
            }
        })
        .collect();
    EvalTask {
        name: "parity".into(),
        metric: Metric::CandidateRank,
        items,
        demo_pool: Vec::new(),
    }
}

/// Image-grounded exact-match task over the topic classes.
pub fn class_task(n_items: usize, seed: u64) -> EvalTask {
    let mut all: Vec<EvalItem> = class_demos(n_items + 16, seed)
        .into_iter()
        .enumerate()
        .map(|(i, d)| EvalItem {
            item_id: format!("class{i:04}"),
            image_id: d.image_id,
            prompt: d.prompt,
            answer: d.answer,
            candidates: Vec::new(),
        })
        .collect();
    let items = all.split_off(16);
    EvalTask {
        name: "class".into(),
        metric: Metric::ExactMatch,
        items,
        demo_pool: all,
    }
}

/// Everything the preset recipes read: topic documents, their best-match
/// pairs, and both instruction sets.
pub fn recipe_corpora(n_docs: usize, seed: u64) -> Result<Corpora> {
    let docs = topic_corpus(n_docs, 3, seed);
    let mut pairs = Vec::new();
    for d in &docs {
        pairs.extend(to_pairs(d, PairPolicy::BestSim)?);
    }
    Ok(Corpora::new()
        .with_docs(corpus_names::INTERLEAVED, docs)
        .with_pairs(corpus_names::PAIRS, &pairs)
        .with_demos(corpus_names::SFT_VISUAL, class_demos(n_docs, seed))
        .with_demos(corpus_names::SFT_TEXT, arithmetic_demos(n_docs, seed)))
}
