//! Independent reference implementations used as test oracles.

use rand::Rng;
use vlmforge::corpus::{InterleavedDocument, PairSample, Segment};
use vlmforge::rng::Rng as ChaRng;

/// Random document. Scores are drawn from a coarse grid so ties happen.
pub fn random_doc(rng: &mut ChaRng, id: usize, scored: bool) -> InterleavedDocument {
    let n = rng.random_range(1..=10);
    let mut kinds: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
    if !kinds.iter().any(|&k| !k) {
        kinds[0] = false;
    }
    let texts: Vec<usize> = (0..n).filter(|&i| !kinds[i]).collect();
    let segments = kinds
        .iter()
        .enumerate()
        .map(|(i, &is_img)| {
            if is_img {
                let id = format!("im{id}-{i}");
                if scored {
                    let mut scores = Vec::new();
                    for &t in &texts {
                        if rng.random_bool(0.8) {
                            scores.push((t, rng.random_range(-4..=4) as f64 / 4.0));
                        }
                    }
                    if scores.is_empty() {
                        scores.push((texts[0], 0.0));
                    }
                    Segment::image_scored(id, &scores)
                } else {
                    Segment::image(id)
                }
            } else {
                Segment::text(format!("text {id} {i} {}", rng.random_range(0..1000)))
            }
        })
        .collect();
    InterleavedDocument::new(format!("doc{id}"), segments)
}

/// Pairs by exhaustive scan over all segments.
pub fn pairs_oracle(doc: &InterleavedDocument, best_sim: bool) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for (i, seg) in doc.segments.iter().enumerate() {
        let Segment::Image(im) = seg else { continue };
        let chosen = if best_sim {
            let scores = im.sim_scores.as_ref().expect("scored");
            let mut best: Option<(usize, f64)> = None;
            for j in 0..doc.segments.len() {
                if let Some(&s) = scores.get(&j) {
                    match best {
                        Some((_, b)) if s <= b => {}
                        _ => best = Some((j, s)),
                    }
                }
            }
            best.map(|(j, _)| j)
        } else {
            (i + 1..doc.segments.len()).find(|&j| !doc.segments[j].is_image())
        };
        if let Some(j) = chosen {
            out.push((im.image_id.clone(), doc.segments[j].as_text().unwrap().to_string()));
        }
    }
    out
}

/// Full sort, then truncate.
pub fn topk_oracle(pairs: &[PairSample], k: usize) -> Vec<PairSample> {
    let mut v: Vec<(usize, &PairSample)> = pairs.iter().enumerate().filter(|(_, p)| p.clip_score.is_finite()).collect();
    v.sort_by(|(ia, a), (ib, b)| {
        b.clip_score
            .partial_cmp(&a.clip_score)
            .unwrap()
            .then(a.image_id.cmp(&b.image_id))
            .then(ia.cmp(ib))
    });
    v.into_iter().take(k).map(|(_, p)| p.clone()).collect()
}

/// Random pairs on a coarse score grid with repeated ids, so ties on both
/// keys occur.
pub fn random_pairs(rng: &mut ChaRng, n: usize) -> Vec<PairSample> {
    (0..n)
        .map(|i| {
            PairSample::new(
                format!("img{:03}", rng.random_range(0..300)),
                format!("caption {i}"),
                rng.random_range(0..50) as f64 / 50.0,
            )
        })
        .collect()
}

/// Stable partition: images in order, then texts in order.
pub fn stable_partition_oracle(doc: &InterleavedDocument) -> Vec<String> {
    let label = |s: &Segment| match s {
        Segment::Image(im) => format!("I:{}", im.image_id),
        Segment::Text(t) => format!("T:{}", t.text),
    };
    let mut out: Vec<String> = doc.segments.iter().filter(|s| s.is_image()).map(label).collect();
    out.extend(doc.segments.iter().filter(|s| !s.is_image()).map(label));
    out
}

/// Counts (docs, images, text bytes) straight from JSONL text without the
/// library's types.
pub fn recount_jsonl(text: &str) -> (usize, usize, usize) {
    let (mut docs, mut images, mut bytes) = (0, 0, 0);
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        docs += 1;
        for seg in v["segments"].as_array().unwrap() {
            if seg.get("image_id").is_some() {
                images += 1;
            } else {
                bytes += seg["text"].as_str().unwrap().len();
            }
        }
    }
    (docs, images, bytes)
}

/// Symmetric Chamfer cosine by explicit double loops.
pub fn chamfer_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let cos = |x: &[f64], y: &[f64]| {
        let mut d = 0.0;
        let mut nx = 0.0;
        let mut ny = 0.0;
        for k in 0..x.len() {
            d += x[k] * y[k];
            nx += x[k] * x[k];
            ny += y[k] * y[k];
        }
        d / (nx.sqrt() * ny.sqrt())
    };
    let mut ab = 0.0;
    for x in a {
        let mut m = f64::NEG_INFINITY;
        for y in b {
            m = m.max(cos(x, y));
        }
        ab += m;
    }
    let mut ba = 0.0;
    for y in b {
        let mut m = f64::NEG_INFINITY;
        for x in a {
            m = m.max(cos(x, y));
        }
        ba += m;
    }
    0.5 * (ab / a.len() as f64 + ba / b.len() as f64)
}

pub fn random_set(rng: &mut ChaRng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn rows(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(|r| r.as_slice()).collect()
}
