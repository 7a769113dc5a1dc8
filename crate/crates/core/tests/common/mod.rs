#![allow(dead_code)]

pub mod oracles;
pub mod reference;

use vlmforge::corpus::{InterleavedDocument, Segment};
use vlmforge::images::SyntheticImages;
use vlmforge::model::{Model, ModelConfig, ParamGroup};
use vlmforge::packing::{next_token_targets, pack_document, PackedSample, Tokenizer};

/// A sample of exactly `len` positions containing one image slot.
pub fn sample_with_image(cfg: &ModelConfig, len: usize) -> PackedSample {
    let slot = cfg.slot_len();
    let text_len = len - slot - 2;
    let text = "The cat sat on a warm mat today while it rained outside";
    let head = (text_len / 3).max(1);
    let doc = InterleavedDocument::new(
        "g",
        vec![
            Segment::text(&text[..head]),
            Segment::image("c2-probe"),
            Segment::text(&text[head..text_len]),
        ],
    );
    let s = pack_document(&doc, &Tokenizer::new(), &cfg.geometry(), cfg.max_positions)
        .unwrap()
        .remove(0);
    assert_eq!(s.len(), len);
    s
}

/// Central finite differences against analytic gradients on `per_group`
/// random coordinates of every group. Returns the worst relative error per group.
pub fn gradient_check(
    model: &mut Model,
    sample: &PackedSample,
    per_group: usize,
    eps: f64,
    seed: u64,
) -> Vec<(ParamGroup, f64, usize)> {
    let (targets, mask) = next_token_targets(sample);
    let trace = model.forward(sample, &SyntheticImages).unwrap();
    let analytic = model.loss_and_grads(&trace, &targets, &mask).unwrap().grads;
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
    let mut next = move |n: usize| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state % n as u64) as usize
    };
    let mut out = Vec::new();
    for group in ParamGroup::ALL {
        let ids: Vec<usize> = model
            .params()
            .tensors()
            .iter()
            .enumerate()
            .filter(|(_, t)| t.group == group)
            .map(|(i, _)| i)
            .collect();
        let sizes: Vec<usize> = ids.iter().map(|&i| model.params().tensors()[i].data.len()).collect();
        let total: usize = sizes.iter().sum();
        let mut worst: f64 = 0.0;
        for _ in 0..per_group {
            let mut k = next(total);
            let mut t = 0;
            while k >= sizes[t] {
                k -= sizes[t];
                t += 1;
            }
            let id = ids[t];
            let orig = model.params().tensors()[id].data[k];
            let mut eval = |v: f64| {
                model.params_mut().tensors_mut()[id].data[k] = v;
                let tr = model.forward(sample, &SyntheticImages).unwrap();
                model.loss(&tr, &targets, &mask).unwrap()
            };
            let numeric = (eval(orig + eps) - eval(orig - eps)) / (2.0 * eps);
            model.params_mut().tensors_mut()[id].data[k] = orig;
            let a = analytic.data[id][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        out.push((group, worst, per_group));
    }
    out
}
