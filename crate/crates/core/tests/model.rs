mod common;

use std::collections::HashMap;

use common::reference;
use rand::Rng as _;
use vlmforge::corpus::{InterleavedDocument, Segment};
use vlmforge::images::{ImageSource, ImageTensor, SyntheticImages};
use vlmforge::model::*;
use vlmforge::packing::{next_token_targets, pack_document, Modality, PackedSample, Tokenizer};
use vlmforge::rng::SeedStream;

/// Replace every parameter with larger random values so oracles see
/// non-trivial activations.
fn randomize(model: &mut Model, seed: u64, scale: f64) {
    let mut rng = SeedStream::new(seed).rng();
    for t in model.params_mut().tensors_mut() {
        for v in &mut t.data {
            *v = rng.random_range(-scale..scale);
        }
    }
}

fn random_image(res: usize, seed: u64) -> ImageTensor {
    let mut rng = SeedStream::new(seed).rng();
    ImageTensor::new(res, (0..res * res * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn flat(m: &[Vec<f64>]) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

fn big_image_config(projector: ProjectorVariant) -> ModelConfig {
    ModelConfig {
        resolution: 336,
        patch: 14,
        max_positions: 600,
        vision_layers: 0,
        ..ModelConfig::tiny()
    }
    .with_projector(projector)
}

#[test]
fn full_resolution_encoder_shapes() {
    let model = Model::new(big_image_config(ProjectorVariant::Linear)).unwrap();
    let img = random_image(336, 1);
    assert_eq!(model.encode_image(&img).unwrap().len(), 576 * 16);
    let ds = Model::new(big_image_config(ProjectorVariant::Downsample { factor: 2 })).unwrap();
    let v = ds.encode_image(&img).unwrap();
    assert_eq!(ds.project(&v).unwrap().len(), 144 * 16);
    assert_eq!(ds.config().slot_len(), 144);
}

#[test]
fn encoder_matches_straight_line_oracle() {
    let mut model = Model::new(ModelConfig::tiny()).unwrap();
    randomize(&mut model, 2, 0.3);
    let img = random_image(8, 3);
    assert!(max_diff(&model.patch_embed(&img).unwrap(), &flat(&reference::patch_embed(&model, &img))) < 1e-6);
    assert!(max_diff(&model.encode_image(&img).unwrap(), &flat(&reference::encode(&model, &img))) < 1e-6);

    let big = Model::new(big_image_config(ProjectorVariant::Linear)).unwrap();
    let img = random_image(336, 4);
    assert!(max_diff(&big.patch_embed(&img).unwrap(), &flat(&reference::patch_embed(&big, &img))) < 1e-6);
}

#[test]
fn zero_image_zero_weights_zero_embeddings() {
    let mut model = Model::new(ModelConfig::tiny()).unwrap();
    for name in ["vision.patch.w", "vision.patch.b", "vision.pos"] {
        model.params_mut().get_mut(name).unwrap().data.fill(0.0);
    }
    let e = model.patch_embed(&ImageTensor::zeros(8)).unwrap();
    assert!(e.iter().all(|&v| v == 0.0));
}

#[test]
fn linear_identity_projector() {
    let mut model = Model::new(ModelConfig::tiny()).unwrap();
    let d = 16;
    let w = &mut model.params_mut().get_mut("projector.w").unwrap().data;
    w.fill(0.0);
    for i in 0..d {
        w[i * d + i] = 1.0;
    }
    let x: Vec<f64> = (0..16 * d).map(|i| i as f64 * 0.01).collect();
    assert_eq!(model.project(&x).unwrap(), x);
}

#[test]
fn downsample_index_coding_oracle() {
    let cfg = ModelConfig::tiny().with_projector(ProjectorVariant::Downsample { factor: 2 });
    let mut model = Model::new(cfg.clone()).unwrap();
    let (vd, md) = (cfg.vision_dim, cfg.model_dim);
    // Selector weights: output dim k copies input coordinate k of the
    // concatenation, so outputs expose which tokens were grouped.
    let w = &mut model.params_mut().get_mut("projector.w").unwrap().data;
    w.fill(0.0);
    let pin = 4 * vd;
    for k in 0..md {
        w[k * pin + (k * 4) % pin + k / vd] = 1.0;
    }
    let side = 4;
    let coded: Vec<f64> = (0..side * side).flat_map(|t| (0..vd).map(move |j| (t * 1000 + j) as f64)).collect();
    let y = model.project(&coded).unwrap();
    let rows: Vec<Vec<f64>> = coded.chunks(vd).map(|c| c.to_vec()).collect();
    assert_eq!(y, flat(&reference::project(&model, &rows)));
    // Direct index arithmetic for output token (r, c).
    for r in 0..2 {
        for c in 0..2 {
            let members = [(2 * r, 2 * c), (2 * r, 2 * c + 1), (2 * r + 1, 2 * c), (2 * r + 1, 2 * c + 1)];
            let cat: Vec<f64> = members.iter().flat_map(|&(a, b)| rows[a * side + b].clone()).collect();
            let out = &y[(r * 2 + c) * md..(r * 2 + c + 1) * md];
            for k in 0..md {
                assert_eq!(out[k], cat[(k * 4) % pin + k / vd]);
            }
        }
    }
}

fn image_sample(cfg: &ModelConfig, len: usize) -> PackedSample {
    common::sample_with_image(cfg, len)
}

#[test]
fn forward_matches_reference_for_every_projector() {
    for variant in [
        ProjectorVariant::Linear,
        ProjectorVariant::TransformerBlock { heads: 2 },
        ProjectorVariant::Downsample { factor: 2 },
    ] {
        let cfg = ModelConfig::tiny().with_projector(variant);
        let mut model = Model::new(cfg.clone()).unwrap();
        randomize(&mut model, 7, 0.25);
        let sample = if cfg.slot_len() + 4 <= 12 { image_sample(&cfg, 12) } else { image_sample(&cfg, 24) };
        let trace = model.forward(&sample, &SyntheticImages).unwrap();
        let (hidden, logits) = reference::forward(&model, &sample, |id| SyntheticImages::render(id, 8));
        assert_eq!(trace.hidden.len(), cfg.llm_layers + 1);
        for (l, h) in hidden.iter().enumerate() {
            assert!(max_diff(&trace.hidden[l], &flat(h)) < 1e-5, "{variant:?} layer {l}");
        }
        assert!(max_diff(&trace.logits, &flat(&logits)) < 1e-5, "{variant:?}");
    }
    // Text-only, L = 12.
    let mut model = Model::new(ModelConfig::tiny()).unwrap();
    randomize(&mut model, 8, 0.25);
    let doc = InterleavedDocument::new("t", vec![Segment::text("0123456789")]);
    let s = pack_document(&doc, &Tokenizer::new(), &model.config().geometry(), 32).unwrap().remove(0);
    assert_eq!(s.len(), 12);
    let trace = model.forward(&s, &SyntheticImages).unwrap();
    let (_, logits) = reference::forward(&model, &s, |_| unreachable!());
    assert!(max_diff(&trace.logits, &flat(&logits)) < 1e-5);
}

#[test]
fn causality_probe() {
    let cfg = ModelConfig::tiny();
    let mut model = Model::new(cfg.clone()).unwrap();
    randomize(&mut model, 9, 0.2);
    let base = image_sample(&cfg, 24);
    let slot_start = base.image_slots[0].start;
    let t0 = model.forward(&base, &SyntheticImages).unwrap();
    let v = cfg.vocab_size;
    // Swap two future text tokens.
    let (a, b) = (base.len() - 1, base.len() - 3);
    let mut swapped = base.clone();
    swapped.tokens.swap(a, b);
    let t1 = model.forward(&swapped, &SyntheticImages).unwrap();
    assert_eq!(&t0.logits[..b * v], &t1.logits[..b * v]);
    assert_ne!(&t0.logits[b * v..], &t1.logits[b * v..]);
    // Different pixels in the slot: nothing before the slot moves.
    let mut other = HashMap::new();
    other.insert("c2-probe".to_string(), random_image(8, 44));
    let t2 = model.forward(&base, &other).unwrap();
    assert_eq!(&t0.logits[..slot_start * v], &t2.logits[..slot_start * v]);
    assert_ne!(&t0.logits[slot_start * v..], &t2.logits[slot_start * v..]);
}

fn text_sample() -> PackedSample {
    let doc = InterleavedDocument::new("t", vec![Segment::text("plain text only")]);
    pack_document(&doc, &Tokenizer::new(), &ModelConfig::tiny().geometry(), 32).unwrap().remove(0)
}

#[test]
fn text_only_bypasses_vision() {
    let cfg = ModelConfig::tiny();
    let mut a = Model::new(cfg.clone()).unwrap();
    randomize(&mut a, 10, 0.2);
    let mut b = Model::new(cfg.clone().with_seed(99)).unwrap();
    for t in a.params().tensors() {
        if ParamGroup::LANGUAGE.contains(&t.group) {
            b.params_mut().get_mut(&t.name).unwrap().data = t.data.clone();
        }
    }
    let s = text_sample();
    let la = a.forward(&s, &SyntheticImages).unwrap().logits;
    assert_eq!(la, b.forward(&s, &SyntheticImages).unwrap().logits);
    let (_, reference) = reference::forward(&a, &s, |_| unreachable!());
    assert!(max_diff(&la, &flat(&reference)) < 1e-5);

    let g = a.sample_loss_and_grads(&s, &SyntheticImages).unwrap();
    for group in [ParamGroup::Vision, ParamGroup::Projector] {
        assert_eq!(g.grads.group_abs_sum(a.params(), group), 0.0, "{group}");
    }
    assert!(g.grads.group_abs_sum(a.params(), ParamGroup::Llm) > 0.0);
}

struct Scaled(f64);

impl ImageSource for Scaled {
    fn image(&self, id: &str, res: usize) -> Option<ImageTensor> {
        let mut img = SyntheticImages::render(id, res);
        img.pixels.iter_mut().for_each(|p| *p *= self.0);
        Some(img)
    }
}

#[test]
fn pixel_scaling_only_moves_image_inputs() {
    let cfg = ModelConfig::tiny();
    let mut model = Model::new(cfg.clone()).unwrap();
    randomize(&mut model, 11, 0.2);
    let s = image_sample(&cfg, 24);
    let a = model.forward(&s, &Scaled(1.0)).unwrap();
    let b = model.forward(&s, &Scaled(0.5)).unwrap();
    for i in 0..s.len() {
        let same = a.hidden_at(0, i) == b.hidden_at(0, i);
        assert_eq!(same, s.modality[i] == Modality::Text, "position {i}");
    }
}

#[test]
fn projector_parameter_audit() {
    let count = |v: ProjectorVariant| {
        let m = Model::new(ModelConfig::tiny().with_projector(v)).unwrap();
        m.params().group_scalars(ParamGroup::Projector)
    };
    let (vd, md) = (16, 16);
    assert_eq!(count(ProjectorVariant::Linear), vd * md + md);
    assert_eq!(count(ProjectorVariant::Downsample { factor: 2 }), 4 * vd * md + md);
    assert!(count(ProjectorVariant::TransformerBlock { heads: 2 }) > count(ProjectorVariant::Linear));
}

#[test]
fn uniform_logits_give_log_vocab() {
    // The byte tokenizer needs 260 ids, so 256 itself is not constructible.
    for vocab_size in [260, 512] {
        let mut model = Model::new(ModelConfig { vocab_size, ..ModelConfig::tiny() }).unwrap();
        model.params_mut().get_mut("head.w").unwrap().data.fill(0.0);
        let n = 6;
        let trace = model.forward_embeddings(vec![0.1; n * 16], vec![Modality::Text; n]).unwrap();
        let targets: Vec<u32> = (0..n as u32).map(|i| i * 40).collect();
        let loss = model.loss(&trace, &targets, &[true; 6]).unwrap();
        assert!((loss - (vocab_size as f64).ln()).abs() < 1e-12, "{loss}");
    }
}

#[test]
fn masked_targets_do_not_change_loss() {
    let cfg = ModelConfig::tiny();
    let mut model = Model::new(cfg.clone()).unwrap();
    randomize(&mut model, 12, 0.2);
    let s = image_sample(&cfg, 24);
    let trace = model.forward(&s, &SyntheticImages).unwrap();
    let (targets, mask) = next_token_targets(&s);
    let base = model.loss_and_grads(&trace, &targets, &mask).unwrap();
    let mut rng = SeedStream::new(1).rng();
    for _ in 0..20 {
        let mut t = targets.clone();
        for (i, &m) in mask.iter().enumerate() {
            if !m {
                t[i] = rng.random_range(0..260);
            }
        }
        let other = model.loss_and_grads(&trace, &t, &mask).unwrap();
        assert_eq!(other.loss.to_bits(), base.loss.to_bits());
        assert_eq!(other.grads, base.grads);
    }
}

#[test]
fn empty_mask_is_zero_and_flagged() {
    let model = Model::new(ModelConfig::tiny()).unwrap();
    let s = text_sample();
    let trace = model.forward(&s, &SyntheticImages).unwrap();
    let (targets, _) = next_token_targets(&s);
    let r = model.loss_and_grads(&trace, &targets, &vec![false; s.len()]).unwrap();
    assert_eq!((r.loss, r.targets_used), (0.0, 0));
    assert!(r.grads.data.iter().flatten().all(|&g| g == 0.0));
}

#[test]
fn generate_boundaries() {
    let model = Model::new(ModelConfig::tiny()).unwrap();
    let s = text_sample();
    assert!(model.generate(&s, &SyntheticImages, 0).unwrap().is_empty());
    let a = model.generate(&s, &SyntheticImages, 5).unwrap();
    assert_eq!(a, model.generate(&s, &SyntheticImages, 5).unwrap());
    assert!(matches!(
        model.generate(&s, &SyntheticImages, 32),
        Err(vlmforge::Error::Overflow(_))
    ));
}

#[test]
fn unbound_slot_and_overflow_error() {
    let cfg = ModelConfig::tiny();
    let model = Model::new(cfg.clone()).unwrap();
    let s = image_sample(&cfg, 24);
    let empty: HashMap<String, ImageTensor> = HashMap::new();
    assert!(model.forward(&s, &empty).is_err());
    let mut long = text_sample();
    while long.len() <= cfg.max_positions {
        long.tokens.push(b'x' as u32);
        long.modality.push(Modality::Text);
        long.loss_mask.push(true);
    }
    assert!(matches!(model.forward(&long, &SyntheticImages), Err(vlmforge::Error::Overflow(_))));
}

#[test]
fn checkpoint_round_trip_and_guards() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let cfg = ModelConfig::tiny().with_projector(ProjectorVariant::TransformerBlock { heads: 2 });
    let model = Model::new(cfg.clone()).unwrap();
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path, Some(&cfg)).unwrap();
    for (a, b) in model.params().tensors().iter().zip(loaded.params().tensors()) {
        assert_eq!(a.name, b.name);
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(*y, *x as f32 as f64);
        }
    }
    let other = cfg.clone().with_projector(ProjectorVariant::Linear);
    assert!(matches!(load_checkpoint(&path, Some(&other)), Err(vlmforge::Error::Incompatible(_))));
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path, None), Err(vlmforge::Error::Corrupt { .. })));
}
