mod common;

use common::oracles::{chamfer_oracle, random_set, rows};
use vlmforge::diagnostics::*;
use vlmforge::fixture::topic_corpus;
use vlmforge::images::SyntheticImages;
use vlmforge::model::{Model, ModelConfig};
use vlmforge::packing::{pack_document, Modality, Tokenizer};
use vlmforge::rng::SeedStream;

#[test]
fn self_and_orthogonal_sets() {
    let mut rng = SeedStream::new(1).rng();
    for n in 1..10 {
        let a = random_set(&mut rng, n, 7);
        let v = chamfer_cosine(&rows(&a), &rows(&a)).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }
    for dim in 2..8 {
        for i in 0..dim {
            for j in (0..dim).filter(|&j| j != i) {
                let mut a = vec![0.0; dim];
                let mut b = vec![0.0; dim];
                a[i] = 1.0;
                b[j] = 1.0;
                assert!(chamfer_cosine(&[&a], &[&b]).unwrap().abs() < 1e-12);
            }
        }
    }
}

#[test]
fn matches_double_loop_oracle() {
    let mut rng = SeedStream::new(2).rng();
    for i in 0..100 {
        let (na, nb) = if i == 0 { (8, 5) } else { (1 + i % 11, 1 + (i * 7) % 13) };
        let a = random_set(&mut rng, na, 16);
        let b = random_set(&mut rng, nb, 16);
        let got = chamfer_cosine(&rows(&a), &rows(&b)).unwrap();
        let want = chamfer_oracle(&a, &b);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn power_of_two_rescaling_is_bit_exact() {
    let mut rng = SeedStream::new(3).rng();
    for _ in 0..100 {
        let a = random_set(&mut rng, 6, 16);
        let b = random_set(&mut rng, 4, 16);
        let base = chamfer_cosine(&rows(&a), &rows(&b)).unwrap();
        for c in [0.25, 2.0, 1024.0] {
            let s: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|x| x * c).collect()).collect();
            assert_eq!(chamfer_cosine(&rows(&s), &rows(&b)).unwrap().to_bits(), base.to_bits());
        }
        // Other factors round the scaled inputs themselves.
        let s: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|x| x * 5.0).collect()).collect();
        assert!((chamfer_cosine(&rows(&s), &rows(&b)).unwrap() - base).abs() < 1e-15);
    }
}

#[test]
fn bad_inputs_are_errors() {
    let e = [1.0, 0.0];
    let short = [1.0];
    assert!(chamfer_cosine(&[], &[&e]).is_err());
    assert!(chamfer_cosine(&[&e], &[&short]).is_err());
    assert!(chamfer_cosine(&[&[0.0, 0.0]], &[&e]).is_err());
    assert!(chamfer_cosine(&[&[f64::NAN, 1.0]], &[&e]).is_err());
}

#[test]
fn identity_model_profile_is_one() {
    let cfg = ModelConfig::tiny();
    let mut model = Model::new(cfg.clone()).unwrap();
    for l in 0..cfg.llm_layers {
        for s in ["out.w", "out.b", "fc2.w", "fc2.b"] {
            model.params_mut().get_mut(&format!("llm.blocks.{l}.{s}")).unwrap().data.fill(0.0);
        }
    }
    let md = cfg.model_dim;
    let tok = model.params().get("embed.tok").unwrap().data.clone();
    let text: Vec<u32> = "hello".bytes().map(u32::from).collect();
    let mut x0 = Vec::new();
    let mut modality = Vec::new();
    for (i, &t) in text.iter().enumerate() {
        x0.extend_from_slice(&tok[t as usize * md..(t as usize + 1) * md]);
        modality.push(Modality::Text);
        // Image rows are copies of text rows.
        if i % 2 == 0 {
            x0.extend_from_slice(&tok[t as usize * md..(t as usize + 1) * md]);
            modality.push(Modality::Image);
        }
    }
    let trace = model.forward_embeddings(x0, modality).unwrap();
    let p = profile_from_traces(&[trace], ChamferVariant::AToB, "identity").unwrap();
    assert_eq!(p.layers.len(), cfg.llm_layers + 1);
    for v in &p.layers {
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }
}

#[test]
fn profile_shape_and_scaling() {
    let cfg = ModelConfig { max_positions: 64, ..ModelConfig::tiny() };
    let model = Model::new(cfg.clone()).unwrap();
    let batch: Vec<_> = topic_corpus(6, 2, 4)
        .iter()
        .map(|d| pack_document(d, &Tokenizer::new(), &cfg.geometry(), 64).unwrap().remove(0))
        .collect();
    let p = alignment_profile(&model, &batch, &SyntheticImages, ChamferVariant::Symmetric, "t").unwrap();
    assert_eq!(p.layers.len(), cfg.llm_layers + 1);
    assert_eq!(p.sample_count, 6);
    assert!(p.layers.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
    let csv = p.to_csv();
    assert!(csv.starts_with("layer,chamfer_cos,n\n0,"));
    assert_eq!(csv.lines().count(), cfg.llm_layers + 2);

    let mut traces: Vec<_> = batch.iter().map(|s| model.forward(s, &SyntheticImages).unwrap()).collect();
    for t in &mut traces {
        t.hidden.iter_mut().flatten().for_each(|v| *v *= 4.0);
    }
    let scaled = profile_from_traces(&traces, ChamferVariant::Symmetric, "t").unwrap();
    assert_eq!(scaled, p);
    for t in &mut traces {
        t.hidden.iter_mut().flatten().for_each(|v| *v *= 1.25);
    }
    let scaled = profile_from_traces(&traces, ChamferVariant::Symmetric, "t").unwrap();
    for (a, b) in scaled.layers.iter().zip(&p.layers) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn single_modality_batch_is_an_error() {
    let cfg = ModelConfig::tiny();
    let model = Model::new(cfg.clone()).unwrap();
    let doc = vlmforge::corpus::InterleavedDocument::new("t", vec![vlmforge::corpus::Segment::text("just words")]);
    let batch = pack_document(&doc, &Tokenizer::new(), &cfg.geometry(), 32).unwrap();
    let err = alignment_profile(&model, &batch, &SyntheticImages, ChamferVariant::Symmetric, "t").unwrap_err();
    assert!(err.to_string().contains("both"), "{err}");
}
