//! Naive reference forward pass written directly from the architecture
//! description, sharing no code with the library.

use vlmforge::images::ImageTensor;
use vlmforge::model::{Model, ProjectorVariant};
use vlmforge::packing::{Modality, PackedSample};

type Mat = Vec<Vec<f64>>;

fn param<'a>(m: &'a Model, name: &str) -> &'a [f64] {
    &m.params().get(name).unwrap_or_else(|| panic!("missing {name}")).data
}

fn affine(x: &Mat, w: &[f64], b: &[f64]) -> Mat {
    let out = b.len();
    let inp = w.len() / out;
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), inp);
            (0..out)
                .map(|o| {
                    let mut s = b[o];
                    for i in 0..inp {
                        s += w[o * inp + i] * row[i];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn block(m: &Model, prefix: &str, x: &Mat, heads: usize, causal: bool) -> Mat {
    let p = |s: &str| param(m, &format!("{prefix}.{s}"));
    let d = x[0].len();
    let hd = d / heads;
    let n = x.len();
    let h = norm(x, p("ln1.g"), p("ln1.b"));
    let qkv = affine(&h, p("qkv.w"), p("qkv.b"));
    let mut att = vec![vec![0.0; d]; n];
    for head in 0..heads {
        for i in 0..n {
            let keys: Vec<usize> = if causal { (0..=i).collect() } else { (0..n).collect() };
            let scores: Vec<f64> = keys
                .iter()
                .map(|&j| {
                    (0..hd).map(|k| qkv[i][head * hd + k] * qkv[j][d + head * hd + k]).sum::<f64>() / (hd as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for (idx, &j) in keys.iter().enumerate() {
                for k in 0..hd {
                    att[i][head * hd + k] += e[idx] / z * qkv[j][2 * d + head * hd + k];
                }
            }
        }
    }
    let x1 = add(x, &affine(&att, p("out.w"), p("out.b")));
    let h2 = norm(&x1, p("ln2.g"), p("ln2.b"));
    let f: Mat = affine(&h2, p("fc1.w"), p("fc1.b"))
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    add(&x1, &affine(&f, p("fc2.w"), p("fc2.b")))
}

/// Patch vectors flattened as (row, col, channel), patches in grid order.
pub fn patches(img: &ImageTensor, patch: usize) -> Mat {
    let side = img.resolution / patch;
    let mut out = Vec::new();
    for pr in 0..side {
        for pc in 0..side {
            let mut v = Vec::new();
            for y in 0..patch {
                for x in 0..patch {
                    for c in 0..3 {
                        let (row, col) = (pr * patch + y, pc * patch + x);
                        v.push(img.pixels[(row * img.resolution + col) * 3 + c]);
                    }
                }
            }
            out.push(v);
        }
    }
    out
}

pub fn patch_embed(m: &Model, img: &ImageTensor) -> Mat {
    let vd = m.config().vision_dim;
    let e = affine(&patches(img, m.config().patch), param(m, "vision.patch.w"), param(m, "vision.patch.b"));
    let pos = param(m, "vision.pos");
    e.into_iter()
        .enumerate()
        .map(|(t, r)| r.into_iter().enumerate().map(|(j, v)| v + pos[t * vd + j]).collect())
        .collect()
}

pub fn encode(m: &Model, img: &ImageTensor) -> Mat {
    let mut e = patch_embed(m, img);
    for l in 0..m.config().vision_layers {
        e = block(m, &format!("vision.blocks.{l}"), &e, m.config().heads, false);
    }
    e
}

pub fn project(m: &Model, v: &Mat) -> Mat {
    let w = param(m, "projector.w");
    let b = param(m, "projector.b");
    match m.config().projector {
        ProjectorVariant::Linear => affine(v, w, b),
        ProjectorVariant::TransformerBlock { heads } => affine(&block(m, "projector.block", v, heads, false), w, b),
        ProjectorVariant::Downsample { factor } => {
            let side = (v.len() as f64).sqrt() as usize;
            let mut cat = Vec::new();
            for r in 0..side / factor {
                for c in 0..side / factor {
                    let mut row = Vec::new();
                    for i in 0..factor {
                        for j in 0..factor {
                            row.extend_from_slice(&v[(factor * r + i) * side + factor * c + j]);
                        }
                    }
                    cat.push(row);
                }
            }
            affine(&cat, w, b)
        }
    }
}

/// Returns (hidden states per layer, logits).
pub fn forward(m: &Model, s: &PackedSample, image: impl Fn(&str) -> ImageTensor) -> (Vec<Mat>, Mat) {
    let cfg = m.config();
    let md = cfg.model_dim;
    let tok = param(m, "embed.tok");
    let pos = param(m, "embed.pos");
    let mut x: Mat = (0..s.len())
        .map(|i| {
            if s.modality[i] == Modality::Text {
                let t = s.tokens[i] as usize;
                tok[t * md..(t + 1) * md].to_vec()
            } else {
                vec![0.0; md]
            }
        })
        .collect();
    for slot in &s.image_slots {
        let y = project(m, &encode(m, &image(&slot.image_id)));
        for (k, row) in y.into_iter().enumerate() {
            x[slot.start + k] = row;
        }
    }
    for (i, row) in x.iter_mut().enumerate() {
        for j in 0..md {
            row[j] += pos[i * md + j];
        }
    }
    let mut hidden = vec![x.clone()];
    for l in 0..cfg.llm_layers {
        x = block(m, &format!("llm.blocks.{l}"), &x, cfg.heads, true);
        hidden.push(x.clone());
    }
    let h = norm(&x, param(m, "head.ln.g"), param(m, "head.ln.b"));
    (hidden, affine(&h, param(m, "head.w"), param(m, "head.b")))
}
