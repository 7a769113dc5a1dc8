use rand_distr::{Distribution, Normal};

use super::nn::{self, AttnCache, LnCache};
use super::params::{Gradients, ParameterStore};
use crate::error::Result;
use crate::rng::Rng;

pub(crate) fn gaussian(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Pre-norm residual transformer block: `x + attn(ln1(x))`, then
/// `+ fc2(gelu(fc1(ln2(.))))`.
#[derive(Debug, Clone)]
pub(crate) struct Block {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    out_w: usize,
    out_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
    dim: usize,
    ffn: usize,
    heads: usize,
    causal: bool,
}

pub(crate) struct BlockCache {
    x: Vec<f64>,
    ln1: LnCache,
    h1: Vec<f64>,
    qkv: Vec<f64>,
    attn: AttnCache,
    att: Vec<f64>,
    ln2: LnCache,
    h2: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
}

const SUFFIXES: [&str; 12] = [
    "ln1.g", "ln1.b", "qkv.w", "qkv.b", "out.w", "out.b", "ln2.g", "ln2.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b",
];

impl Block {
    fn shapes(dim: usize, ffn: usize) -> [Vec<usize>; 12] {
        [
            vec![dim],
            vec![dim],
            vec![3 * dim, dim],
            vec![3 * dim],
            vec![dim, dim],
            vec![dim],
            vec![dim],
            vec![dim],
            vec![ffn, dim],
            vec![ffn],
            vec![dim, ffn],
            vec![dim],
        ]
    }

    /// Create and initialize the block's parameters under `prefix`.
    pub(crate) fn register(
        store: &mut ParameterStore,
        prefix: &str,
        dim: usize,
        ffn: usize,
        heads: usize,
        causal: bool,
        std: f64,
        rng: &mut Rng,
    ) -> Result<Block> {
        for (suffix, shape) in SUFFIXES.iter().zip(Self::shapes(dim, ffn)) {
            let n: usize = shape.iter().product();
            let data = match *suffix {
                "ln1.g" | "ln2.g" => vec![1.0; n],
                s if s.ends_with(".w") => gaussian(rng, n, std),
                _ => vec![0.0; n],
            };
            store.add(&format!("{prefix}.{suffix}"), &shape, data)?;
        }
        Self::bind(store, prefix, dim, ffn, heads, causal)
    }

    /// Look up an existing block's parameters, checking shapes.
    pub(crate) fn bind(
        store: &ParameterStore,
        prefix: &str,
        dim: usize,
        ffn: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Block> {
        let mut ids = [0usize; 12];
        for (k, (suffix, shape)) in SUFFIXES.iter().zip(Self::shapes(dim, ffn)).enumerate() {
            ids[k] = super::lookup(store, &format!("{prefix}.{suffix}"), &shape)?;
        }
        let [ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b] = ids;
        Ok(Block {
            ln1_g,
            ln1_b,
            qkv_w,
            qkv_b,
            out_w,
            out_b,
            ln2_g,
            ln2_b,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            dim,
            ffn,
            heads,
            causal,
        })
    }

    pub(crate) fn forward(&self, p: &ParameterStore, x: &[f64]) -> (Vec<f64>, BlockCache) {
        let d = self.dim;
        let n = x.len() / d;
        let (h1, ln1) = nn::layer_norm(x, p.data(self.ln1_g), p.data(self.ln1_b), d);
        let qkv = nn::linear(&h1, p.data(self.qkv_w), Some(p.data(self.qkv_b)), d, 3 * d);
        let (att, attn) = nn::attention(&qkv, n, d, self.heads, self.causal);
        let o = nn::linear(&att, p.data(self.out_w), Some(p.data(self.out_b)), d, d);
        let x1: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
        let (h2, ln2) = nn::layer_norm(&x1, p.data(self.ln2_g), p.data(self.ln2_b), d);
        let f = nn::linear(&h2, p.data(self.fc1_w), Some(p.data(self.fc1_b)), d, self.ffn);
        let g: Vec<f64> = f.iter().map(|&v| nn::gelu(v)).collect();
        let m = nn::linear(&g, p.data(self.fc2_w), Some(p.data(self.fc2_b)), self.ffn, d);
        let y = x1.iter().zip(&m).map(|(a, b)| a + b).collect();
        let cache = BlockCache {
            x: x.to_vec(),
            ln1,
            h1,
            qkv,
            attn,
            att,
            ln2,
            h2,
            f,
            g,
        };
        (y, cache)
    }

    pub(crate) fn backward(&self, p: &ParameterStore, c: &BlockCache, dy: &[f64], grads: &mut Gradients) -> Vec<f64> {
        let d = self.dim;
        let n = c.x.len() / d;
        // MLP branch.
        let (dw, db) = grads.pair(self.fc2_w, self.fc2_b);
        let dg = nn::linear_backward(&c.g, p.data(self.fc2_w), dy, self.ffn, d, dw, Some(db));
        let df: Vec<f64> = dg.iter().zip(&c.f).map(|(g, &f)| g * nn::gelu_grad(f)).collect();
        let (dw, db) = grads.pair(self.fc1_w, self.fc1_b);
        let dh2 = nn::linear_backward(&c.h2, p.data(self.fc1_w), &df, d, self.ffn, dw, Some(db));
        let (dg2, db2) = grads.pair(self.ln2_g, self.ln2_b);
        let dx1_ln = nn::layer_norm_backward(&c.ln2, p.data(self.ln2_g), &dh2, d, dg2, db2);
        let dx1: Vec<f64> = dy.iter().zip(&dx1_ln).map(|(a, b)| a + b).collect();
        // Attention branch.
        let (dw, db) = grads.pair(self.out_w, self.out_b);
        let datt = nn::linear_backward(&c.att, p.data(self.out_w), &dx1, d, d, dw, Some(db));
        let dqkv = nn::attention_backward(&c.qkv, &c.attn, &datt, n, d, self.heads, self.causal);
        let (dw, db) = grads.pair(self.qkv_w, self.qkv_b);
        let dh1 = nn::linear_backward(&c.h1, p.data(self.qkv_w), &dqkv, d, 3 * d, dw, Some(db));
        let (dg1, db1) = grads.pair(self.ln1_g, self.ln1_b);
        let dx_ln = nn::layer_norm_backward(&c.ln1, p.data(self.ln1_g), &dh1, d, dg1, db1);
        dx1.iter().zip(&dx_ln).map(|(a, b)| a + b).collect()
    }
}
