//! Toy auto-regressive visual-language model: a patch-embedding vision
//! encoder, a projector into the language model width, and a causal
//! decoder. Forward passes keep every activation needed for exact
//! reverse-mode gradients, all in f64.

mod block;
mod checkpoint;
mod config;
pub(crate) mod nn;
mod params;

use rand::SeedableRng;

use block::{gaussian, Block, BlockCache};
use nn::LnCache;

use crate::error::{Error, Result};
use crate::images::{ImageSource, ImageTensor};
use crate::packing::{next_token_targets, Modality, PackedSample, Tokenizer};
use crate::rng::Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, CKPT_MAGIC, CKPT_VERSION};
pub use config::{ModelConfig, ProjectorVariant};
pub use params::{Gradients, ParamGroup, ParameterStore, Tensor};

pub(crate) fn lookup(store: &ParameterStore, name: &str, shape: &[usize]) -> Result<usize> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))?;
    let found = &store.tensors()[id].shape;
    if found != shape {
        return Err(Error::Shape(format!("{name}: expected shape {shape:?}, found {found:?}")));
    }
    Ok(id)
}

#[derive(Debug, Clone)]
enum ProjectorLayout {
    Linear { w: usize, b: usize },
    Transformer { block: Block, w: usize, b: usize },
    Downsample { w: usize, b: usize, factor: usize },
}

#[derive(Debug, Clone)]
struct Layout {
    patch_w: usize,
    patch_b: usize,
    vision_pos: usize,
    vision_blocks: Vec<Block>,
    projector: ProjectorLayout,
    tok: usize,
    pos: usize,
    llm_blocks: Vec<Block>,
    head_ln_g: usize,
    head_ln_b: usize,
    head_w: usize,
    head_b: usize,
}

enum ProjCache {
    Linear,
    Transformer { block: BlockCache, z: Vec<f64> },
    Downsample { cat: Vec<f64> },
}

struct ImageCache {
    slot_start: usize,
    patches: Vec<f64>,
    vision: Vec<BlockCache>,
    encoded: Vec<f64>,
    proj: ProjCache,
}

/// Activations of one forward pass.
pub struct ForwardTrace {
    /// `[len, vocab]` row-major.
    pub logits: Vec<f64>,
    /// Decoder input followed by the output of every block, each `[len, model_dim]`.
    pub hidden: Vec<Vec<f64>>,
    pub modality: Vec<Modality>,
    pub len: usize,
    pub vocab: usize,
    pub model_dim: usize,
    tokens: Option<Vec<u32>>,
    images: Vec<ImageCache>,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
    final_h: Vec<f64>,
}

impl ForwardTrace {
    pub fn logits_at(&self, pos: usize) -> &[f64] {
        &self.logits[pos * self.vocab..(pos + 1) * self.vocab]
    }

    pub fn hidden_at(&self, layer: usize, pos: usize) -> &[f64] {
        &self.hidden[layer][pos * self.model_dim..(pos + 1) * self.model_dim]
    }
}

/// Loss and full gradients for one sequence.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub loss: f64,
    pub grads: Gradients,
    /// Number of positions that contributed; zero means the mask was empty
    /// and both loss and gradients are defined as zero.
    pub targets_used: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    params: ParameterStore,
    layout: Layout,
}

impl Model {
    /// Build and initialize a model. Projection weights are Gaussian with
    /// std `0.02 / sqrt(depth)`, embeddings Gaussian with std 0.02, biases
    /// zero and norm gains one; the stream is fixed by `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::seed_from_u64(cfg.seed);
        let mut p = ParameterStore::new();
        let (vd, md) = (cfg.vision_dim, cfg.model_dim);
        let pdim = cfg.patch * cfg.patch * ImageTensor::CHANNELS;
        let vstd = 0.02 / (cfg.vision_layers.max(1) as f64).sqrt();
        let lstd = 0.02 / (cfg.llm_layers as f64).sqrt();

        p.add("vision.patch.w", &[vd, pdim], gaussian(&mut rng, vd * pdim, vstd))?;
        p.add("vision.patch.b", &[vd], vec![0.0; vd])?;
        let np = cfg.patches_per_image();
        p.add("vision.pos", &[np, vd], gaussian(&mut rng, np * vd, 0.02))?;
        for i in 0..cfg.vision_layers {
            Block::register(&mut p, &format!("vision.blocks.{i}"), vd, cfg.ffn_dim, cfg.heads, false, vstd, &mut rng)?;
        }
        if let ProjectorVariant::TransformerBlock { heads } = cfg.projector {
            Block::register(&mut p, "projector.block", vd, cfg.ffn_dim, heads, false, 0.02, &mut rng)?;
        }
        let pin = projector_in(&cfg);
        p.add("projector.w", &[md, pin], gaussian(&mut rng, md * pin, 0.02))?;
        p.add("projector.b", &[md], vec![0.0; md])?;
        let v = cfg.vocab_size;
        p.add("embed.tok", &[v, md], gaussian(&mut rng, v * md, 0.02))?;
        p.add("embed.pos", &[cfg.max_positions, md], gaussian(&mut rng, cfg.max_positions * md, 0.02))?;
        for i in 0..cfg.llm_layers {
            Block::register(&mut p, &format!("llm.blocks.{i}"), md, cfg.ffn_dim, cfg.heads, true, lstd, &mut rng)?;
        }
        p.add("head.ln.g", &[md], vec![1.0; md])?;
        p.add("head.ln.b", &[md], vec![0.0; md])?;
        p.add("head.w", &[v, md], gaussian(&mut rng, v * md, 0.02))?;
        p.add("head.b", &[v], vec![0.0; v])?;
        Self::from_params(cfg, p)
    }

    /// Wrap an existing parameter store, checking every name and shape.
    pub fn from_params(cfg: ModelConfig, params: ParameterStore) -> Result<Self> {
        cfg.validate()?;
        let (vd, md, v) = (cfg.vision_dim, cfg.model_dim, cfg.vocab_size);
        let pdim = cfg.patch * cfg.patch * ImageTensor::CHANNELS;
        let p = &params;
        let vision_blocks = (0..cfg.vision_layers)
            .map(|i| Block::bind(p, &format!("vision.blocks.{i}"), vd, cfg.ffn_dim, cfg.heads, false))
            .collect::<Result<_>>()?;
        let pin = projector_in(&cfg);
        let (pw, pb) = (lookup(p, "projector.w", &[md, pin])?, lookup(p, "projector.b", &[md])?);
        let projector = match cfg.projector {
            ProjectorVariant::Linear => ProjectorLayout::Linear { w: pw, b: pb },
            ProjectorVariant::TransformerBlock { heads } => ProjectorLayout::Transformer {
                block: Block::bind(p, "projector.block", vd, cfg.ffn_dim, heads, false)?,
                w: pw,
                b: pb,
            },
            ProjectorVariant::Downsample { factor } => ProjectorLayout::Downsample { w: pw, b: pb, factor },
        };
        let llm_blocks = (0..cfg.llm_layers)
            .map(|i| Block::bind(p, &format!("llm.blocks.{i}"), md, cfg.ffn_dim, cfg.heads, true))
            .collect::<Result<_>>()?;
        let layout = Layout {
            patch_w: lookup(p, "vision.patch.w", &[vd, pdim])?,
            patch_b: lookup(p, "vision.patch.b", &[vd])?,
            vision_pos: lookup(p, "vision.pos", &[cfg.patches_per_image(), vd])?,
            vision_blocks,
            projector,
            tok: lookup(p, "embed.tok", &[v, md])?,
            pos: lookup(p, "embed.pos", &[cfg.max_positions, md])?,
            llm_blocks,
            head_ln_g: lookup(p, "head.ln.g", &[md])?,
            head_ln_b: lookup(p, "head.ln.b", &[md])?,
            head_w: lookup(p, "head.w", &[v, md])?,
            head_b: lookup(p, "head.b", &[v])?,
        };
        let expected = 12 * (cfg.vision_layers + cfg.llm_layers)
            + 12 * usize::from(matches!(cfg.projector, ProjectorVariant::TransformerBlock { .. }))
            + 11;
        if params.tensors().len() != expected {
            return Err(Error::Shape(format!(
                "parameter store has {} tensors, config implies {expected}",
                params.tensors().len()
            )));
        }
        Ok(Self { cfg, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterStore {
        self.params
    }

    /// Cut an image into non-overlapping patches, `[patches, patch*patch*3]`,
    /// patches in row-major grid order and each flattened as (row, col, channel).
    pub fn patchify(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        let (res, ps) = (self.cfg.resolution, self.cfg.patch);
        if img.resolution != res || img.pixels.len() != res * res * ImageTensor::CHANNELS {
            return Err(Error::Shape(format!(
                "image is {}x{}, model expects {res}x{res}",
                img.resolution, img.resolution
            )));
        }
        let side = res / ps;
        let mut out = Vec::with_capacity(res * res * ImageTensor::CHANNELS);
        for pr in 0..side {
            for pc in 0..side {
                for dy in 0..ps {
                    for dx in 0..ps {
                        for ch in 0..ImageTensor::CHANNELS {
                            out.push(img.at(pr * ps + dy, pc * ps + dx, ch));
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Patch embeddings plus position embeddings, before any encoder block.
    pub fn patch_embed(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        Ok(self.patch_embed_from(&self.patchify(img)?))
    }

    fn patch_embed_from(&self, patches: &[f64]) -> Vec<f64> {
        let p = &self.params;
        let vd = self.cfg.vision_dim;
        let pdim = self.cfg.patch * self.cfg.patch * ImageTensor::CHANNELS;
        let mut e = nn::linear(patches, p.data(self.layout.patch_w), Some(p.data(self.layout.patch_b)), pdim, vd);
        for (v, q) in e.iter_mut().zip(p.data(self.layout.vision_pos)) {
            *v += q;
        }
        e
    }

    /// Visual token embeddings, `[(res/patch)^2, vision_dim]`.
    pub fn encode_image(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        let mut e = self.patch_embed(img)?;
        for b in &self.layout.vision_blocks {
            e = b.forward(&self.params, &e).0;
        }
        Ok(e)
    }

    /// Map visual tokens into the language model width.
    pub fn project(&self, visual: &[f64]) -> Result<Vec<f64>> {
        let want = self.cfg.patches_per_image() * self.cfg.vision_dim;
        if visual.len() != want {
            return Err(Error::Shape(format!("projector input has {} values, expected {want}", visual.len())));
        }
        Ok(self.project_cached(visual.to_vec()).0)
    }

    fn project_cached(&self, encoded: Vec<f64>) -> (Vec<f64>, ProjCache, Vec<f64>) {
        let p = &self.params;
        let (vd, md) = (self.cfg.vision_dim, self.cfg.model_dim);
        match &self.layout.projector {
            ProjectorLayout::Linear { w, b } => {
                let y = nn::linear(&encoded, p.data(*w), Some(p.data(*b)), vd, md);
                (y, ProjCache::Linear, encoded)
            }
            ProjectorLayout::Transformer { block, w, b } => {
                let (z, cache) = block.forward(p, &encoded);
                let y = nn::linear(&z, p.data(*w), Some(p.data(*b)), vd, md);
                (y, ProjCache::Transformer { block: cache, z }, encoded)
            }
            ProjectorLayout::Downsample { w, b, factor } => {
                let cat = self.regroup(&encoded, *factor);
                let y = nn::linear(&cat, p.data(*w), Some(p.data(*b)), factor * factor * vd, md);
                (y, ProjCache::Downsample { cat }, encoded)
            }
        }
    }

    /// Output token `r * (side/f) + c` concatenates input tokens
    /// `(f r + i, f c + j)` for `i, j` in `0..f`, row-major.
    fn regroup(&self, x: &[f64], f: usize) -> Vec<f64> {
        let vd = self.cfg.vision_dim;
        let side = self.cfg.resolution / self.cfg.patch;
        let out_side = side / f;
        let mut out = Vec::with_capacity(x.len());
        for r in 0..out_side {
            for c in 0..out_side {
                for i in 0..f {
                    for j in 0..f {
                        let t = (f * r + i) * side + f * c + j;
                        out.extend_from_slice(&x[t * vd..(t + 1) * vd]);
                    }
                }
            }
        }
        out
    }

    fn ungroup(&self, d: &[f64], f: usize) -> Vec<f64> {
        let vd = self.cfg.vision_dim;
        let side = self.cfg.resolution / self.cfg.patch;
        let out_side = side / f;
        let mut out = vec![0.0; d.len()];
        let mut k = 0;
        for r in 0..out_side {
            for c in 0..out_side {
                for i in 0..f {
                    for j in 0..f {
                        let t = (f * r + i) * side + f * c + j;
                        out[t * vd..(t + 1) * vd].copy_from_slice(&d[k * vd..(k + 1) * vd]);
                        k += 1;
                    }
                }
            }
        }
        out
    }

    fn run_image(&self, img: &ImageTensor, slot_start: usize) -> Result<(Vec<f64>, ImageCache)> {
        let patches = self.patchify(img)?;
        let mut e = self.patch_embed_from(&patches);
        let mut vision = Vec::with_capacity(self.layout.vision_blocks.len());
        for b in &self.layout.vision_blocks {
            let (y, c) = b.forward(&self.params, &e);
            vision.push(c);
            e = y;
        }
        let (y, proj, encoded) = self.project_cached(e);
        Ok((
            y,
            ImageCache {
                slot_start,
                patches,
                vision,
                encoded,
                proj,
            },
        ))
    }

    /// Full forward pass over a packed sample, binding each image slot to
    /// pixels from `images`.
    pub fn forward(&self, sample: &PackedSample, images: &dyn ImageSource) -> Result<ForwardTrace> {
        let n = sample.len();
        let md = self.cfg.model_dim;
        if n == 0 {
            return Err(Error::Shape("empty sample".into()));
        }
        if n > self.cfg.max_positions {
            return Err(Error::Overflow(format!(
                "{n} positions exceed max_positions {}",
                self.cfg.max_positions
            )));
        }
        if let Some(&t) = sample.tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::Invalid(format!("token id {t} outside the vocabulary")));
        }
        sample.validate(&self.cfg.geometry())?;

        let p = &self.params;
        let tok = p.data(self.layout.tok);
        let pos = p.data(self.layout.pos);
        let mut x0 = vec![0.0; n * md];
        for i in 0..n {
            if sample.modality[i] == Modality::Text {
                let t = sample.tokens[i] as usize;
                x0[i * md..(i + 1) * md].copy_from_slice(&tok[t * md..(t + 1) * md]);
            }
        }
        let mut caches = Vec::with_capacity(sample.image_slots.len());
        for slot in &sample.image_slots {
            let img = images
                .image(&slot.image_id, self.cfg.resolution)
                .ok_or_else(|| Error::Invalid(format!("image slot {} is unbound", slot.image_id)))?;
            let (y, cache) = self.run_image(&img, slot.start)?;
            x0[slot.start * md..(slot.start + slot.length) * md].copy_from_slice(&y);
            caches.push(cache);
        }
        for (x, q) in x0.iter_mut().zip(pos) {
            *x += q;
        }
        Ok(self.decode(x0, sample.modality.clone(), Some(sample.tokens.clone()), caches))
    }

    /// Run the decoder on caller-supplied input embeddings `[len, model_dim]`
    /// (used as-is, no position embeddings added).
    pub fn forward_embeddings(&self, x0: Vec<f64>, modality: Vec<Modality>) -> Result<ForwardTrace> {
        if x0.len() != modality.len() * self.cfg.model_dim || modality.is_empty() {
            return Err(Error::Shape("embedding matrix does not match the modality mask".into()));
        }
        Ok(self.decode(x0, modality, None, Vec::new()))
    }

    fn decode(
        &self,
        x0: Vec<f64>,
        modality: Vec<Modality>,
        tokens: Option<Vec<u32>>,
        images: Vec<ImageCache>,
    ) -> ForwardTrace {
        let p = &self.params;
        let (md, v) = (self.cfg.model_dim, self.cfg.vocab_size);
        let n = modality.len();
        let mut hidden = Vec::with_capacity(self.layout.llm_blocks.len() + 1);
        let mut blocks = Vec::with_capacity(self.layout.llm_blocks.len());
        let mut x = x0;
        for b in &self.layout.llm_blocks {
            let (y, c) = b.forward(p, &x);
            hidden.push(x);
            blocks.push(c);
            x = y;
        }
        let (final_h, final_ln) = nn::layer_norm(&x, p.data(self.layout.head_ln_g), p.data(self.layout.head_ln_b), md);
        hidden.push(x);
        let logits = nn::linear(&final_h, p.data(self.layout.head_w), Some(p.data(self.layout.head_b)), md, v);
        ForwardTrace {
            logits,
            hidden,
            modality,
            len: n,
            vocab: v,
            model_dim: md,
            tokens,
            images,
            blocks,
            final_ln,
            final_h,
        }
    }

    fn check_targets(&self, trace: &ForwardTrace, targets: &[u32], mask: &[bool]) -> Result<()> {
        if targets.len() != trace.len || mask.len() != trace.len {
            return Err(Error::Shape(format!(
                "targets/mask lengths {}/{} for a trace of {}",
                targets.len(),
                mask.len(),
                trace.len
            )));
        }
        if let Some((&t, _)) = targets.iter().zip(mask).find(|(&t, &m)| m && t as usize >= trace.vocab) {
            return Err(Error::Invalid(format!("target id {t} outside the vocabulary")));
        }
        Ok(())
    }

    /// Mean masked cross-entropy without gradients.
    pub fn loss(&self, trace: &ForwardTrace, targets: &[u32], mask: &[bool]) -> Result<f64> {
        self.check_targets(trace, targets, mask)?;
        Ok(nn::masked_cross_entropy(&trace.logits, trace.vocab, targets, mask, false).0)
    }

    /// Mean cross-entropy of `logits[i]` against `targets[i]` over positions
    /// with `mask[i]`, and exact gradients for every parameter group.
    pub fn loss_and_grads(&self, trace: &ForwardTrace, targets: &[u32], mask: &[bool]) -> Result<LossGrads> {
        self.check_targets(trace, targets, mask)?;
        let p = &self.params;
        let l = &self.layout;
        let (md, v) = (self.cfg.model_dim, trace.vocab);
        let (loss, dlogits, count) = nn::masked_cross_entropy(&trace.logits, v, targets, mask, true);
        let mut grads = Gradients::zeros_like(p);
        if count == 0 {
            return Ok(LossGrads {
                loss,
                grads,
                targets_used: 0,
            });
        }
        let (dw, db) = grads.pair(l.head_w, l.head_b);
        let dh = nn::linear_backward(&trace.final_h, p.data(l.head_w), &dlogits, md, v, dw, Some(db));
        let (dg, db) = grads.pair(l.head_ln_g, l.head_ln_b);
        let mut dx = nn::layer_norm_backward(&trace.final_ln, p.data(l.head_ln_g), &dh, md, dg, db);
        for (b, c) in l.llm_blocks.iter().zip(&trace.blocks).rev() {
            dx = b.backward(p, c, &dx, &mut grads);
        }
        if let Some(tokens) = &trace.tokens {
            let dpos = grads.get_mut(l.pos);
            for (g, d) in dpos.iter_mut().zip(&dx) {
                *g += d;
            }
            let dtok = grads.get_mut(l.tok);
            for (i, &t) in tokens.iter().enumerate() {
                if trace.modality[i] == Modality::Text {
                    let t = t as usize;
                    nn::axpy(1.0, &dx[i * md..(i + 1) * md], &mut dtok[t * md..(t + 1) * md]);
                }
            }
            for img in &trace.images {
                let len = self.cfg.slot_len();
                let dproj = &dx[img.slot_start * md..(img.slot_start + len) * md];
                self.image_backward(img, dproj, &mut grads);
            }
        }
        Ok(LossGrads {
            loss,
            grads,
            targets_used: count,
        })
    }

    fn image_backward(&self, c: &ImageCache, dproj: &[f64], grads: &mut Gradients) {
        let p = &self.params;
        let (vd, md) = (self.cfg.vision_dim, self.cfg.model_dim);
        let mut d = match (&self.layout.projector, &c.proj) {
            (ProjectorLayout::Linear { w, b }, ProjCache::Linear) => {
                let (dw, db) = grads.pair(*w, *b);
                nn::linear_backward(&c.encoded, p.data(*w), dproj, vd, md, dw, Some(db))
            }
            (ProjectorLayout::Transformer { block, w, b }, ProjCache::Transformer { block: bc, z }) => {
                let (dw, db) = grads.pair(*w, *b);
                let dz = nn::linear_backward(z, p.data(*w), dproj, vd, md, dw, Some(db));
                block.backward(p, bc, &dz, grads)
            }
            (ProjectorLayout::Downsample { w, b, factor }, ProjCache::Downsample { cat }) => {
                let (dw, db) = grads.pair(*w, *b);
                let dcat = nn::linear_backward(cat, p.data(*w), dproj, factor * factor * vd, md, dw, Some(db));
                self.ungroup(&dcat, *factor)
            }
            _ => unreachable!("projector cache matches layout"),
        };
        for (b, bc) in self.layout.vision_blocks.iter().zip(&c.vision).rev() {
            d = b.backward(p, bc, &d, grads);
        }
        for (g, v) in grads.get_mut(self.layout.vision_pos).iter_mut().zip(&d) {
            *g += v;
        }
        let pdim = self.cfg.patch * self.cfg.patch * ImageTensor::CHANNELS;
        let (dw, db) = grads.pair(self.layout.patch_w, self.layout.patch_b);
        nn::linear_backward(&c.patches, p.data(self.layout.patch_w), &d, pdim, vd, dw, Some(db));
    }

    /// Forward plus next-token loss and gradients for a packed sample.
    pub fn sample_loss_and_grads(&self, sample: &PackedSample, images: &dyn ImageSource) -> Result<LossGrads> {
        let trace = self.forward(sample, images)?;
        let (targets, mask) = next_token_targets(sample);
        self.loss_and_grads(&trace, &targets, &mask)
    }

    pub fn sample_loss(&self, sample: &PackedSample, images: &dyn ImageSource) -> Result<f64> {
        let trace = self.forward(sample, images)?;
        let (targets, mask) = next_token_targets(sample);
        self.loss(&trace, &targets, &mask)
    }

    /// Greedy continuation of `prefix`, stopping before EOS.
    pub fn generate(&self, prefix: &PackedSample, images: &dyn ImageSource, max_new: usize) -> Result<Vec<u32>> {
        if prefix.len() + max_new > self.cfg.max_positions {
            return Err(Error::Overflow(format!(
                "prefix of {} plus {max_new} new tokens exceeds max_positions {}",
                prefix.len(),
                self.cfg.max_positions
            )));
        }
        let mut s = prefix.clone();
        let mut out = Vec::new();
        for _ in 0..max_new {
            let trace = self.forward(&s, images)?;
            let next = argmax(trace.logits_at(s.len() - 1)) as u32;
            if next == Tokenizer::EOS {
                break;
            }
            out.push(next);
            s.tokens.push(next);
            s.modality.push(Modality::Text);
            s.loss_mask.push(false);
        }
        Ok(out)
    }
}

fn projector_in(cfg: &ModelConfig) -> usize {
    let f = cfg.projector.downsample();
    f * f * cfg.vision_dim
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
