use serde::{Deserialize, Serialize};

use super::{ImageSlot, Modality, PackedSample, SlotGeometry, StageTag, Tokenizer};
use crate::corpus::{InterleavedDocument, Segment};
use crate::error::{Error, Result};

/// An instruction-tuning demonstration. Text-only when `image_id` is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftDemo {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    pub prompt: String,
    pub answer: String,
}

pub(crate) struct Builder {
    stage: StageTag,
    tokens: Vec<u32>,
    modality: Vec<Modality>,
    slots: Vec<ImageSlot>,
}

impl Builder {
    pub(crate) fn new(stage: StageTag) -> Self {
        let mut b = Self {
            stage,
            tokens: Vec::new(),
            modality: Vec::new(),
            slots: Vec::new(),
        };
        b.push_text(&[Tokenizer::BOS]);
        b
    }

    pub(crate) fn len(&self) -> usize {
        self.tokens.len()
    }

    pub(crate) fn push_text(&mut self, ids: &[u32]) {
        self.tokens.extend_from_slice(ids);
        self.modality.extend(std::iter::repeat_n(Modality::Text, ids.len()));
    }

    pub(crate) fn push_image(&mut self, image_id: &str, length: usize) {
        self.slots.push(ImageSlot {
            start: self.tokens.len(),
            length,
            image_id: image_id.to_string(),
        });
        self.tokens.extend(std::iter::repeat_n(Tokenizer::IMG, length));
        self.modality.extend(std::iter::repeat_n(Modality::Image, length));
    }

    /// Standard next-token targets: every text position after the first.
    pub(crate) fn finish(self) -> PackedSample {
        let loss_mask = self
            .modality
            .iter()
            .enumerate()
            .map(|(i, &m)| i > 0 && m == Modality::Text)
            .collect();
        PackedSample {
            tokens: self.tokens,
            modality: self.modality,
            loss_mask,
            image_slots: self.slots,
            stage: self.stage,
        }
    }
}

/// Pack one document into one or more sequences of at most `max_len`
/// tokens. BOS opens every sequence and EOS closes the document. Splits
/// happen at segment boundaries; a text segment longer than a whole
/// sequence is cut between tokens. Image slots are never cut.
pub fn pack_document(
    doc: &InterleavedDocument,
    tok: &Tokenizer,
    geometry: &SlotGeometry,
    max_len: usize,
) -> Result<Vec<PackedSample>> {
    let slot = geometry.slot_len();
    if max_len < slot + 3 {
        return Err(Error::Config(format!(
            "max_len {max_len} cannot hold an image slot of {slot} tokens plus BOS/EOS"
        )));
    }
    let mut out = Vec::new();
    let mut cur = Builder::new(StageTag::Pretrain);
    let last = doc.segments.len().saturating_sub(1);
    for (idx, seg) in doc.segments.iter().enumerate() {
        let reserve = usize::from(idx == last);
        match seg {
            Segment::Image(im) => {
                if cur.len() + slot + reserve > max_len {
                    out.push(std::mem::replace(&mut cur, Builder::new(StageTag::Pretrain)).finish());
                }
                cur.push_image(&im.image_id, slot);
            }
            Segment::Text(t) => {
                let ids = tok.encode(&t.text);
                let mut rest = &ids[..];
                while !rest.is_empty() {
                    let space = max_len - cur.len();
                    if rest.len() + reserve <= space {
                        cur.push_text(rest);
                        rest = &[];
                    } else if cur.len() > 1 {
                        out.push(std::mem::replace(&mut cur, Builder::new(StageTag::Pretrain)).finish());
                    } else {
                        let take = space.min(rest.len());
                        cur.push_text(&rest[..take]);
                        rest = &rest[take..];
                        out.push(std::mem::replace(&mut cur, Builder::new(StageTag::Pretrain)).finish());
                    }
                }
            }
        }
    }
    if cur.len() + 1 > max_len {
        out.push(std::mem::replace(&mut cur, Builder::new(StageTag::Pretrain)).finish());
    }
    cur.push_text(&[Tokenizer::EOS]);
    out.push(cur.finish());
    Ok(out)
}

/// Pack an instruction demo as `[BOS, slot?, prompt, answer, EOS]` with loss
/// only on the answer and EOS.
pub fn pack_sft(demo: &SftDemo, tok: &Tokenizer, geometry: &SlotGeometry) -> Result<PackedSample> {
    if demo.prompt.is_empty() || demo.answer.is_empty() {
        return Err(Error::Invalid("instruction demo needs a prompt and an answer".into()));
    }
    let mut b = Builder::new(StageTag::Sft);
    if let Some(id) = &demo.image_id {
        b.push_image(id, geometry.slot_len());
    }
    b.push_text(&tok.encode(&demo.prompt));
    let answer_start = b.len();
    b.push_text(&tok.encode(&demo.answer));
    b.push_text(&[Tokenizer::EOS]);
    let mut s = b.finish();
    for (i, m) in s.loss_mask.iter_mut().enumerate() {
        *m = i >= answer_start;
    }
    Ok(s)
}

/// Shift a sample into aligned (target, mask) arrays: position `i` of the
/// output is the target for the logits at position `i`.
pub fn next_token_targets(sample: &PackedSample) -> (Vec<u32>, Vec<bool>) {
    let n = sample.len();
    let mut targets = vec![Tokenizer::PAD; n];
    let mut mask = vec![false; n];
    for i in 0..n.saturating_sub(1) {
        targets[i] = sample.tokens[i + 1];
        mask[i] = sample.loss_mask[i + 1];
    }
    (targets, mask)
}
