//! Token-level packing of documents and instruction demos, and the binary
//! shard format the trainer consumes.

mod pack;
mod shard;
mod tokenizer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) use pack::Builder;
pub use pack::{next_token_targets, pack_document, pack_sft, SftDemo};
pub use shard::{read_shard, write_shard, ShardReader, ShardWriter, SHARD_MAGIC, SHARD_VERSION};
pub use tokenizer::Tokenizer;

/// Visual tokens contributed by one image.
pub fn tokens_per_image(resolution: usize, patch: usize, downsample: usize) -> Result<usize> {
    if patch == 0 || resolution == 0 || resolution % patch != 0 {
        return Err(Error::Config(format!(
            "patch {patch} does not divide resolution {resolution}"
        )));
    }
    let side = resolution / patch;
    if !matches!(downsample, 1 | 2) || side % downsample != 0 {
        return Err(Error::Config(format!(
            "downsample {downsample} does not divide the {side}x{side} token grid"
        )));
    }
    let side = side / downsample;
    Ok(side * side)
}

/// The part of the model configuration that determines image slot length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotGeometry {
    pub resolution: usize,
    pub patch: usize,
    pub downsample: usize,
}

impl SlotGeometry {
    pub fn new(resolution: usize, patch: usize, downsample: usize) -> Result<Self> {
        tokens_per_image(resolution, patch, downsample)?;
        Ok(Self {
            resolution,
            patch,
            downsample,
        })
    }

    pub fn slot_len(&self) -> usize {
        tokens_per_image(self.resolution, self.patch, self.downsample)
            .expect("geometry validated at construction")
    }

    pub fn hash(&self) -> [u8; 32] {
        crate::sha256(
            format!(
                "slot-geometry;res={};patch={};downsample={}",
                self.resolution, self.patch, self.downsample
            )
            .as_bytes(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Modality {
    Text = 0,
    Image = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum StageTag {
    Pretrain = 0,
    Sft = 1,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSlot {
    pub start: usize,
    pub length: usize,
    pub image_id: String,
}

/// One training sequence: tokens with image placeholders, per-position
/// modality and loss flags, and the table binding placeholder runs to
/// image ids. `loss_mask[i]` marks token `i` as a prediction target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSample {
    pub tokens: Vec<u32>,
    pub modality: Vec<Modality>,
    pub loss_mask: Vec<bool>,
    pub image_slots: Vec<ImageSlot>,
    pub stage: StageTag,
}

impl PackedSample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn image_positions(&self) -> usize {
        self.modality.iter().filter(|&&m| m == Modality::Image).count()
    }

    pub fn loss_positions(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Text token ids, specials excluded.
    pub fn text_tokens(&self) -> Vec<u32> {
        self.tokens
            .iter()
            .zip(&self.modality)
            .filter(|(&t, &m)| m == Modality::Text && Tokenizer::is_byte(t))
            .map(|(&t, _)| t)
            .collect()
    }

    /// Check every structural invariant against a slot geometry.
    pub fn validate(&self, geometry: &SlotGeometry) -> Result<()> {
        let n = self.tokens.len();
        let bad = |m: String| Err(Error::Shape(m));
        if self.modality.len() != n || self.loss_mask.len() != n {
            return bad("mask lengths differ from token count".into());
        }
        if n > 0 && self.loss_mask[0] {
            return bad("loss_mask set at position 0".into());
        }
        let mut covered = vec![false; n];
        let slot_len = geometry.slot_len();
        for s in &self.image_slots {
            if s.length != slot_len {
                return bad(format!("slot for {} has length {}, expected {slot_len}", s.image_id, s.length));
            }
            if s.start + s.length > n {
                return bad(format!("slot for {} is out of bounds", s.image_id));
            }
            for c in &mut covered[s.start..s.start + s.length] {
                if *c {
                    return bad("overlapping image slots".into());
                }
                *c = true;
            }
        }
        for i in 0..n {
            let is_img = self.modality[i] == Modality::Image;
            if is_img != covered[i] {
                return bad(format!("position {i}: modality and slot table disagree"));
            }
            if is_img && self.tokens[i] != Tokenizer::IMG {
                return bad(format!("position {i}: image position without IMG id"));
            }
            if is_img && self.loss_mask[i] {
                return bad(format!("position {i}: loss on an image position"));
            }
        }
        Ok(())
    }
}
