use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::packing::{tokens_per_image, SlotGeometry, Tokenizer};

/// Module bridging visual-encoder tokens into the language model width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProjectorVariant {
    /// One affine map per token.
    Linear,
    /// One bidirectional self-attention + FFN block at encoder width, then affine.
    TransformerBlock { heads: usize },
    /// Concatenate each `factor x factor` spatial neighbourhood, then affine.
    Downsample { factor: usize },
}

impl ProjectorVariant {
    pub fn downsample(&self) -> usize {
        match self {
            ProjectorVariant::Downsample { factor } => *factor,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ProjectorVariant::Linear => "linear",
            ProjectorVariant::TransformerBlock { .. } => "transformer-block",
            ProjectorVariant::Downsample { .. } => "downsample",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub resolution: usize,
    pub patch: usize,
    pub vision_dim: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub vision_layers: usize,
    pub llm_layers: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub projector: ProjectorVariant,
    pub max_positions: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// The small configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            resolution: 8,
            patch: 2,
            vision_dim: 16,
            model_dim: 16,
            ffn_dim: 32,
            vision_layers: 2,
            llm_layers: 2,
            heads: 2,
            vocab_size: Tokenizer::VOCAB_SIZE,
            projector: ProjectorVariant::Linear,
            max_positions: 32,
            seed: 0,
        }
    }

    /// Default configuration for desk-scale training runs.
    pub fn desk() -> Self {
        Self {
            resolution: 16,
            patch: 4,
            vision_dim: 24,
            model_dim: 48,
            ffn_dim: 96,
            vision_layers: 1,
            llm_layers: 2,
            heads: 2,
            vocab_size: Tokenizer::VOCAB_SIZE,
            projector: ProjectorVariant::Linear,
            max_positions: 96,
            seed: 0,
        }
    }

    pub fn with_projector(mut self, projector: ProjectorVariant) -> Self {
        self.projector = projector;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Encoder tokens per image before any projector downsampling.
    pub fn patches_per_image(&self) -> usize {
        let side = self.resolution / self.patch;
        side * side
    }

    pub fn geometry(&self) -> SlotGeometry {
        SlotGeometry {
            resolution: self.resolution,
            patch: self.patch,
            downsample: self.projector.downsample(),
        }
    }

    pub fn slot_len(&self) -> usize {
        self.geometry().slot_len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let slot = tokens_per_image(self.resolution, self.patch, self.projector.downsample())?;
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad(format!("model_dim {} not divisible by heads {}", self.model_dim, self.heads));
        }
        if self.vision_dim % self.heads != 0 {
            return bad(format!("vision_dim {} not divisible by heads {}", self.vision_dim, self.heads));
        }
        if let ProjectorVariant::TransformerBlock { heads } = self.projector {
            if heads == 0 || self.vision_dim % heads != 0 {
                return bad(format!("projector heads {heads} do not divide vision_dim {}", self.vision_dim));
            }
        }
        if let ProjectorVariant::Downsample { factor } = self.projector {
            if factor != 2 {
                return bad(format!("downsample factor must be 2, got {factor}"));
            }
        }
        if slot > self.max_positions {
            return bad(format!("{slot} tokens per image exceed max_positions {}", self.max_positions));
        }
        if self.vocab_size < Tokenizer::VOCAB_SIZE {
            return bad(format!("vocab_size {} is smaller than the tokenizer", self.vocab_size));
        }
        if [self.vision_dim, self.model_dim, self.ffn_dim, self.llm_layers].contains(&0) {
            return bad("zero width or depth".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> [u8; 32] {
        crate::sha256(self.to_json().as_bytes())
    }
}
