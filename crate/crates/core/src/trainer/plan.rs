use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamGroup, ParameterStore, ProjectorVariant};

/// The set of parameter groups that receive updates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub trainable: BTreeSet<ParamGroup>,
}

impl FreezePolicy {
    pub fn new(groups: impl IntoIterator<Item = ParamGroup>) -> Self {
        Self {
            trainable: groups.into_iter().collect(),
        }
    }

    pub fn projector_only() -> Self {
        Self::new([ParamGroup::Projector])
    }

    /// Projector and the whole language model; the vision encoder stays frozen.
    pub fn train_llm() -> Self {
        Self::new([ParamGroup::Projector, ParamGroup::Llm, ParamGroup::Embed, ParamGroup::Head])
    }

    pub fn all() -> Self {
        Self::new(ParamGroup::ALL)
    }

    pub fn is_trainable(&self, g: ParamGroup) -> bool {
        self.trainable.contains(&g)
    }

    pub fn validate(&self, store: &ParameterStore) -> Result<()> {
        for g in &self.trainable {
            if store.group_scalars(*g) == 0 {
                return Err(Error::Config(format!("policy names group {g}, which has no parameters")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    InitProjector,
    Pretrain,
    Sft,
}

impl StageKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StageKind::InitProjector => "init-projector",
            StageKind::Pretrain => "pretrain",
            StageKind::Sft => "sft",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub corpus: String,
    /// Share of *images* drawn from this corpus.
    pub proportion: f64,
}

/// Where a stage's samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSpec {
    /// Documents blended across corpora by image proportion.
    Blend { sources: Vec<SourceSpec> },
    /// Instruction demos; a `text_only_fraction` share of samples come from
    /// the text-only set.
    Sft {
        visual: String,
        #[serde(default)]
        text_only: Option<String>,
        #[serde(default)]
        text_only_fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: StageKind,
    pub policy: FreezePolicy,
    pub data: DataSpec,
    pub steps: usize,
    pub lr: f64,
    /// Defaults to 3% of `steps`.
    #[serde(default)]
    pub warmup: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_batch() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub model: ModelConfig,
    /// Maximum packed sequence length; defaults to `model.max_positions`.
    #[serde(default)]
    pub max_len: Option<usize>,
    pub stages: Vec<StageSpec>,
}

impl StagePlan {
    pub fn max_len(&self) -> usize {
        self.max_len.unwrap_or(self.model.max_positions)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.max_len() > self.model.max_positions {
            return Err(Error::Config("max_len exceeds max_positions".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.batch_size == 0 {
                return Err(Error::Config(format!("stage {i} has batch_size 0")));
            }
            if !(s.lr.is_finite() && s.lr >= 0.0) {
                return Err(Error::Config(format!("stage {i} has learning rate {}", s.lr)));
            }
            if let DataSpec::Sft { text_only, text_only_fraction, .. } = &s.data {
                if !(0.0..=1.0).contains(text_only_fraction) {
                    return Err(Error::Config(format!("stage {i}: text_only_fraction outside [0, 1]")));
                }
                if *text_only_fraction > 0.0 && text_only.is_none() {
                    return Err(Error::Config(format!("stage {i}: text_only_fraction without a text_only set")));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: StagePlan = serde_json::from_str(text).map_err(|e| Error::Config(format!("plan: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }
}

/// Corpus names used by the presets.
pub mod corpus_names {
    /// Interleaved documents.
    pub const INTERLEAVED: &str = "a";
    /// Image-caption pairs, as two-segment documents.
    pub const PAIRS: &str = "b";
    /// Visual instruction demos.
    pub const SFT_VISUAL: &str = "sft";
    /// Text-only instruction demos.
    pub const SFT_TEXT: &str = "sft-text";
}

/// The four train-vs-freeze configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Freeze the language model in both pre-training and SFT.
    A,
    /// Freeze during pre-training, train during SFT.
    B,
    /// Train in both, transformer-block projector.
    C,
    /// Train in both, linear projector.
    D,
}

/// Step counts and learning rates for presets. These are desk-scale
/// defaults, not values from any published run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PresetBudget {
    pub init_steps: usize,
    pub pretrain_steps: usize,
    pub sft_steps: usize,
    pub batch_size: usize,
    pub text_only_fraction: f64,
}

impl Default for PresetBudget {
    fn default() -> Self {
        Self {
            init_steps: 50,
            pretrain_steps: 200,
            sft_steps: 50,
            batch_size: 8,
            text_only_fraction: 0.25,
        }
    }
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::A, Preset::B, Preset::C, Preset::D];

    pub fn label(&self) -> &'static str {
        match self {
            Preset::A => "a",
            Preset::B => "b",
            Preset::C => "c",
            Preset::D => "d",
        }
    }

    pub fn projector(&self) -> ProjectorVariant {
        match self {
            Preset::D => ProjectorVariant::Linear,
            _ => ProjectorVariant::TransformerBlock { heads: 2 },
        }
    }

    pub fn pretrain_policy(&self) -> FreezePolicy {
        match self {
            Preset::A | Preset::B => FreezePolicy::projector_only(),
            Preset::C | Preset::D => FreezePolicy::train_llm(),
        }
    }

    pub fn sft_policy(&self) -> FreezePolicy {
        match self {
            Preset::A => FreezePolicy::projector_only(),
            _ => FreezePolicy::train_llm(),
        }
    }

    pub fn plan(&self, model: ModelConfig, budget: PresetBudget) -> StagePlan {
        use corpus_names::*;
        let model = model.with_projector(self.projector());
        let stage = |name, policy, data, steps, lr| StageSpec {
            name,
            policy,
            data,
            steps,
            lr,
            warmup: None,
            batch_size: budget.batch_size,
        };
        StagePlan {
            model,
            max_len: None,
            stages: vec![
                stage(
                    StageKind::InitProjector,
                    FreezePolicy::projector_only(),
                    DataSpec::Blend {
                        sources: vec![SourceSpec { corpus: PAIRS.into(), proportion: 1.0 }],
                    },
                    budget.init_steps,
                    3e-3,
                ),
                stage(
                    StageKind::Pretrain,
                    self.pretrain_policy(),
                    DataSpec::Blend {
                        sources: vec![
                            SourceSpec { corpus: INTERLEAVED.into(), proportion: 0.5 },
                            SourceSpec { corpus: PAIRS.into(), proportion: 0.5 },
                        ],
                    },
                    budget.pretrain_steps,
                    2e-3,
                ),
                stage(
                    StageKind::Sft,
                    self.sft_policy(),
                    DataSpec::Sft {
                        visual: SFT_VISUAL.into(),
                        text_only: Some(SFT_TEXT.into()),
                        text_only_fraction: budget.text_only_fraction,
                    },
                    budget.sft_steps,
                    1e-3,
                ),
            ],
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" | "freeze-llm-both" => Ok(Preset::A),
            "b" | "freeze-pret-train-sft" => Ok(Preset::B),
            "c" | "train-both-transformer" => Ok(Preset::C),
            "d" | "train-both-linear" => Ok(Preset::D),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}
