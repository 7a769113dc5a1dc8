//! Cross-modal alignment of hidden states, layer by layer.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::images::ImageSource;
use crate::model::{ForwardTrace, Model};
use crate::packing::{Modality, PackedSample};

/// How pairwise cosines are aggregated into one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChamferVariant {
    /// Average of both nearest-neighbour directions.
    #[default]
    Symmetric,
    /// Mean over A of the best match in B.
    AToB,
    /// Mean over B of the best match in A.
    BToA,
    /// Mean over all pairs, no nearest-neighbour step.
    MeanPairwise,
}

impl ChamferVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            ChamferVariant::Symmetric => "symmetric",
            ChamferVariant::AToB => "a-to-b",
            ChamferVariant::BToA => "b-to-a",
            ChamferVariant::MeanPairwise => "mean-pairwise",
        }
    }
}

impl std::str::FromStr for ChamferVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric" => Ok(Self::Symmetric),
            "a-to-b" => Ok(Self::AToB),
            "b-to-a" => Ok(Self::BToA),
            "mean-pairwise" => Ok(Self::MeanPairwise),
            _ => Err(Error::Config(format!("unknown chamfer variant {s:?}"))),
        }
    }
}

fn unit_rows(set: &[&[f64]], label: &str) -> Result<Vec<Vec<f64>>> {
    if set.is_empty() {
        return Err(Error::Invalid(format!("set {label} is empty")));
    }
    let dim = set[0].len();
    set.iter()
        .enumerate()
        .map(|(i, v)| {
            if v.len() != dim {
                return Err(Error::Shape(format!("set {label} row {i} has length {}", v.len())));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Invalid(format!("set {label} row {i} is a zero or non-finite vector")));
            }
            Ok(v.iter().map(|x| x / norm).collect())
        })
        .collect()
}

/// Chamfer-style similarity of two vector sets in cosine space.
pub fn chamfer_cosine_with(a: &[&[f64]], b: &[&[f64]], variant: ChamferVariant) -> Result<f64> {
    let ua = unit_rows(a, "A")?;
    let ub = unit_rows(b, "B")?;
    if ua[0].len() != ub[0].len() {
        return Err(Error::Shape("sets have different dimensions".into()));
    }
    let cos: Vec<Vec<f64>> = ua
        .iter()
        .map(|x| ub.iter().map(|y| crate::model::nn::dot(x, y).clamp(-1.0, 1.0)).collect())
        .collect();
    let a_to_b = || cos.iter().map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max)).sum::<f64>() / ua.len() as f64;
    let b_to_a = || {
        (0..ub.len())
            .map(|j| cos.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>()
            / ub.len() as f64
    };
    Ok(match variant {
        ChamferVariant::Symmetric => 0.5 * (a_to_b() + b_to_a()),
        ChamferVariant::AToB => a_to_b(),
        ChamferVariant::BToA => b_to_a(),
        ChamferVariant::MeanPairwise => cos.iter().flatten().sum::<f64>() / (ua.len() * ub.len()) as f64,
    })
}

/// Symmetric Chamfer similarity in cosine space.
pub fn chamfer_cosine(a: &[&[f64]], b: &[&[f64]]) -> Result<f64> {
    chamfer_cosine_with(a, b, ChamferVariant::Symmetric)
}

/// Per-layer alignment between image-position and text-position hidden
/// states. Layer 0 is the decoder input.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentProfile {
    pub layers: Vec<f64>,
    pub sample_count: usize,
    pub config_tag: String,
    pub variant: ChamferVariant,
}

impl AlignmentProfile {
    pub fn deepest(&self) -> f64 {
        *self.layers.last().expect("profile has at least one layer")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,chamfer_cos,n\n");
        for (i, v) in self.layers.iter().enumerate() {
            let _ = writeln!(out, "{i},{v:?},{}", self.sample_count);
        }
        out
    }
}

/// Per-layer values for one trace, or `None` if it lacks a modality.
pub fn trace_alignment(trace: &ForwardTrace, variant: ChamferVariant) -> Result<Option<Vec<f64>>> {
    let img: Vec<usize> = (0..trace.len).filter(|&i| trace.modality[i] == Modality::Image).collect();
    let txt: Vec<usize> = (0..trace.len).filter(|&i| trace.modality[i] == Modality::Text).collect();
    if img.is_empty() || txt.is_empty() {
        return Ok(None);
    }
    (0..trace.hidden.len())
        .map(|layer| {
            let a: Vec<&[f64]> = img.iter().map(|&i| trace.hidden_at(layer, i)).collect();
            let b: Vec<&[f64]> = txt.iter().map(|&i| trace.hidden_at(layer, i)).collect();
            chamfer_cosine_with(&a, &b, variant)
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Average the per-sample profiles of the samples that contain both
/// modalities.
pub fn profile_from_traces(traces: &[ForwardTrace], variant: ChamferVariant, config_tag: &str) -> Result<AlignmentProfile> {
    let per: Vec<Option<Vec<f64>>> = traces.iter().map(|t| trace_alignment(t, variant)).collect::<Result<_>>()?;
    let used: Vec<&Vec<f64>> = per.iter().flatten().collect();
    if used.is_empty() {
        return Err(Error::Invalid("no sample has both image and text positions".into()));
    }
    let n_layers = used[0].len();
    let layers = (0..n_layers)
        .map(|l| used.iter().map(|p| p[l]).sum::<f64>() / used.len() as f64)
        .collect();
    Ok(AlignmentProfile {
        layers,
        sample_count: used.len(),
        config_tag: config_tag.to_string(),
        variant,
    })
}

pub fn alignment_profile(
    model: &Model,
    batch: &[PackedSample],
    images: &dyn ImageSource,
    variant: ChamferVariant,
    config_tag: &str,
) -> Result<AlignmentProfile> {
    let traces: Vec<ForwardTrace> = batch.par_iter().map(|s| model.forward(s, images)).collect::<Result<_>>()?;
    profile_from_traces(&traces, variant, config_tag)
}
