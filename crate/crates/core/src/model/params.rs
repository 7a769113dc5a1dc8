use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameter groups; freezing operates on whole groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ParamGroup {
    Vision,
    Projector,
    Llm,
    Embed,
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Vision,
        ParamGroup::Projector,
        ParamGroup::Llm,
        ParamGroup::Embed,
        ParamGroup::Head,
    ];

    /// The groups making up the language model proper.
    pub const LANGUAGE: [ParamGroup; 3] = [ParamGroup::Llm, ParamGroup::Embed, ParamGroup::Head];

    pub fn as_str(&self) -> &'static str {
        match self {
            ParamGroup::Vision => "vision",
            ParamGroup::Projector => "projector",
            ParamGroup::Llm => "llm",
            ParamGroup::Embed => "embed",
            ParamGroup::Head => "head",
        }
    }

    pub fn of(name: &str) -> Option<ParamGroup> {
        let prefix = name.split('.').next()?;
        prefix.parse().ok()
    }
}

impl std::str::FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim_end_matches(".*");
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter group {s:?}")))
    }
}

impl TryFrom<String> for ParamGroup {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ParamGroup> for String {
    fn from(g: ParamGroup) -> String {
        g.as_str().to_string()
    }
}

impl std::fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named flat parameter arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<usize> {
        let group = ParamGroup::of(name).ok_or_else(|| Error::Config(format!("{name} has no group prefix")))?;
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("{name}: shape {shape:?} vs {} values", data.len())));
        }
        let id = self.tensors.len();
        self.tensors.push(Tensor {
            name: name.to_string(),
            group,
            shape: shape.to_vec(),
            data,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(move |i| &mut self.tensors[i])
    }

    #[inline]
    pub(crate) fn data(&self, id: usize) -> &[f64] {
        &self.tensors[id].data
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn group_scalars(&self, group: ParamGroup) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.group == group)
            .map(|t| t.data.len())
            .sum()
    }

    /// SHA-256 over the exact bit patterns of a group's parameters.
    pub fn checksum(&self, group: ParamGroup) -> String {
        use sha2::Digest;
        let mut h = sha2::Sha256::new();
        for t in self.tensors.iter().filter(|t| t.group == group) {
            h.update(t.name.as_bytes());
            for v in &t.data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Gradients aligned index-for-index with a [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub data: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParameterStore) -> Self {
        Self {
            data: store.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    #[inline]
    pub(crate) fn get_mut(&mut self, id: usize) -> &mut [f64] {
        &mut self.data[id]
    }

    /// Two distinct tensors at once (weight and bias).
    pub(crate) fn pair(&mut self, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
        assert_ne!(a, b);
        if a < b {
            let (lo, hi) = self.data.split_at_mut(b);
            (&mut lo[a], &mut hi[0])
        } else {
            let (lo, hi) = self.data.split_at_mut(a);
            (&mut hi[0], &mut lo[b])
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn group_abs_sum(&self, store: &ParameterStore, group: ParamGroup) -> f64 {
        self.data
            .iter()
            .zip(store.tensors())
            .filter(|(_, t)| t.group == group)
            .flat_map(|(g, _)| g.iter())
            .map(|v| v.abs())
            .sum()
    }
}
