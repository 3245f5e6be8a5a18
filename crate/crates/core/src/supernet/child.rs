use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ops::SearchSpace;

/// A single path through the super-net: one operator index per layer.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChildModel(Vec<usize>);

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ChildError {
    #[error("child has {got} layers, space has {expected}")]
    Length { got: usize, expected: usize },
    #[error("operator index {index} at layer {layer} is out of range for {candidates} candidates")]
    Index { layer: usize, index: usize, candidates: usize },
    #[error("cannot parse child {0:?}")]
    Parse(String),
}

impl ChildModel {
    pub fn new(ops: Vec<usize>) -> Self {
        Self(ops)
    }

    /// Every layer set to the same operator.
    pub fn uniform_op(num_layers: usize, op: usize) -> Self {
        Self(vec![op; num_layers])
    }

    pub fn ops(&self) -> &[usize] {
        &self.0
    }

    pub fn ops_mut(&mut self) -> &mut [usize] {
        &mut self.0
    }

    pub fn num_layers(&self) -> usize {
        self.0.len()
    }

    pub fn validate(&self, space: &SearchSpace) -> Result<(), ChildError> {
        if self.0.len() != space.num_layers {
            return Err(ChildError::Length { got: self.0.len(), expected: space.num_layers });
        }
        let c = space.num_candidates();
        match self.0.iter().enumerate().find(|(_, &o)| o >= c) {
            Some((layer, &index)) => Err(ChildError::Index { layer, index, candidates: c }),
            None => Ok(()),
        }
    }

    /// Number of layers at which the two children differ.
    pub fn hamming(&self, other: &ChildModel) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count() + self.0.len().abs_diff(other.0.len())
    }

    /// Mixed-radix index in `[0, C^N)`, layer 0 most significant.
    pub fn index(&self, candidates: usize) -> u128 {
        self.0.iter().fold(0u128, |acc, &o| acc * candidates as u128 + o as u128)
    }

    pub fn from_index(mut index: u128, num_layers: usize, candidates: usize) -> Self {
        let mut ops = vec![0; num_layers];
        for slot in ops.iter_mut().rev() {
            *slot = (index % candidates as u128) as usize;
            index /= candidates as u128;
        }
        Self(ops)
    }

    /// Human-readable form using operator labels, e.g. `CONV3-FFN-MHA4`.
    pub fn describe(&self, space: &SearchSpace) -> String {
        let labels = space.labels();
        self.0.iter().map(|&o| labels.get(o).map(String::as_str).unwrap_or("?")).collect::<Vec<_>>().join("-")
    }
}

/// Dot-separated operator indices, e.g. `0.2.1.3`.
impl fmt::Display for ChildModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|o| o.to_string()).collect();
        f.write_str(&parts.join("."))
    }
}

impl FromStr for ChildModel {
    type Err = ChildError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() {
            return Err(ChildError::Parse(s.to_string()));
        }
        s.split(['.', ',', '-'])
            .map(|p| p.trim().parse::<usize>().map_err(|_| ChildError::Parse(s.to_string())))
            .collect::<Result<Vec<_>, _>>()
            .map(Self)
    }
}
