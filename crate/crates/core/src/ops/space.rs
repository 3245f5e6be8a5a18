use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{OperatorSpec, SpecError};

/// Chain-styled search space: `num_layers` layers, each offering the same
/// ordered list of candidate operators.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub num_layers: usize,
    pub candidates: Vec<OperatorSpec>,
    pub hidden: usize,
    pub vocab: usize,
    pub seq_len: usize,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SpaceError {
    #[error("search space needs at least one layer")]
    NoLayers,
    #[error("search space needs at least two candidate operators, got {0}")]
    TooFewCandidates(usize),
    #[error("duplicate candidate name {0:?}")]
    DuplicateName(String),
    #[error("candidate {name} has hidden {got}, space hidden is {expected}")]
    HiddenMismatch { name: String, got: usize, expected: usize },
    #[error("vocabulary and sequence length must be positive")]
    EmptyData,
    #[error(transparent)]
    Spec(#[from] SpecError),
}

impl SearchSpace {
    pub fn new(num_layers: usize, candidates: Vec<OperatorSpec>, vocab: usize, seq_len: usize) -> Result<Self, SpaceError> {
        let hidden = candidates.first().map(|c| c.hidden).unwrap_or(0);
        let space = Self { num_layers, candidates, hidden, vocab, seq_len };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<(), SpaceError> {
        if self.num_layers == 0 {
            return Err(SpaceError::NoLayers);
        }
        if self.candidates.len() < 2 {
            return Err(SpaceError::TooFewCandidates(self.candidates.len()));
        }
        if self.vocab == 0 || self.seq_len == 0 {
            return Err(SpaceError::EmptyData);
        }
        let mut seen = HashSet::new();
        for c in &self.candidates {
            c.validate()?;
            let name = c.display_name();
            if c.hidden != self.hidden {
                return Err(SpaceError::HiddenMismatch { name, got: c.hidden, expected: self.hidden });
            }
            if !seen.insert(name.clone()) {
                return Err(SpaceError::DuplicateName(name));
            }
        }
        Ok(())
    }

    /// Number of candidate operators per layer.
    pub fn num_candidates(&self) -> usize {
        self.candidates.len()
    }

    /// `C^N`, saturating.
    pub fn num_children(&self) -> u128 {
        (self.num_candidates() as u128).saturating_pow(self.num_layers as u32)
    }

    pub fn labels(&self) -> Vec<String> {
        self.candidates.iter().map(|c| c.display_name()).collect()
    }

    /// Desk-scale analysis default: N=6, d=64, L=32, V=64 with
    /// {MHA4, FFN, CONV3, CONV5}.
    pub fn desk_default() -> Self {
        let d = 64;
        Self::new(
            6,
            vec![
                OperatorSpec::mha(d, 4, d / 2).labeled("MHA4"),
                OperatorSpec::ffn(d, d).labeled("FFN"),
                OperatorSpec::conv(d, 3),
                OperatorSpec::conv(d, 5),
            ],
            64,
            32,
        )
        .expect("valid default space")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_space_is_valid() {
        let s = SearchSpace::desk_default();
        assert_eq!(s.num_children(), 4096);
        assert_eq!(s.labels(), vec!["MHA4", "FFN", "CONV3", "CONV5"]);
    }

    #[test]
    fn rejects_degenerate_spaces() {
        let d = 8;
        assert_eq!(
            SearchSpace::new(2, vec![OperatorSpec::ffn(d, 4)], 8, 4),
            Err(SpaceError::TooFewCandidates(1))
        );
        assert_eq!(
            SearchSpace::new(0, vec![OperatorSpec::ffn(d, 4), OperatorSpec::conv(d, 3)], 8, 4),
            Err(SpaceError::NoLayers)
        );
        assert!(matches!(
            SearchSpace::new(1, vec![OperatorSpec::ffn(d, 4), OperatorSpec::ffn(d, 4)], 8, 4),
            Err(SpaceError::DuplicateName(_))
        ));
        assert!(matches!(
            SearchSpace::new(1, vec![OperatorSpec::ffn(d, 4), OperatorSpec::conv(d + 1, 3)], 8, 4),
            Err(SpaceError::HiddenMismatch { .. })
        ));
    }
}
