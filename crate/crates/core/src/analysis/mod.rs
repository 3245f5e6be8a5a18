//! Interference analysis on a frozen super-net and rank correlation of
//! super-net proxies against standalone training.

mod interference;
mod kendall;

pub use interference::{
    cosine_similarity, curve_csv, interference_point, interference_vs_m, og_layer_sweep, probe_batch, probe_gradients,
    similarity_matrix, Cosine, CurvePoint, GradientVector, InterferenceProbe, SimilarityMatrix,
};
pub use kendall::kendall_tau;

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::supernet::{ChildModel, NetError, SuperNet};
use crate::tasks::{Batch, Task};
use crate::trainer::{evaluate_proxy, train_standalone, StandaloneConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("lists have lengths {left} and {right}")]
    Length { left: usize, right: usize },
    #[error("need at least 2 entries, got {0}")]
    TooFew(usize),
    #[error("NaN in scores")]
    NotANumber,
    #[error("analysis requires a frozen super-net")]
    NotFrozen,
    #[error("invalid probe: {0}")]
    Probe(String),
    #[error("invalid similarity matrix: {0}")]
    Matrix(String),
    #[error("duplicate child {0}")]
    Duplicate(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub children: Vec<ChildModel>,
    pub proxy: Vec<f64>,
    pub truth: Vec<f64>,
    pub tau: f64,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl RankReport {
    pub fn new(children: Vec<ChildModel>, proxy: Vec<f64>, truth: Vec<f64>, config: serde_json::Value) -> Result<Self, AnalysisError> {
        if children.len() != proxy.len() {
            return Err(AnalysisError::Length { left: children.len(), right: proxy.len() });
        }
        let tau = kendall_tau(&proxy, &truth)?;
        Ok(Self { children, proxy, truth, tau, config })
    }
}

fn check_distinct(children: &[ChildModel]) -> Result<(), AnalysisError> {
    if children.len() < 2 {
        return Err(AnalysisError::TooFew(children.len()));
    }
    let mut seen = BTreeSet::new();
    for c in children {
        if !seen.insert(c) {
            return Err(AnalysisError::Duplicate(c.to_string()));
        }
    }
    Ok(())
}

/// Standalone ground truth for each child (parallel over children).
pub fn standalone_truth<T: Scalar>(
    net_space: &crate::ops::SearchSpace,
    children: &[ChildModel],
    task: &Task,
    cfg: &StandaloneConfig,
) -> Result<Vec<f64>, AnalysisError> {
    children
        .par_iter()
        .map(|c| train_standalone::<T>(net_space, c, task, cfg).map(|(_, metric)| metric).map_err(AnalysisError::from))
        .collect()
}

/// Proxy through the shared weights for each child.
pub fn proxies<T: Scalar>(net: &SuperNet<T>, children: &[ChildModel], val: &[Batch]) -> Result<Vec<f64>, AnalysisError> {
    children.par_iter().map(|c| evaluate_proxy(net, c, val).map_err(AnalysisError::from)).collect()
}

/// Correlates super-net proxies with standalone-trained accuracy.
pub fn rank_experiment<T: Scalar>(
    net: &SuperNet<T>,
    children: &[ChildModel],
    task: &Task,
    val: &[Batch],
    cfg: &StandaloneConfig,
) -> Result<RankReport, AnalysisError> {
    check_distinct(children)?;
    let proxy = proxies(net, children, val)?;
    let truth = standalone_truth::<T>(net.space(), children, task, cfg)?;
    let config = serde_json::to_value(cfg).unwrap_or_default();
    RankReport::new(children.to_vec(), proxy, truth, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap().value, 0.0);
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 4.0]).unwrap().value - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap().value - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        let z = cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(z.degenerate && z.value == 0.0);
    }

    #[test]
    fn matrix_csv_roundtrip() {
        let m = SimilarityMatrix {
            labels: vec!["A".into(), "B".into()],
            values: vec![vec![1.0, 0.123456], vec![0.123456, 1.0]],
            degenerate: false,
        };
        let csv = m.to_csv();
        assert_eq!(csv, "operator,A,B\nA,1.0000,0.1235\nB,0.1235,1.0000\n");
        let back = SimilarityMatrix::from_csv(&csv).unwrap();
        assert_eq!(back.values[0][1], 0.1235);
        assert!((m.off_diagonal_mean() - 0.123456).abs() < 1e-12);
    }

    #[test]
    fn probe_construction() {
        let mut r = crate::rng::stream(4, &[]);
        for m in 1..=4 {
            let p = InterferenceProbe::draw(6, 4, 0, m, &mut r).unwrap();
            for (i, a) in p.children.iter().enumerate() {
                assert_eq!(a.ops()[0], p.og_op);
                assert_eq!(a.ops()[1], i);
                for b in &p.children[i + 1..] {
                    assert_eq!(a.hamming(b), m);
                }
            }
        }
        assert!(InterferenceProbe::draw(6, 4, 2, 4, &mut r).is_err());
    }

    #[test]
    fn rank_report_rejects_duplicates() {
        let c = ChildModel::new(vec![0, 1]);
        assert!(matches!(check_distinct(&[c.clone(), c.clone()]), Err(AnalysisError::Duplicate(_))));
        assert!(matches!(check_distinct(&[c]), Err(AnalysisError::TooFew(1))));
    }
}
