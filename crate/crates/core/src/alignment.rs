//! Hidden-state alignment: losses between traces, the trace average, and the
//! anchor lifecycle.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, AutodiffError, Graph, NodeId};
use crate::scalar::Scalar;
use crate::supernet::{ChildModel, HiddenTrace};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AlignError {
    #[error("traces have {left} and {right} layers")]
    LayerCount { left: usize, right: usize },
    #[error("layer {layer}: shapes {left:?} and {right:?} differ")]
    Shape { layer: usize, left: Vec<usize>, right: Vec<usize> },
    #[error("aligned layer {0} is out of range")]
    Layer(usize),
    #[error("cannot average an empty list of traces")]
    Empty,
    #[error("invalid alignment settings: {0}")]
    Config(String),
}

/// What the sampled child is aligned towards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignTarget {
    /// The current anchor child's trace under the current shared weights.
    Anchor,
    /// The mean trace of `C` freshly drawn random children, over all layers.
    Average,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    pub lambda: f64,
    /// Layers per alignment block; outputs of layers `b, 2b, ...` are aligned.
    /// A trailing partial block has no boundary and is not aligned.
    pub block_size: usize,
    pub warm_start_epochs: u64,
    pub target: AlignTarget,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self { lambda: 0.5, block_size: 4, warm_start_epochs: 3, target: AlignTarget::Anchor }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<(), AlignError> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(AlignError::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.block_size == 0 {
            return Err(AlignError::Config("block_size must be >= 1".into()));
        }
        Ok(())
    }

    /// 0-based indices of the aligned layers. Averaging always aligns every
    /// layer.
    pub fn aligned_layers(&self, num_layers: usize) -> Vec<usize> {
        match self.target {
            AlignTarget::Average => (0..num_layers).collect(),
            AlignTarget::Anchor => block_boundaries(num_layers, self.block_size),
        }
    }
}

/// `b-1, 2b-1, ...` below `num_layers`.
pub fn block_boundaries(num_layers: usize, block_size: usize) -> Vec<usize> {
    let b = block_size.max(1);
    (1..=num_layers / b).map(|i| i * b - 1).collect()
}

fn check_pair<T: Scalar>(a: &HiddenTrace<T>, b: &HiddenTrace<T>, layers: &[usize]) -> Result<(), AlignError> {
    if a.num_layers() != b.num_layers() {
        return Err(AlignError::LayerCount { left: a.num_layers(), right: b.num_layers() });
    }
    for &l in layers {
        let (x, y) = (a.layers.get(l).ok_or(AlignError::Layer(l))?, &b.layers[l]);
        if x.shape() != y.shape() {
            return Err(AlignError::Shape { layer: l, left: x.shape().to_vec(), right: y.shape().to_vec() });
        }
    }
    Ok(())
}

/// Sum over `layers` of the mean squared error between the two traces.
pub fn alignment_loss<T: Scalar>(anchor: &HiddenTrace<T>, child: &HiddenTrace<T>, layers: &[usize]) -> Result<f64, AlignError> {
    check_pair(anchor, child, layers)?;
    Ok(layers
        .iter()
        .map(|&l| {
            let (a, c) = (&anchor.layers[l], &child.layers[l]);
            let sq: f64 = a.data().iter().zip(c.data()).map(|(&x, &y)| (x - y).to_f64_lossy().powi(2)).sum();
            sq / a.len().max(1) as f64
        })
        .sum())
}

/// Records the alignment loss on a graph. `target` enters as constant inputs,
/// so gradients reach only the nodes in `hidden`.
pub fn record_alignment_loss<T: Scalar>(
    g: &mut Graph<T>,
    hidden: &[NodeId],
    target: &HiddenTrace<T>,
    layers: &[usize],
) -> Result<NodeId, AutodiffError> {
    let mismatch = |detail: String| AutodiffError::ShapeMismatch { node: "alignment".into(), detail };
    if hidden.len() != target.num_layers() {
        return Err(mismatch(format!("path has {} layers, target has {}", hidden.len(), target.num_layers())));
    }
    let mut total: Option<NodeId> = None;
    for &l in layers {
        let h = *hidden.get(l).ok_or_else(|| mismatch(format!("aligned layer {} out of range", l)))?;
        let t = g.input(target.layers[l].clone());
        let term = g.mse(h, t)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(g.input(Array::scalar(T::zero()))),
    }
}

pub fn combined_loss(pred_loss: f64, align_loss: f64, lambda: f64) -> f64 {
    pred_loss + lambda * align_loss
}

/// Element-wise mean of the traces, layer by layer.
pub fn average_trace<T: Scalar>(traces: &[HiddenTrace<T>]) -> Result<HiddenTrace<T>, AlignError> {
    let first = traces.first().ok_or(AlignError::Empty)?;
    let all: Vec<usize> = (0..first.num_layers()).collect();
    for t in &traces[1..] {
        check_pair(first, t, &all)?;
    }
    let inv = T::cast(1.0 / traces.len() as f64);
    let layers = (0..first.num_layers())
        .map(|l| {
            let mut acc = first.layers[l].clone();
            for t in &traces[1..] {
                acc.add_assign(&t.layers[l]);
            }
            acc.scale_assign(inv);
            acc
        })
        .collect();
    Ok(HiddenTrace { layers })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnchorPolicy {
    BestSoFar,
    /// Keep the anchor while its percentile stays within `p ± r`.
    TopP { p: f64, r: f64 },
}

impl AnchorPolicy {
    pub fn validate(&self) -> Result<(), AlignError> {
        match *self {
            AnchorPolicy::BestSoFar => Ok(()),
            AnchorPolicy::TopP { p, r } if p > 0.0 && p < 100.0 && r > 0.0 && r < 100.0 => Ok(()),
            AnchorPolicy::TopP { p, r } => Err(AlignError::Config(format!("top-p needs p, r in (0, 100), got p={} r={}", p, r))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorState {
    pub anchor: ChildModel,
    /// `None` until the anchor has been evaluated once.
    pub val_score: Option<f64>,
    pub policy: AnchorPolicy,
    pub last_eval_epoch: Option<u64>,
}

impl AnchorState {
    pub fn new(anchor: ChildModel, policy: AnchorPolicy) -> Self {
        Self { anchor, val_score: None, policy, last_eval_epoch: None }
    }
}

/// Replaces the anchor iff `candidate_val` is strictly better than the
/// stored score. An unscored state accepts any finite candidate.
pub fn maybe_replace_anchor(state: &AnchorState, candidate: &ChildModel, candidate_val: f64) -> (AnchorState, bool) {
    let better = match state.val_score {
        None => candidate_val.is_finite(),
        Some(v) => candidate_val > v,
    };
    let mut next = state.clone();
    if better {
        next.anchor = candidate.clone();
        next.val_score = Some(candidate_val);
    }
    (next, better)
}

/// Top-down percentile in `(0, 100]` of each pool entry: entry `i` is in the
/// top `100 * (number of entries scoring strictly higher + 1) / n` percent,
/// so the best model is at `100 / n` and the worst at 100.
pub fn top_percentiles(scores: &[f64]) -> Vec<f64> {
    let n = scores.len() as f64;
    scores
        .iter()
        .map(|&s| 100.0 * (scores.iter().filter(|&&o| o > s).count() as f64 + 1.0) / n)
        .collect()
}

/// Top-p selection with hysteresis. The incumbent is kept while its top-down
/// percentile lies in `[p - r, p + r]` (clipped to `[0, 100]`); otherwise the
/// pool entry nearest to `p` replaces it, ties going to the higher score.
pub fn select_anchor_top_p(pool: &[(ChildModel, f64)], state: &AnchorState) -> (AnchorState, bool) {
    let AnchorPolicy::TopP { p, r } = state.policy else {
        return (state.clone(), false);
    };
    if pool.is_empty() {
        return (state.clone(), false);
    }
    let scores: Vec<f64> = pool.iter().map(|(_, v)| *v).collect();
    let pct = top_percentiles(&scores);
    let target = p;
    let (lo, hi) = ((target - r).max(0.0), (target + r).min(100.0));
    if let Some(i) = pool.iter().position(|(c, _)| *c == state.anchor) {
        if pct[i] >= lo && pct[i] <= hi {
            let mut next = state.clone();
            next.val_score = Some(scores[i]);
            return (next, false);
        }
    }
    let best = (0..pool.len())
        .min_by(|&a, &b| {
            let da = (pct[a] - target).abs();
            let db = (pct[b] - target).abs();
            da.total_cmp(&db).then(scores[b].total_cmp(&scores[a])).then(a.cmp(&b))
        })
        .expect("nonempty pool");
    let mut next = state.clone();
    next.anchor = pool[best].0.clone();
    next.val_score = Some(scores[best]);
    (next, true)
}

/// One anchor-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorLogEntry {
    pub epoch: u64,
    pub anchor: ChildModel,
    pub val: Option<f64>,
    pub replaced: bool,
    pub policy: AnchorPolicy,
}
