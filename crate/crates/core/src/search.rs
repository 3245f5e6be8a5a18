//! Progressive shrinking: alternate training epochs with deleting the
//! lowest-scoring `(layer, op)` slots until a single child remains.

use serde::{Deserialize, Serialize};

use crate::rng;
use crate::sampling::{sample_uniform_alive, AliveMask};
use crate::scalar::Scalar;
use crate::supernet::{ChildModel, NetError, SuperNet};
use crate::tasks::Batch;
use crate::trainer::{evaluate_proxy, TrainError, Trainer};

#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("invalid search settings: {0}")]
    Config(String),
    #[error("{0}")]
    Hook(String),
}

/// Deletion rate scaled from five deletions per epoch on a 26-layer,
/// 4-candidate space.
pub fn default_deletions_per_epoch(num_layers: usize, candidates: usize) -> usize {
    ((5.0 * (num_layers * candidates) as f64 / (26.0 * 4.0)).round() as usize).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShrinkRecord {
    pub epoch: u64,
    pub deleted: Vec<(usize, usize)>,
    /// Per-slot scores, row-major `[layer][op]`; `null` for dead slots.
    pub slot_scores: Vec<Vec<Option<f64>>>,
    pub alive_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShrinkState {
    pub alive: AliveMask,
    pub deletions_per_epoch: usize,
    /// Latest score per slot, row-major; `-inf` for dead or unscored slots.
    #[serde(with = "scores_serde")]
    pub scores: Vec<f64>,
    pub trace: Vec<ShrinkRecord>,
    pub epoch: u64,
}

mod scores_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|x| x.is_finite().then_some(*x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Option<f64>>::deserialize(d)?.into_iter().map(|x| x.unwrap_or(f64::NEG_INFINITY)).collect())
    }
}

impl ShrinkState {
    pub fn new(num_layers: usize, candidates: usize, deletions_per_epoch: usize) -> Self {
        Self {
            alive: AliveMask::all(num_layers, candidates),
            deletions_per_epoch,
            scores: vec![f64::NEG_INFINITY; num_layers * candidates],
            trace: Vec::new(),
            epoch: 0,
        }
    }

    pub fn remaining_children(&self) -> u128 {
        self.alive.num_children()
    }

    pub fn total_deletions(&self) -> usize {
        self.trace.iter().map(|r| r.deleted.len()).sum()
    }

    /// The surviving child once only one remains.
    pub fn final_child(&self) -> Option<ChildModel> {
        (self.remaining_children() == 1)
            .then(|| ChildModel::new((0..self.alive.num_layers).map(|l| self.alive.alive_ops(l)[0]).collect()))
    }
}

/// Mean proxy per alive slot over `probe_paths` uniformly drawn alive paths.
/// Alive slots that no drawn path visited get one extra path forced through
/// them, so every alive slot ends up scored; dead slots score `-inf`.
pub fn score_slots<T: Scalar>(
    net: &SuperNet<T>,
    alive: &AliveMask,
    probe_paths: usize,
    val: &[Batch],
    seed: u64,
) -> Result<Vec<f64>, NetError> {
    let (n, c) = (alive.num_layers, alive.num_candidates);
    let mut r = rng::stream(seed, &[rng::tag::SEARCH]);
    let mut sums = vec![0.0; n * c];
    let mut counts = vec![0usize; n * c];
    let record = |child: &ChildModel, sums: &mut Vec<f64>, counts: &mut Vec<usize>| -> Result<(), NetError> {
        let proxy = evaluate_proxy(net, child, val)?;
        for (l, &o) in child.ops().iter().enumerate() {
            sums[l * c + o] += proxy;
            counts[l * c + o] += 1;
        }
        Ok(())
    };
    for _ in 0..probe_paths {
        let child = sample_uniform_alive(alive, &mut r);
        record(&child, &mut sums, &mut counts)?;
    }
    for l in 0..n {
        for o in alive.alive_ops(l) {
            if counts[l * c + o] == 0 {
                let mut child = sample_uniform_alive(alive, &mut r);
                child.ops_mut()[l] = o;
                record(&child, &mut sums, &mut counts)?;
            }
        }
    }
    Ok((0..n * c)
        .map(|i| if alive.is_alive(i / c, i % c) && counts[i] > 0 { sums[i] / counts[i] as f64 } else { f64::NEG_INFINITY })
        .collect())
}

/// Deletes up to `deletions_per_epoch` of the lowest-scoring alive slots,
/// never the last alive operator of a layer. Ties go to the lower layer,
/// then the lower op index.
pub fn shrink_epoch(state: &ShrinkState, scores: &[f64]) -> ShrinkState {
    let (n, c) = (state.alive.num_layers, state.alive.num_candidates);
    let mut next = state.clone();
    let mut order: Vec<(usize, usize)> =
        (0..n).flat_map(|l| (0..c).map(move |o| (l, o))).filter(|&(l, o)| state.alive.is_alive(l, o)).collect();
    order.sort_by(|a, b| scores[a.0 * c + a.1].total_cmp(&scores[b.0 * c + b.1]).then(a.cmp(b)));
    let mut deleted = Vec::new();
    for (l, o) in order {
        if deleted.len() >= state.deletions_per_epoch {
            break;
        }
        if next.alive.alive_ops(l).len() > 1 {
            next.alive.set(l, o, false);
            deleted.push((l, o));
        }
    }
    next.scores = scores.to_vec();
    next.trace.push(ShrinkRecord {
        epoch: state.epoch,
        deleted,
        slot_scores: (0..n)
            .map(|l| (0..c).map(|o| state.alive.is_alive(l, o).then_some(scores[l * c + o]).filter(|s| s.is_finite())).collect())
            .collect(),
        alive_count: next.alive.alive_count(),
    });
    next.epoch += 1;
    next
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// `0` selects the scaled default.
    pub deletions_per_epoch: usize,
    pub probe_paths: usize,
    pub score_val_batches: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { deletions_per_epoch: 0, probe_paths: 32, score_val_batches: 2 }
    }
}

impl SearchConfig {
    pub fn resolved_deletions(&self, num_layers: usize, candidates: usize) -> usize {
        if self.deletions_per_epoch == 0 {
            default_deletions_per_epoch(num_layers, candidates)
        } else {
            self.deletions_per_epoch
        }
    }
}

/// Alternates a training epoch (sampling only alive slots) with a shrink
/// step until one child remains. `on_epoch` runs after every shrink step,
/// e.g. to checkpoint; returning an error aborts the search.
pub fn run_search<T, F>(
    trainer: &mut Trainer<'_, T>,
    state: &mut ShrinkState,
    cfg: &SearchConfig,
    mut on_epoch: F,
) -> Result<ChildModel, SearchError>
where
    T: Scalar,
    F: FnMut(&Trainer<'_, T>, &ShrinkState) -> Result<(), SearchError>,
{
    if cfg.probe_paths == 0 && cfg.score_val_batches == 0 {
        return Err(SearchError::Config("probe_paths or score_val_batches must be positive".into()));
    }
    state.alive.validate().map_err(|e| SearchError::Config(e.to_string()))?;
    trainer.set_alive(state.alive.clone());
    let val: Vec<Batch> = trainer.val_set().iter().take(cfg.score_val_batches.max(1)).cloned().collect();
    while state.remaining_children() > 1 {
        trainer.run_epoch()?;
        let seed = rng::derive_seed(trainer.cfg.seed, &[rng::tag::SEARCH, state.epoch]);
        let scores = score_slots(&trainer.net, &state.alive, cfg.probe_paths, &val, seed)?;
        *state = shrink_epoch(state, &scores);
        trainer.set_alive(state.alive.clone());
        on_epoch(trainer, state)?;
    }
    Ok(state.final_child().expect("loop ends with one child"))
}
