//! The weight-sharing super-net.
//!
//! One parameter block is stored per `(layer, candidate)` slot, plus the
//! embedding and output head that every child shares. A child model is a
//! single path selecting one candidate per layer.

mod checkpoint;
mod child;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, FORMAT_TAG};
pub use child::ChildModel;

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use crate::alignment;
use crate::autodiff::{Array, AutodiffError, Graph, NodeId, ParamMap};
use crate::ops::{self, init_params, OperatorSpec, SearchSpace};
use crate::rng;
use crate::scalar::Scalar;
use crate::tasks::Batch;
use crate::trainer::Optimizer;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("child {child} is invalid for a {layers}-layer space with {candidates} candidates")]
    InvalidChild { child: String, layers: usize, candidates: usize },
    #[error("super-net is frozen")]
    Frozen,
    #[error("non-finite value on batch {batch}: {source}")]
    NonFinite { batch: u64, source: AutodiffError },
    #[error("batch {0} has no masked targets")]
    NoTargets(u64),
    #[error("batch [{batch}, {len}] does not fit the space (seq_len {seq_len}, vocab {vocab})")]
    BatchShape { batch: usize, len: usize, seq_len: usize, vocab: usize },
    #[error(transparent)]
    Autodiff(AutodiffError),
}

impl NetError {
    fn from_autodiff(batch: u64, e: AutodiffError) -> Self {
        match e {
            AutodiffError::NonFinite { .. } => NetError::NonFinite { batch, source: e },
            AutodiffError::EmptyTargets => NetError::NoTargets(batch),
            other => NetError::Autodiff(other),
        }
    }
}

/// Per-layer outputs `H_1..H_N` of one forward pass, each `[B, L, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenTrace<T> {
    pub layers: Vec<Array<T>>,
}

impl<T: Scalar> HiddenTrace<T> {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Parameter location used for gradient bookkeeping and optimizer state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Slot {
    Block { layer: usize, op: usize },
    Shared,
}

impl Slot {
    /// Stable key prefix: `l03.o01.` for blocks, empty for shared tensors
    /// (whose names already start with `emb.` / `head.`).
    pub fn prefix(self) -> String {
        match self {
            Slot::Block { layer, op } => format!("l{:02}.o{:02}.", layer, op),
            Slot::Shared => String::new(),
        }
    }
}

/// Gradients produced by one path.
#[derive(Clone, Debug, PartialEq)]
pub struct PathGrads<T> {
    pub blocks: BTreeMap<(usize, usize), ParamMap<T>>,
    pub shared: ParamMap<T>,
}

impl<T: Scalar> PathGrads<T> {
    pub fn scale(&mut self, factor: T) {
        for a in self.blocks.values_mut().flat_map(|m| m.values_mut()).chain(self.shared.values_mut()) {
            a.scale_assign(factor);
        }
    }
}

/// Result of a loss evaluation with gradients.
#[derive(Clone, Debug)]
pub struct PathOutcome<T> {
    /// `pred_loss + lambda * align_loss`.
    pub loss: f64,
    pub pred_loss: f64,
    pub align_loss: f64,
    pub grads: PathGrads<T>,
    pub trace: HiddenTrace<T>,
}

/// Training objective of a path.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a, T> {
    Prediction,
    /// Prediction loss plus `lambda` times the MSE between this path's hidden
    /// states and `target` at the listed (0-based) layers. The target is a
    /// constant: no gradient flows into whatever produced it.
    Aligned { target: &'a HiddenTrace<T>, layers: &'a [usize], lambda: f64 },
}

/// Borrowed single path: per-layer operator specs and parameter blocks.
pub struct PathView<'a, T> {
    pub specs: Vec<&'a OperatorSpec>,
    pub blocks: Vec<&'a ParamMap<T>>,
    pub slots: Vec<(usize, usize)>,
    pub shared: &'a ParamMap<T>,
    pub vocab: usize,
    pub seq_len: usize,
}

struct PathGraph<T> {
    graph: Graph<T>,
    logits: NodeId,
    hidden: Vec<NodeId>,
    block_nodes: Vec<BTreeMap<String, NodeId>>,
    shared_nodes: BTreeMap<String, NodeId>,
}

impl<'a, T: Scalar> PathView<'a, T> {
    fn check_batch(&self, batch: &Batch) -> Result<(), NetError> {
        if batch.seq_len != self.seq_len || batch.inputs.iter().any(|&t| t >= self.vocab) {
            return Err(NetError::BatchShape {
                batch: batch.batch_size,
                len: batch.seq_len,
                seq_len: self.seq_len,
                vocab: self.vocab,
            });
        }
        Ok(())
    }

    fn build(&self, batch: &Batch) -> Result<PathGraph<T>, AutodiffError> {
        let mut g = Graph::new();
        let shared_nodes = ops::register_params(&mut g, "", self.shared)?;
        let (b, l) = (batch.batch_size, batch.seq_len);
        let tok = g.embedding(shared_nodes["emb.tok"], &batch.inputs, &[b, l])?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let pos = g.embedding(shared_nodes["emb.pos"], &positions, &[b, l])?;
        let x = g.add(tok, pos)?;
        let mut h = g.layer_norm(x, shared_nodes["emb.ln.g"], shared_nodes["emb.ln.b"])?;
        let mut hidden = Vec::with_capacity(self.specs.len());
        let mut block_nodes = Vec::with_capacity(self.specs.len());
        for (i, (spec, params)) in self.specs.iter().zip(&self.blocks).enumerate() {
            let (layer, op) = self.slots[i];
            let ids = ops::register_params(&mut g, &Slot::Block { layer, op }.prefix(), params)?;
            h = ops::apply_operator(&mut g, spec, &ids, h, &batch.pad)?;
            hidden.push(h);
            block_nodes.push(ids);
        }
        let logits = g.pointwise_conv1d(h, shared_nodes["head.w"], shared_nodes["head.b"])?;
        Ok(PathGraph { graph: g, logits, hidden, block_nodes, shared_nodes })
    }

    /// Logits `[B, L, V]` and optionally the hidden trace.
    pub fn forward(&self, batch: &Batch, capture: bool) -> Result<(Array<T>, Option<HiddenTrace<T>>), NetError> {
        self.check_batch(batch)?;
        let pg = self.build(batch).map_err(|e| NetError::from_autodiff(batch.id, e))?;
        let trace = capture.then(|| HiddenTrace { layers: pg.hidden.iter().map(|&h| pg.graph.value(h).clone()).collect() });
        Ok((pg.graph.value(pg.logits).clone(), trace))
    }

    /// Mean cross-entropy over the masked positions, without gradients.
    pub fn prediction_loss(&self, batch: &Batch) -> Result<f64, NetError> {
        self.check_batch(batch)?;
        let map = |e| NetError::from_autodiff(batch.id, e);
        let mut pg = self.build(batch).map_err(map)?;
        let loss = pg.graph.cross_entropy(pg.logits, &batch.targets()).map_err(map)?;
        Ok(pg.graph.value(loss).item().to_f64_lossy())
    }

    pub fn loss_and_grads(&self, batch: &Batch, objective: Objective<'_, T>) -> Result<PathOutcome<T>, NetError> {
        self.check_batch(batch)?;
        let map = |e| NetError::from_autodiff(batch.id, e);
        let mut pg = self.build(batch).map_err(map)?;
        let g = &mut pg.graph;
        let pred = g.cross_entropy(pg.logits, &batch.targets()).map_err(map)?;
        let (total, align) = match objective {
            Objective::Prediction => (pred, None),
            Objective::Aligned { target, layers, lambda } => {
                let align = alignment::record_alignment_loss(g, &pg.hidden, target, layers).map_err(map)?;
                let weighted = g.scale(align, T::cast(lambda)).map_err(map)?;
                (g.add(pred, weighted).map_err(map)?, Some(align))
            }
        };
        let grads = g.backward(total).map_err(map)?;
        let mut blocks = BTreeMap::new();
        for (i, ids) in pg.block_nodes.iter().enumerate() {
            let m: ParamMap<T> = ids.iter().map(|(k, &id)| (k.clone(), grads.get_or_zeros(id))).collect();
            blocks.insert(self.slots[i], m);
        }
        let shared = pg.shared_nodes.iter().map(|(k, &id)| (k.clone(), grads.get_or_zeros(id))).collect();
        let value = |id: NodeId| g.value(id).item().to_f64_lossy();
        Ok(PathOutcome {
            loss: value(total),
            pred_loss: value(pred),
            align_loss: align.map(value).unwrap_or(0.0),
            grads: PathGrads { blocks, shared },
            trace: HiddenTrace { layers: pg.hidden.iter().map(|&h| g.value(h).clone()).collect() },
        })
    }
}

fn trunc_normal<T: Scalar>(shape: &[usize], r: &mut rng::Rng) -> Array<T> {
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(r);
            if v.abs() <= 0.04 {
                break T::cast(v);
            }
        })
        .collect();
    Array::from_vec(shape, data).expect("shape matches")
}

/// Embedding, embedding LayerNorm and output head.
pub fn init_shared<T: Scalar>(vocab: usize, seq_len: usize, hidden: usize, seed: u64) -> ParamMap<T> {
    let mut r = rng::stream(seed, &[rng::tag::INIT, u64::MAX]);
    let mut m = ParamMap::new();
    m.insert("emb.tok".into(), trunc_normal(&[vocab, hidden], &mut r));
    m.insert("emb.pos".into(), trunc_normal(&[seq_len, hidden], &mut r));
    m.insert("emb.ln.g".into(), Array::ones(&[hidden]));
    m.insert("emb.ln.b".into(), Array::zeros(&[hidden]));
    m.insert("head.w".into(), trunc_normal(&[hidden, vocab], &mut r));
    m.insert("head.b".into(), Array::zeros(&[vocab]));
    m
}

/// Chain-styled weight-sharing super-net.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperNet<T> {
    space: SearchSpace,
    /// Indexed `layer * C + op`.
    blocks: Vec<ParamMap<T>>,
    shared: ParamMap<T>,
    frozen: bool,
}

impl<T: Scalar> SuperNet<T> {
    pub fn new(space: SearchSpace, seed: u64) -> Self {
        let c = space.num_candidates();
        let blocks = (0..space.num_layers * c)
            .map(|i| init_params(&space.candidates[i % c], rng::derive_seed(seed, &[(i / c) as u64, (i % c) as u64])))
            .collect();
        let shared = init_shared(space.vocab, space.seq_len, space.hidden, seed);
        Self { space, blocks, shared, frozen: false }
    }

    pub(crate) fn from_parts(space: SearchSpace, blocks: Vec<ParamMap<T>>, shared: ParamMap<T>, frozen: bool) -> Self {
        Self { space, blocks, shared, frozen }
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    /// The stored parameter block of a slot.
    pub fn block(&self, layer: usize, op: usize) -> &ParamMap<T> {
        &self.blocks[layer * self.space.num_candidates() + op]
    }

    pub fn shared(&self) -> &ParamMap<T> {
        &self.shared
    }

    pub fn validate_child(&self, child: &ChildModel) -> Result<(), NetError> {
        child.validate(&self.space).map_err(|_| NetError::InvalidChild {
            child: child.to_string(),
            layers: self.space.num_layers,
            candidates: self.space.num_candidates(),
        })
    }

    pub fn view(&self, child: &ChildModel) -> Result<PathView<'_, T>, NetError> {
        self.validate_child(child)?;
        Ok(PathView {
            specs: child.ops().iter().map(|&o| &self.space.candidates[o]).collect(),
            blocks: child.ops().iter().enumerate().map(|(l, &o)| self.block(l, o)).collect(),
            slots: child.ops().iter().enumerate().map(|(l, &o)| (l, o)).collect(),
            shared: &self.shared,
            vocab: self.space.vocab,
            seq_len: self.space.seq_len,
        })
    }

    /// Embedding, the child's operators in order, then the head.
    pub fn forward_path(&self, child: &ChildModel, batch: &Batch, capture: bool) -> Result<(Array<T>, Option<HiddenTrace<T>>), NetError> {
        self.view(child)?.forward(batch, capture)
    }

    /// Loss of `child` on `batch` and gradients for the blocks on its path
    /// plus the shared tensors. Allowed on a frozen net (nothing is mutated).
    pub fn path_loss_and_grads(&self, child: &ChildModel, batch: &Batch, objective: Objective<'_, T>) -> Result<PathOutcome<T>, NetError> {
        self.view(child)?.loss_and_grads(batch, objective)
    }

    /// Applies one optimizer step to exactly the blocks present in `grads`
    /// and to the shared tensors.
    pub fn apply_update(&mut self, grads: &PathGrads<T>, opt: &mut Optimizer<T>) -> Result<(), NetError> {
        if self.frozen {
            return Err(NetError::Frozen);
        }
        let c = self.space.num_candidates();
        for (&(layer, op), g) in &grads.blocks {
            if layer >= self.space.num_layers || op >= c {
                return Err(NetError::InvalidChild { child: format!("slot ({}, {})", layer, op), layers: self.space.num_layers, candidates: c });
            }
            let prefix = Slot::Block { layer, op }.prefix();
            let block = &mut self.blocks[layer * c + op];
            for (name, grad) in g {
                if let Some(p) = block.get_mut(name) {
                    opt.update(&format!("{}{}", prefix, name), p, grad);
                }
            }
        }
        for (name, grad) in &grads.shared {
            if let Some(p) = self.shared.get_mut(name) {
                opt.update(name, p, grad);
            }
        }
        Ok(())
    }

    /// Deep copy of one path as a standalone model.
    pub fn extract_child(&self, child: &ChildModel) -> Result<ChildNet<T>, NetError> {
        self.validate_child(child)?;
        Ok(ChildNet {
            child: child.clone(),
            specs: child.ops().iter().map(|&o| self.space.candidates[o].clone()).collect(),
            blocks: child.ops().iter().enumerate().map(|(l, &o)| self.block(l, o).clone()).collect(),
            shared: self.shared.clone(),
            vocab: self.space.vocab,
            seq_len: self.space.seq_len,
        })
    }

    /// Every stored tensor with its checkpoint name, in name order.
    pub fn named_tensors(&self) -> Vec<(String, &Array<T>)> {
        let c = self.space.num_candidates();
        let mut out: Vec<(String, &Array<T>)> = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let prefix = Slot::Block { layer: i / c, op: i % c }.prefix();
            out.extend(block.iter().map(|(k, v)| (format!("{}{}", prefix, k), v)));
        }
        out.extend(self.shared.iter().map(|(k, v)| (k.clone(), v)));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Order-sensitive digest of all weights (FNV-1a over the bit patterns).
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in self.named_tensors() {
            for byte in name.bytes() {
                h = (h ^ byte as u64).wrapping_mul(0x0100_0000_01b3);
            }
            for v in t.data() {
                h = (h ^ v.to_f64_lossy().to_bits()).wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// A standalone model: one path's operators with their own weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ChildNet<T> {
    pub child: ChildModel,
    pub specs: Vec<OperatorSpec>,
    pub blocks: Vec<ParamMap<T>>,
    pub shared: ParamMap<T>,
    pub vocab: usize,
    pub seq_len: usize,
}

impl<T: Scalar> ChildNet<T> {
    /// Fresh weights for training `child` of `space` from scratch.
    pub fn init(space: &SearchSpace, child: &ChildModel, seed: u64) -> Result<Self, NetError> {
        child.validate(space).map_err(|_| NetError::InvalidChild {
            child: child.to_string(),
            layers: space.num_layers,
            candidates: space.num_candidates(),
        })?;
        let specs: Vec<OperatorSpec> = child.ops().iter().map(|&o| space.candidates[o].clone()).collect();
        let blocks = specs
            .iter()
            .enumerate()
            .map(|(l, s)| init_params(s, rng::derive_seed(seed, &[l as u64, child.ops()[l] as u64])))
            .collect();
        Ok(Self {
            child: child.clone(),
            specs,
            blocks,
            shared: init_shared(space.vocab, space.seq_len, space.hidden, seed),
            vocab: space.vocab,
            seq_len: space.seq_len,
        })
    }

    pub fn view(&self) -> PathView<'_, T> {
        PathView {
            specs: self.specs.iter().collect(),
            blocks: self.blocks.iter().collect(),
            slots: self.child.ops().iter().enumerate().map(|(l, &o)| (l, o)).collect(),
            shared: &self.shared,
            vocab: self.vocab,
            seq_len: self.seq_len,
        }
    }

    pub fn forward(&self, batch: &Batch, capture: bool) -> Result<(Array<T>, Option<HiddenTrace<T>>), NetError> {
        self.view().forward(batch, capture)
    }

    pub fn apply_update(&mut self, grads: &PathGrads<T>, opt: &mut Optimizer<T>) {
        for (layer, block) in self.blocks.iter_mut().enumerate() {
            let op = self.child.ops()[layer];
            if let Some(g) = grads.blocks.get(&(layer, op)) {
                let prefix = Slot::Block { layer, op }.prefix();
                for (name, grad) in g {
                    if let Some(p) = block.get_mut(name) {
                        opt.update(&format!("{}{}", prefix, name), p, grad);
                    }
                }
            }
        }
        for (name, grad) in &grads.shared {
            if let Some(p) = self.shared.get_mut(name) {
                opt.update(name, p, grad);
            }
        }
    }
}
