use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::autodiff::ParamMap;
use crate::ops::is_norm_param;
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::supernet::{ChildModel, Objective, SuperNet};
use crate::tasks::{Batch, Task};

/// Flattened gradient of one operator block: parameters in name order,
/// each row-major. LayerNorm parameters are left out so the length equals
/// the operator's parameter count.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    pub values: Vec<f64>,
    pub layer: usize,
    pub op: usize,
    pub child: ChildModel,
}

impl GradientVector {
    pub fn from_block<T: Scalar>(grads: &ParamMap<T>, layer: usize, op: usize, child: ChildModel) -> Self {
        let values = grads
            .iter()
            .filter(|(name, _)| !is_norm_param(name))
            .flat_map(|(_, a)| a.data().iter().map(|v| v.to_f64_lossy()))
            .collect();
        Self { values, layer, op, child }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// Set when either vector is zero; `value` is then 0.
    pub degenerate: bool,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<Cosine, AnalysisError> {
    if a.len() != b.len() {
        return Err(AnalysisError::Length { left: a.len(), right: b.len() });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(Cosine { value: 0.0, degenerate: true });
    }
    Ok(Cosine { value: (dot / (na * nb)).clamp(-1.0, 1.0), degenerate: false })
}

/// `C x C` gradient cosine similarities on one probed operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
    #[serde(default)]
    pub degenerate: bool,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    /// Mean over the off-diagonal entries.
    pub fn off_diagonal_mean(&self) -> f64 {
        let c = self.size();
        if c < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for i in 0..c {
            for j in 0..c {
                if i != j {
                    total += self.values[i][j];
                }
            }
        }
        total / (c * (c - 1)) as f64
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        let c = self.size();
        let bad = |m: String| Err(AnalysisError::Matrix(m));
        if self.values.len() != c || self.values.iter().any(|r| r.len() != c) {
            return bad(format!("expected {}x{} values", c, c));
        }
        for i in 0..c {
            if self.values[i][i] != 1.0 {
                return bad(format!("diagonal entry {} is {}", i, self.values[i][i]));
            }
            for j in 0..c {
                let v = self.values[i][j];
                if !(-1.0..=1.0).contains(&v) {
                    return bad(format!("entry ({}, {}) = {} outside [-1, 1]", i, j, v));
                }
                if v != self.values[j][i] {
                    return bad(format!("entries ({}, {}) and ({}, {}) differ", i, j, j, i));
                }
            }
        }
        Ok(())
    }

    /// Labels in the first row and column, values with 4 decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("operator");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.values) {
            out.push_str(l);
            for v in row {
                // avoid a "-0.0000" cell for tiny negatives
                let v = if v.abs() < 5e-5 { 0.0 } else { *v };
                let _ = write!(out, ",{:.4}", v);
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, AnalysisError> {
        let bad = |m: &str| AnalysisError::Matrix(m.to_string());
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty csv"))?;
        let labels: Vec<String> = header.split(',').skip(1).map(|s| s.trim().to_string()).collect();
        let mut values = Vec::with_capacity(labels.len());
        for (i, line) in lines.enumerate() {
            let mut cells = line.split(',');
            let label = cells.next().unwrap_or_default().trim();
            if labels.get(i).map(String::as_str) != Some(label) {
                return Err(bad("row labels do not match the header"));
            }
            let row = cells.map(|c| c.trim().parse::<f64>().map_err(|_| bad("bad number"))).collect::<Result<Vec<_>, _>>()?;
            values.push(row);
        }
        let m = Self { labels, values, degenerate: false };
        m.validate()?;
        Ok(m)
    }
}

/// Gradient of the probed block for each child, in order.
pub fn probe_gradients<T: Scalar>(
    net: &SuperNet<T>,
    children: &[ChildModel],
    og_layer: usize,
    og_op: usize,
    batch: &Batch,
) -> Result<Vec<GradientVector>, AnalysisError> {
    if !net.is_frozen() {
        return Err(AnalysisError::NotFrozen);
    }
    children
        .par_iter()
        .map(|child| {
            if child.ops().get(og_layer) != Some(&og_op) {
                return Err(AnalysisError::Probe(format!("child {} does not use op {} at layer {}", child, og_op, og_layer)));
            }
            let out = net.path_loss_and_grads(child, batch, Objective::Prediction)?;
            let block = &out.grads.blocks[&(og_layer, og_op)];
            Ok(GradientVector::from_block(block, og_layer, og_op, child.clone()))
        })
        .collect()
}

/// Cosine similarity matrix of the probed operator's gradients across
/// `children` on one batch. The result is exactly symmetric with unit
/// diagonal.
pub fn similarity_matrix<T: Scalar>(
    net: &SuperNet<T>,
    children: &[ChildModel],
    labels: Vec<String>,
    og_layer: usize,
    og_op: usize,
    batch: &Batch,
) -> Result<SimilarityMatrix, AnalysisError> {
    let grads = probe_gradients(net, children, og_layer, og_op, batch)?;
    let c = grads.len();
    let mut values = vec![vec![0.0; c]; c];
    let mut degenerate = false;
    for i in 0..c {
        values[i][i] = 1.0;
        for j in i + 1..c {
            let cos = cosine_similarity(&grads[i].values, &grads[j].values)?;
            degenerate |= cos.degenerate;
            values[i][j] = cos.value;
            values[j][i] = cos.value;
        }
    }
    Ok(SimilarityMatrix { labels, values, degenerate })
}

/// One probe: the shared operator `o_g` at `og_layer`, and `C` children that
/// agree everywhere except at `m` consecutive layers after it, where every
/// pair of children differs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterferenceProbe {
    pub og_layer: usize,
    pub og_op: usize,
    pub differing_layers: Vec<usize>,
    pub children: Vec<ChildModel>,
}

impl InterferenceProbe {
    /// Random probe. Child `i` holds candidate `i` at the first differing
    /// layer and a random permutation of the candidates decides the other
    /// differing layers, so every pair differs at all `m` of them. `o_g` and
    /// the remaining layers are drawn once and shared by all children.
    pub fn draw(num_layers: usize, candidates: usize, og_layer: usize, m: usize, r: &mut Rng) -> Result<Self, AnalysisError> {
        if m == 0 || og_layer + m >= num_layers {
            return Err(AnalysisError::Probe(format!(
                "o_g at layer {} with m = {} needs layers up to {}, space has {}",
                og_layer + 1,
                m,
                og_layer + m + 1,
                num_layers
            )));
        }
        let og_op = r.random_range(0..candidates);
        let base: Vec<usize> = (0..num_layers).map(|_| r.random_range(0..candidates)).collect();
        let differing_layers: Vec<usize> = (og_layer + 1..=og_layer + m).collect();
        let perms: Vec<Vec<usize>> = differing_layers
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let mut p: Vec<usize> = (0..candidates).collect();
                if i > 0 {
                    p.shuffle(r);
                }
                p
            })
            .collect();
        let children = (0..candidates)
            .map(|i| {
                let mut ops = base.clone();
                ops[og_layer] = og_op;
                for (d, &l) in differing_layers.iter().enumerate() {
                    ops[l] = perms[d][i];
                }
                ChildModel::new(ops)
            })
            .collect();
        Ok(Self { og_layer, og_op, differing_layers, children })
    }
}

/// The shared probing batch of an experiment.
pub fn probe_batch(task: &Task, batch_size: usize, seed: u64) -> Batch {
    let mut r = rng::stream(seed, &[rng::tag::ANALYSIS, 0]);
    task.gen_batch(batch_size, &mut r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub m: usize,
    pub og_layer: usize,
    /// Mean over repeats of the off-diagonal mean.
    pub mean: f64,
    pub std: f64,
    pub repeats: usize,
}

/// Average similarity for one `(og_layer, m)` over `repeats` random probes.
pub fn interference_point<T: Scalar>(
    net: &SuperNet<T>,
    batch: &Batch,
    og_layer: usize,
    m: usize,
    repeats: usize,
    seed: u64,
) -> Result<CurvePoint, AnalysisError> {
    let space = net.space();
    let mut r = rng::stream(seed, &[rng::tag::ANALYSIS, og_layer as u64, m as u64]);
    let mut values = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let probe = InterferenceProbe::draw(space.num_layers, space.num_candidates(), og_layer, m, &mut r)?;
        let matrix = similarity_matrix(net, &probe.children, space.labels(), og_layer, probe.og_op, batch)?;
        values.push(matrix.off_diagonal_mean());
    }
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(CurvePoint { m, og_layer, mean, std: var.sqrt(), repeats })
}

/// Mean off-diagonal similarity as a function of `m`.
pub fn interference_vs_m<T: Scalar>(
    net: &SuperNet<T>,
    batch: &Batch,
    og_layer: usize,
    ms: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>, AnalysisError> {
    ms.iter().map(|&m| interference_point(net, batch, og_layer, m, repeats, seed)).collect()
}

/// One point per probed layer `j`, children differing at the `m` layers
/// after it.
pub fn og_layer_sweep<T: Scalar>(
    net: &SuperNet<T>,
    batch: &Batch,
    layers: &[usize],
    m: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>, AnalysisError> {
    let n = net.space().num_layers;
    if let Some(&j) = layers.iter().find(|&&j| j + 1 >= n) {
        return Err(AnalysisError::Probe(format!("o_g at the last layer ({}) leaves no later layer to vary", j + 1)));
    }
    layers.iter().map(|&j| interference_point(net, batch, j, m, repeats, seed)).collect()
}

/// CSV with columns `og_layer,m,mean,std,repeats`; `og_layer` is 1-based.
pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("og_layer,m,mean,std,repeats\n");
    for p in points {
        let _ = writeln!(out, "{},{},{:.6},{:.6},{}", p.og_layer + 1, p.m, p.mean, p.std, p.repeats);
    }
    out
}
