//! Child-model samplers and the convergence analysis of the gradual
//! modification walk.

use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::ops::SearchSpace;
use crate::rng::Rng;
use crate::supernet::ChildModel;

/// Largest state space the exact mixing computation accepts.
pub const EXACT_STATE_LIMIT: u128 = 100_000;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SamplerError {
    #[error("k = {k} must be between 1 and the number of layers {layers}")]
    BadK { k: usize, layers: usize },
    #[error(
        "lazy = false with 2 candidates makes the walk periodic: every step flips the parity of the \
         distance to the start, so the chain never converges to uniform; set lazy = true"
    )]
    Periodic,
    #[error("state space of {0} children exceeds the exact limit; use monte_carlo_mixing")]
    TooLarge(u128),
    #[error("epsilon must be in (0, 1], got {0}")]
    Epsilon(String),
    #[error("alive mask has no alive operator at layer {0}")]
    DeadLayer(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Uniform,
    MagicT,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    /// Operators substituted per step.
    pub k: usize,
    /// Allow the substitute to equal the replaced operator.
    pub lazy: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { mode: SamplerMode::Uniform, k: 1, lazy: false, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, space: &SearchSpace) -> Result<(), SamplerError> {
        if self.k == 0 || self.k > space.num_layers {
            return Err(SamplerError::BadK { k: self.k, layers: space.num_layers });
        }
        if self.mode == SamplerMode::MagicT && !self.lazy && space.num_candidates() == 2 {
            return Err(SamplerError::Periodic);
        }
        Ok(())
    }
}

/// Which `(layer, op)` slots may still be sampled.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AliveMask {
    pub num_layers: usize,
    pub num_candidates: usize,
    alive: Vec<bool>,
}

impl AliveMask {
    pub fn all(num_layers: usize, num_candidates: usize) -> Self {
        Self { num_layers, num_candidates, alive: vec![true; num_layers * num_candidates] }
    }

    pub fn for_space(space: &SearchSpace) -> Self {
        Self::all(space.num_layers, space.num_candidates())
    }

    pub fn is_alive(&self, layer: usize, op: usize) -> bool {
        self.alive[layer * self.num_candidates + op]
    }

    pub fn set(&mut self, layer: usize, op: usize, alive: bool) {
        self.alive[layer * self.num_candidates + op] = alive;
    }

    pub fn alive_ops(&self, layer: usize) -> Vec<usize> {
        (0..self.num_candidates).filter(|&o| self.is_alive(layer, o)).collect()
    }

    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    /// Number of children whose every index is alive.
    pub fn num_children(&self) -> u128 {
        (0..self.num_layers).map(|l| self.alive_ops(l).len() as u128).product()
    }

    pub fn admits(&self, child: &ChildModel) -> bool {
        child.num_layers() == self.num_layers
            && child.ops().iter().enumerate().all(|(l, &o)| o < self.num_candidates && self.is_alive(l, o))
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        match (0..self.num_layers).find(|&l| self.alive_ops(l).is_empty()) {
            Some(l) => Err(SamplerError::DeadLayer(l)),
            None => Ok(()),
        }
    }
}

/// Each layer index drawn i.i.d. uniformly over the `C` candidates.
pub fn sample_uniform(space: &SearchSpace, rng: &mut Rng) -> ChildModel {
    let c = space.num_candidates();
    ChildModel::new((0..space.num_layers).map(|_| rng.random_range(0..c)).collect())
}

/// Uniform over the alive children.
pub fn sample_uniform_alive(alive: &AliveMask, rng: &mut Rng) -> ChildModel {
    ChildModel::new(
        (0..alive.num_layers)
            .map(|l| {
                let ops = alive.alive_ops(l);
                ops[rng.random_range(0..ops.len())]
            })
            .collect(),
    )
}

/// Substitutes `k` distinct, uniformly chosen layers of `prev`. The new
/// operator is uniform over the other candidates (`lazy = false`) or over
/// all candidates (`lazy = true`).
pub fn sample_magic_t(prev: &ChildModel, space: &SearchSpace, cfg: &SamplerConfig, rng: &mut Rng) -> Result<ChildModel, SamplerError> {
    cfg.validate(space)?;
    Ok(magic_t_step(prev, &AliveMask::for_space(space), cfg.k, cfg.lazy, rng))
}

/// MAGIC-T step restricted to alive slots. Only layers with a possible
/// substitute are eligible; when fewer than `k` are eligible all of them
/// change.
pub fn magic_t_step(prev: &ChildModel, alive: &AliveMask, k: usize, lazy: bool, rng: &mut Rng) -> ChildModel {
    let eligible: Vec<usize> = (0..alive.num_layers).filter(|&l| lazy || alive.alive_ops(l).len() >= 2).collect();
    let mut next = prev.clone();
    let picks = index::sample(rng, eligible.len(), k.min(eligible.len()));
    for i in picks.iter() {
        let layer = eligible[i];
        let current = prev.ops()[layer];
        let choices: Vec<usize> = alive.alive_ops(layer).into_iter().filter(|&o| lazy || o != current).collect();
        next.ops_mut()[layer] = choices[rng.random_range(0..choices.len())];
    }
    next
}

/// Stateful sampler: uniform draws, or a MAGIC-T chain started from a
/// uniform draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sampler {
    pub config: SamplerConfig,
    pub prev: Option<ChildModel>,
}

impl Sampler {
    pub fn new(config: SamplerConfig, space: &SearchSpace) -> Result<Self, SamplerError> {
        config.validate(space)?;
        Ok(Self { config, prev: None })
    }

    pub fn next(&mut self, alive: &AliveMask, rng: &mut Rng) -> ChildModel {
        let child = match (&self.config.mode, &self.prev) {
            (SamplerMode::MagicT, Some(prev)) => magic_t_step(prev, alive, self.config.k, self.config.lazy, rng),
            _ => sample_uniform_alive(alive, rng),
        };
        self.prev = Some(child.clone());
        child
    }

    /// Resamples, uniformly over alive operators, every layer of the chain
    /// state that holds a dead operator.
    pub fn repair(&mut self, alive: &AliveMask, rng: &mut Rng) {
        if let Some(prev) = &mut self.prev {
            for l in 0..alive.num_layers {
                if !alive.is_alive(l, prev.ops()[l]) {
                    let ops = alive.alive_ops(l);
                    prev.ops_mut()[l] = ops[rng.random_range(0..ops.len())];
                }
            }
        }
    }
}

/// Mean Hamming distance between two independent uniform children.
pub fn expected_hamming_uniform(space: &SearchSpace) -> f64 {
    let c = space.num_candidates() as f64;
    space.num_layers as f64 * (c - 1.0) / c
}

/// `ceil(N ln N + N ln(1/epsilon))`.
pub fn mixing_steps_for(epsilon: f64, num_layers: usize) -> Result<u64, SamplerError> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(SamplerError::Epsilon(epsilon.to_string()));
    }
    let n = num_layers as f64;
    let t = n * n.ln() + n * (1.0 / epsilon).ln();
    Ok(t.max(0.0).ceil() as u64)
}

pub fn coupling_bound(t: u64, num_layers: usize) -> f64 {
    let n = num_layers as f64;
    n * (-(t as f64) / n).exp()
}

/// The expression `exp(-t/N - ln N)`, recorded for comparison only.
pub fn paper_bound(t: u64, num_layers: usize) -> f64 {
    let n = num_layers as f64;
    (-(t as f64) / n - n.ln()).exp()
}

/// The walk to analyse.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkConfig {
    pub num_layers: usize,
    pub candidates: usize,
    pub k: usize,
    pub lazy: bool,
}

impl WalkConfig {
    pub fn new(num_layers: usize, candidates: usize, lazy: bool) -> Self {
        Self { num_layers, candidates, k: 1, lazy }
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.k == 0 || self.k > self.num_layers {
            return Err(SamplerError::BadK { k: self.k, layers: self.num_layers });
        }
        Ok(())
    }

    /// The walk is periodic when every step must change the distance parity.
    pub fn non_ergodic(&self) -> bool {
        self.candidates == 2 && !self.lazy
    }

    pub fn num_states(&self) -> u128 {
        (self.candidates as u128).saturating_pow(self.num_layers as u32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingMethod {
    Exact,
    MonteCarlo { walkers: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingRow {
    pub t: u64,
    pub tv: f64,
    pub coupling_bound: f64,
    pub paper_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingReport {
    pub walk: WalkConfig,
    pub method: MixingMethod,
    pub epsilon: f64,
    pub non_ergodic: bool,
    pub rows: Vec<MixingRow>,
}

impl MixingReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,tv,coupling_bound,paper_bound\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.t, r.tv, r.coupling_bound, r.paper_bound);
        }
        out
    }

    /// True when `tv <= bound` at every `t >= 1`.
    pub fn coupling_bound_holds(&self) -> bool {
        self.rows.iter().filter(|r| r.t >= 1).all(|r| r.tv <= r.coupling_bound)
    }

    pub fn paper_bound_holds(&self) -> bool {
        self.rows.iter().filter(|r| r.t >= 1).all(|r| r.tv <= r.paper_bound)
    }

    /// First `t` with `tv <= epsilon`.
    pub fn first_below(&self, epsilon: f64) -> Option<u64> {
        self.rows.iter().find(|r| r.tv <= epsilon).map(|r| r.t)
    }

    pub fn tv_at(&self, t: u64) -> Option<f64> {
        self.rows.iter().find(|r| r.t == t).map(|r| r.tv)
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Distribution of a sum of `n` Bernoulli(`p`) variables.
fn binomial_pmf(n: usize, p: f64) -> Vec<f64> {
    (0..=n).map(|i| binomial(n, i) * p.powi(i as i32) * (1.0 - p).powi((n - i) as i32)).collect()
}

/// Uniform distribution pushed onto the distance-to-start shells.
fn shell_stationary(w: &WalkConfig) -> Vec<f64> {
    let (n, c) = (w.num_layers, w.candidates as f64);
    (0..=n).map(|h| binomial(n, h) * (c - 1.0).powi(h as i32) / c.powi(n as i32)).collect()
}

/// Transition matrix between distance-to-start shells, `[from][to]`.
///
/// By the product structure, the walk started at a point stays uniform
/// within each shell, so the shell chain gives exact total variation.
fn shell_kernel(w: &WalkConfig) -> Vec<Vec<f64>> {
    let (n, k, c) = (w.num_layers, w.k, w.candidates as f64);
    // a changed differing layer returns to its start value
    let p_return = if w.lazy { 1.0 / c } else { 1.0 / (c - 1.0) };
    // a changed agreeing layer leaves its start value
    let p_leave = if w.lazy { (c - 1.0) / c } else { 1.0 };
    let subsets = binomial(n, k);
    let mut kernel = vec![vec![0.0; n + 1]; n + 1];
    for (h, row) in kernel.iter_mut().enumerate() {
        // j of the k chosen layers are currently differing
        for j in k.saturating_sub(n - h)..=k.min(h) {
            let pj = binomial(h, j) * binomial(n - h, k - j) / subsets;
            if pj == 0.0 {
                continue;
            }
            let back = binomial_pmf(j, p_return);
            let away = binomial_pmf(k - j, p_leave);
            for (r, &pr) in back.iter().enumerate() {
                for (a, &pa) in away.iter().enumerate() {
                    row[h - r + a] += pj * pr * pa;
                }
            }
        }
    }
    kernel
}

fn row(t: u64, tv: f64, n: usize) -> MixingRow {
    MixingRow { t, tv: tv.clamp(0.0, 1.0), coupling_bound: coupling_bound(t, n), paper_bound: paper_bound(t, n) }
}

fn half_l1(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Exact `d_TV(pi_t, uniform)` for `t = 0..=t_max` from a point start.
pub fn exact_mixing_curve(walk: &WalkConfig, t_max: u64, epsilon: f64) -> Result<MixingReport, SamplerError> {
    walk.validate()?;
    if walk.num_states() > EXACT_STATE_LIMIT {
        return Err(SamplerError::TooLarge(walk.num_states()));
    }
    let kernel = shell_kernel(walk);
    let target = shell_stationary(walk);
    let n = walk.num_layers;
    let mut dist = vec![0.0; n + 1];
    dist[0] = 1.0;
    let mut rows = Vec::with_capacity(t_max as usize + 1);
    for t in 0..=t_max {
        rows.push(row(t, half_l1(&dist, &target), n));
        let mut next = vec![0.0; n + 1];
        for (h, &p) in dist.iter().enumerate() {
            if p != 0.0 {
                for (to, &q) in kernel[h].iter().enumerate() {
                    next[to] += p * q;
                }
            }
        }
        dist = next;
    }
    Ok(MixingReport { walk: *walk, method: MixingMethod::Exact, epsilon, non_ergodic: walk.non_ergodic(), rows })
}

/// Exact curve by evolving the full `C^N`-state distribution from `start`
/// through an explicit sparse kernel. Used to cross-check the shell chain.
pub fn exact_mixing_curve_full(walk: &WalkConfig, start: &ChildModel, t_max: u64) -> Result<Vec<f64>, SamplerError> {
    walk.validate()?;
    let states = walk.num_states();
    if states > EXACT_STATE_LIMIT {
        return Err(SamplerError::TooLarge(states));
    }
    let (n, c, k) = (walk.num_layers, walk.candidates, walk.k);
    let states = states as usize;
    let subsets: Vec<Vec<usize>> = combinations(n, k);
    let mut kernel: Vec<Vec<(usize, f64)>> = Vec::with_capacity(states);
    for s in 0..states {
        let child = ChildModel::from_index(s as u128, n, c);
        let mut out: std::collections::BTreeMap<usize, f64> = Default::default();
        for subset in &subsets {
            let options: Vec<Vec<usize>> =
                subset.iter().map(|&l| (0..c).filter(|&o| walk.lazy || o != child.ops()[l]).collect()).collect();
            let weight = 1.0 / subsets.len() as f64 / options.iter().map(|o| o.len() as f64).product::<f64>();
            let mut cursor = vec![0usize; subset.len()];
            loop {
                let mut next = child.clone();
                for (i, &l) in subset.iter().enumerate() {
                    next.ops_mut()[l] = options[i][cursor[i]];
                }
                *out.entry(next.index(c) as usize).or_default() += weight;
                let mut i = 0;
                while i < cursor.len() {
                    cursor[i] += 1;
                    if cursor[i] < options[i].len() {
                        break;
                    }
                    cursor[i] = 0;
                    i += 1;
                }
                if i == cursor.len() {
                    break;
                }
            }
        }
        kernel.push(out.into_iter().collect());
    }
    let uniform = 1.0 / states as f64;
    let mut dist = vec![0.0; states];
    dist[start.index(c) as usize] = 1.0;
    let mut tvs = Vec::with_capacity(t_max as usize + 1);
    for _ in 0..=t_max {
        tvs.push(0.5 * dist.iter().map(|p| (p - uniform).abs()).sum::<f64>());
        let mut next = vec![0.0; states];
        for (s, &p) in dist.iter().enumerate() {
            if p != 0.0 {
                for &(to, q) in &kernel[s] {
                    next[to] += p * q;
                }
            }
        }
        dist = next;
    }
    Ok(tvs)
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Monte-Carlo estimate of the curve for spaces too large to evolve
/// exactly: `walkers` independent chains from a common start, with total
/// variation measured on the distance-to-start shells (equal to the full
/// total variation by symmetry, up to sampling noise).
pub fn monte_carlo_mixing(walk: &WalkConfig, t_max: u64, walkers: usize, epsilon: f64, rng: &mut Rng) -> Result<MixingReport, SamplerError> {
    walk.validate()?;
    let n = walk.num_layers;
    let alive = AliveMask::all(n, walk.candidates);
    let start = ChildModel::new(vec![0; n]);
    let mut chains = vec![start.clone(); walkers.max(1)];
    let target = shell_stationary(walk);
    let mut rows = Vec::with_capacity(t_max as usize + 1);
    for t in 0..=t_max {
        let mut hist = vec![0.0; n + 1];
        for c in &chains {
            hist[c.hamming(&start)] += 1.0 / chains.len() as f64;
        }
        rows.push(row(t, half_l1(&hist, &target), n));
        for c in chains.iter_mut() {
            *c = magic_t_step(c, &alive, walk.k, walk.lazy, rng);
        }
    }
    Ok(MixingReport {
        walk: *walk,
        method: MixingMethod::MonteCarlo { walkers: chains.len() },
        epsilon,
        non_ergodic: walk.non_ergodic(),
        rows,
    })
}
