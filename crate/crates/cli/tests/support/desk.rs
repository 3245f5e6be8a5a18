//! Desk-scale experiments behind the slow acceptance criteria. Trained nets
//! and standalone ground truth are cached so criteria can share runs.

use std::collections::BTreeMap;
use std::time::Instant;

use magic_nas::alignment::{AlignTarget, AlignmentConfig};
use magic_nas::analysis::{interference_vs_m, kendall_tau, og_layer_sweep, probe_batch, proxies, standalone_truth};
use magic_nas::ops::{OperatorSpec, SearchSpace};
use magic_nas::rng;
use magic_nas::sampling::sample_uniform;
use magic_nas::search::{run_search, SearchConfig, ShrinkState};
use magic_nas::supernet::{ChildModel, SuperNet};
use magic_nas::tasks::{Batch, Generator, Task, TaskSpec};
use magic_nas::trainer::{Method, OptimizerConfig, StandaloneConfig, TrainConfig, Trainer};
use magic_nas::Net;

pub const SEEDS: [u64; 3] = [0, 1, 2];
pub const SEQ_LEN: usize = 16;
pub const BATCH: usize = 8;
pub const STEPS: u64 = 20_000;
pub const RANK_CHILDREN: usize = 16;
pub const PROBE_BATCH: usize = 32;
pub const REPEATS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Regime {
    Spos,
    /// Every layer pulled towards the mean trace of random children.
    Average,
    MagicT { k: usize },
    MagicAt,
}

pub fn space() -> SearchSpace {
    let base = SearchSpace::desk_default();
    SearchSpace::new(base.num_layers, base.candidates, base.vocab, SEQ_LEN).expect("valid desk space")
}

pub fn task_spec() -> TaskSpec {
    TaskSpec { seq_len: SEQ_LEN, ..TaskSpec::default() }
}

pub fn train_config(regime: Regime, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig { steps: STEPS, batch_size: BATCH, seed, ..TrainConfig::default() };
    match regime {
        Regime::Spos => cfg.method = Method::Spos,
        Regime::Average => {
            cfg.method = Method::MagicA;
            cfg.align = AlignmentConfig { lambda: 0.5, target: AlignTarget::Average, ..AlignmentConfig::default() };
        }
        Regime::MagicT { k } => {
            cfg.method = Method::MagicT;
            cfg.sampler.k = k;
        }
        Regime::MagicAt => {
            cfg.method = Method::MagicAt;
            // N=6: boundaries after layers 3 and 6
            cfg.align = AlignmentConfig { lambda: 0.5, block_size: 3, ..AlignmentConfig::default() };
        }
    }
    cfg
}

pub fn standalone_config(seed: u64) -> StandaloneConfig {
    StandaloneConfig { steps: 2_000, batch_size: 16, warmup_steps: 100, seed, val_batches: 8, val_batch_size: 32, ..StandaloneConfig::default() }
}

pub struct Lab {
    pub space: SearchSpace,
    pub task: Task,
    pub val: Vec<Batch>,
    nets: BTreeMap<(Regime, u64), Net>,
    truth: BTreeMap<u64, (Vec<ChildModel>, Vec<f64>)>,
}

impl Default for Lab {
    fn default() -> Self {
        Self::new()
    }
}

impl Lab {
    pub fn new() -> Self {
        let task = Task::new(task_spec()).expect("valid task");
        let probe = standalone_config(0);
        let val = task.val_set(probe.val_batches, probe.val_batch_size);
        Self { space: space(), task, val, nets: BTreeMap::new(), truth: BTreeMap::new() }
    }

    /// The frozen super-net trained under `regime`.
    pub fn net(&mut self, regime: Regime, seed: u64) -> &Net {
        if !self.nets.contains_key(&(regime, seed)) {
            let started = Instant::now();
            let net = SuperNet::new(self.space.clone(), seed);
            let mut trainer = Trainer::new(net, &self.task, train_config(regime, seed)).expect("valid train config");
            trainer.run().expect("training converges");
            let mut net = trainer.net;
            net.freeze();
            eprintln!("  trained {:?} seed {} in {:.0}s", regime, seed, started.elapsed().as_secs_f64());
            self.nets.insert((regime, seed), net);
        }
        &self.nets[&(regime, seed)]
    }

    /// Mean off-diagonal similarity at each `m`, first layer as o_g.
    pub fn m_curve(&mut self, regime: Regime, seed: u64, ms: &[usize]) -> Vec<f64> {
        let batch = probe_batch(&self.task, PROBE_BATCH, seed);
        let net = self.net(regime, seed);
        interference_vs_m(net, &batch, 0, ms, REPEATS, seed).expect("probe runs").iter().map(|p| p.mean).collect()
    }

    /// Similarity at `m = 1` for each 0-based o_g layer.
    pub fn layer_sweep(&mut self, regime: Regime, seed: u64, layers: &[usize]) -> Vec<f64> {
        let batch = probe_batch(&self.task, PROBE_BATCH, seed);
        let net = self.net(regime, seed);
        og_layer_sweep(net, &batch, layers, 1, REPEATS, seed).expect("probe runs").iter().map(|p| p.mean).collect()
    }

    /// Distinct uniformly drawn children and their standalone accuracy.
    pub fn truth(&mut self, seed: u64) -> (Vec<ChildModel>, Vec<f64>) {
        if !self.truth.contains_key(&seed) {
            let started = Instant::now();
            let mut r = rng::stream(seed, &[rng::tag::ANALYSIS, 8]);
            let mut children: Vec<ChildModel> = Vec::new();
            while children.len() < RANK_CHILDREN {
                let c = sample_uniform(&self.space, &mut r);
                if !children.contains(&c) {
                    children.push(c);
                }
            }
            let truth = standalone_truth::<f64>(&self.space, &children, &self.task, &standalone_config(seed)).expect("standalone training");
            eprintln!("  standalone truth seed {} in {:.0}s", seed, started.elapsed().as_secs_f64());
            self.truth.insert(seed, (children, truth));
        }
        self.truth[&seed].clone()
    }

    pub fn tau(&mut self, regime: Regime, seed: u64) -> f64 {
        let (children, truth) = self.truth(seed);
        let val = self.val.clone();
        let proxy = proxies(self.net(regime, seed), &children, &val).expect("proxies");
        kendall_tau(&proxy, &truth).expect("tau")
    }

    pub fn mean_tau(&mut self, regime: Regime) -> f64 {
        SEEDS.iter().map(|&s| self.tau(regime, s)).sum::<f64>() / SEEDS.len() as f64
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Column means of per-seed rows.
pub fn column_means(rows: &[Vec<f64>]) -> Vec<f64> {
    (0..rows[0].len()).map(|j| mean(&rows.iter().map(|r| r[j]).collect::<Vec<_>>())).collect()
}

/// Four layers choosing among a 3-tap convolution and two position-wise
/// feed-forward blocks. Only the convolution mixes positions: each one
/// widens the receptive field by one position on either side.
pub fn planted_space() -> SearchSpace {
    let d = 32;
    SearchSpace::new(
        4,
        vec![OperatorSpec::conv(d, 3), OperatorSpec::ffn(d, d).labeled("FFN"), OperatorSpec::ffn(d, d / 2).labeled("FFNh")],
        64,
        SEQ_LEN,
    )
    .expect("valid planted space")
}

/// Every sequence repeats its first token and most positions are masked, so
/// a masked token is recoverable iff an unmasked one lies within the
/// receptive field. Each extra convolution strictly helps, at any layer.
pub fn planted_task() -> TaskSpec {
    TaskSpec { seq_len: SEQ_LEN, generator: Generator::CopyShift { offset: 1 }, mask_rate: 0.8, ..TaskSpec::default() }
}

pub const PLANTED_CHILD: [usize; 4] = [0, 0, 0, 0];

pub struct PlantedRun {
    pub child: ChildModel,
    pub state: ShrinkState,
}

pub fn planted_search(seed: u64) -> PlantedRun {
    let space = planted_space();
    let task = Task::new(planted_task()).expect("valid task");
    let search = SearchConfig { deletions_per_epoch: 1, probe_paths: 64, score_val_batches: 4 };
    let epochs = (space.num_layers * (space.num_candidates() - 1)) as u64;
    let cfg = TrainConfig {
        steps: epochs * 2_000,
        steps_per_epoch: 2_000,
        batch_size: 16,
        optimizer: OptimizerConfig::adam(2e-3),
        warmup_steps: 500,
        seed,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(SuperNet::<f64>::new(space.clone(), seed), &task, cfg).expect("valid config");
    let mut state = ShrinkState::new(space.num_layers, space.num_candidates(), 1);
    let child = run_search(&mut trainer, &mut state, &search, |_, _| Ok(())).expect("search completes");
    PlantedRun { child, state }
}
