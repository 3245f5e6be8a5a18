//! Super-net training regimes, standalone child training and proxy
//! evaluation.

mod optim;

pub use optim::{lr_at, MomentState, Optimizer, OptimizerConfig};

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::alignment::{self, AlignTarget, AlignmentConfig, AnchorLogEntry, AnchorPolicy, AnchorState};
use crate::ops::SearchSpace;
use crate::rng::{self, Rng};
use crate::sampling::{sample_uniform_alive, AliveMask, Sampler, SamplerConfig, SamplerError, SamplerMode};
use crate::scalar::Scalar;
use crate::supernet::{ChildModel, ChildNet, Checkpoint, NetError, Objective, PathView, SuperNet};
use crate::tasks::{task_metric, Batch, Task};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Spos,
    MagicT,
    MagicA,
    MagicAt,
}

impl Method {
    pub fn uses_walk(self) -> bool {
        matches!(self, Method::MagicT | Method::MagicAt)
    }

    pub fn uses_alignment(self) -> bool {
        matches!(self, Method::MagicA | Method::MagicAt)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Spos => "spos",
            Method::MagicT => "magic_t",
            Method::MagicA => "magic_a",
            Method::MagicAt => "magic_at",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spos" => Ok(Method::Spos),
            "magic_t" => Ok(Method::MagicT),
            "magic_a" => Ok(Method::MagicA),
            "magic_at" => Ok(Method::MagicAt),
            other => Err(format!("unknown method {:?} (expected spos, magic_t, magic_a or magic_at)", other)),
        }
    }
}

/// Validation score used for anchor selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValMetric {
    Accuracy,
    NegLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub warmup_steps: u64,
    /// `mode` is implied by `method`; `k` and `lazy` apply to the walk.
    pub sampler: SamplerConfig,
    pub align: AlignmentConfig,
    pub anchor_policy: AnchorPolicy,
    pub seed: u64,
    pub steps_per_epoch: u64,
    /// Children scored at the end of each epoch for anchor selection.
    pub probe_pool: usize,
    pub val_batches: usize,
    pub val_batch_size: usize,
    pub val_metric: ValMetric,
    /// A step loss above this (or non-finite) aborts training.
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Spos,
            steps: 20_000,
            batch_size: 32,
            optimizer: OptimizerConfig::adam(1e-3),
            warmup_steps: 1_000,
            sampler: SamplerConfig::default(),
            align: AlignmentConfig::default(),
            anchor_policy: AnchorPolicy::BestSoFar,
            seed: 0,
            steps_per_epoch: 1_000,
            probe_pool: 64,
            val_batches: 4,
            val_batch_size: 32,
            val_metric: ValMetric::Accuracy,
            divergence_threshold: 1e3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, space: &SearchSpace) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.warmup_steps > self.steps {
            return bad(format!("warmup_steps {} exceeds steps {}", self.warmup_steps, self.steps));
        }
        if self.batch_size == 0 || self.val_batch_size == 0 || self.val_batches == 0 {
            return bad("batch sizes and val_batches must be positive".into());
        }
        if self.steps_per_epoch == 0 {
            return bad("steps_per_epoch must be positive".into());
        }
        if self.method.uses_alignment() && self.probe_pool == 0 && self.align.target == AlignTarget::Anchor {
            return bad("probe_pool must be positive for anchor alignment".into());
        }
        self.optimizer.validate().map_err(TrainError::Config)?;
        self.align.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        self.anchor_policy.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        self.sampler_config().validate(space)?;
        Ok(())
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        let mode = if self.method.uses_walk() { SamplerMode::MagicT } else { SamplerMode::Uniform };
        SamplerConfig { mode, seed: self.seed, ..self.sampler.clone() }
    }

    pub fn num_epochs(&self) -> u64 {
        self.steps.div_ceil(self.steps_per_epoch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub child: ChildModel,
    pub pred_loss: f64,
    pub align_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    /// Mean validation score of the probe pool (alignment methods only).
    pub probe_mean: Option<f64>,
    pub anchor: Option<AnchorLogEntry>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per line: step records first, then epoch records,
    /// each tagged with `kind`.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Tagged<'a, R> {
            kind: &'a str,
            #[serde(flatten)]
            record: &'a R,
        }
        for s in &self.steps {
            serde_json::to_writer(&mut w, &Tagged { kind: "step", record: s })?;
            w.write_all(b"\n")?;
        }
        for e in &self.epochs {
            serde_json::to_writer(&mut w, &Tagged { kind: "epoch", record: e })?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn anchor_log(&self) -> Vec<&AnchorLogEntry> {
        self.epochs.iter().filter_map(|e| e.anchor.as_ref()).collect()
    }
}

/// Resumable trainer state, stored in checkpoints at epoch boundaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub sampler: Sampler,
    pub anchor: Option<AnchorState>,
    pub alive: AliveMask,
}

/// Mean of the validation metric of one path.
pub fn validation_score<T: Scalar>(view: &PathView<'_, T>, val: &[Batch], metric: ValMetric) -> Result<f64, NetError> {
    let mut total = 0.0;
    for b in val {
        total += match metric {
            ValMetric::Accuracy => {
                let (logits, _) = view.forward(b, false)?;
                task_metric(&logits, b).map_err(|_| NetError::NoTargets(b.id))?
            }
            ValMetric::NegLoss => -view.prediction_loss(b)?,
        };
    }
    Ok(total / val.len().max(1) as f64)
}

/// Negative mean validation loss of `child` through the shared weights.
pub fn evaluate_proxy<T: Scalar>(net: &SuperNet<T>, child: &ChildModel, val: &[Batch]) -> Result<f64, NetError> {
    validation_score(&net.view(child)?, val, ValMetric::NegLoss)
}

/// Drives super-net training step by step.
pub struct Trainer<'a, T> {
    pub cfg: TrainConfig,
    pub task: &'a Task,
    pub net: SuperNet<T>,
    pub optimizer: Optimizer<T>,
    pub state: TrainState,
    pub log: TrainLog,
    val: Vec<Batch>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(net: SuperNet<T>, task: &'a Task, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate(net.space())?;
        let sampler = Sampler::new(cfg.sampler_config(), net.space())?;
        let alive = AliveMask::for_space(net.space());
        let anchor = cfg.method.uses_alignment().then(|| {
            let mut r = rng::stream(cfg.seed, &[rng::tag::ALIGN]);
            AnchorState::new(sample_uniform_alive(&alive, &mut r), cfg.anchor_policy)
        });
        let optimizer = Optimizer::new(cfg.optimizer.clone());
        let val = task.val_set(cfg.val_batches, cfg.val_batch_size);
        Ok(Self { cfg, task, net, optimizer, state: TrainState { step: 0, sampler, anchor, alive }, log: TrainLog::default(), val })
    }

    /// Resumes from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: Checkpoint<T>, task: &'a Task, cfg: TrainConfig) -> Result<Self, TrainError> {
        let mut t = Self::new(ckpt.net, task, cfg)?;
        if let Some(opt) = ckpt.optimizer {
            t.optimizer = opt;
        }
        if !ckpt.extra.is_null() {
            t.state = serde_json::from_value(ckpt.extra).map_err(|e| TrainError::Config(format!("bad trainer state: {}", e)))?;
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            net: self.net.clone(),
            optimizer: Some(self.optimizer.clone()),
            extra: serde_json::to_value(&self.state).expect("trainer state serializes"),
        }
    }

    pub fn val_set(&self) -> &[Batch] {
        &self.val
    }

    pub fn epoch(&self) -> u64 {
        self.state.step / self.cfg.steps_per_epoch
    }

    pub fn finished(&self) -> bool {
        self.state.step >= self.cfg.steps
    }

    /// Restricts sampling to `alive` and repairs the walk state.
    pub fn set_alive(&mut self, alive: AliveMask) {
        let mut r = rng::stream(self.cfg.seed, &[rng::tag::SAMPLER, u64::MAX, self.state.step]);
        self.state.sampler.repair(&alive, &mut r);
        if let Some(anchor) = &mut self.state.anchor {
            if !alive.admits(&anchor.anchor) {
                anchor.anchor = sample_uniform_alive(&alive, &mut r);
                anchor.val_score = None;
            }
        }
        self.state.alive = alive;
    }

    /// Runs one epoch (cut short at `cfg.steps`), then the end-of-epoch
    /// anchor evaluation. Trainers only stop at epoch boundaries, which is
    /// where checkpoints are taken.
    pub fn run_epoch(&mut self) -> Result<(), TrainError> {
        if self.finished() {
            return Ok(());
        }
        let epoch = self.epoch();
        let spe = self.cfg.steps_per_epoch;
        let mut sampler_rng = rng::stream(self.cfg.seed, &[rng::tag::SAMPLER, epoch]);
        let mut data_rng = self.task.train_stream(self.cfg.seed, epoch);
        let mut align_rng = rng::stream(self.cfg.seed, &[rng::tag::ALIGN, epoch]);
        let end = ((epoch + 1) * spe).min(self.cfg.steps);
        while self.state.step < end {
            self.step(epoch, &mut sampler_rng, &mut data_rng, &mut align_rng)?;
        }
        self.end_epoch(epoch)
    }

    fn step(&mut self, epoch: u64, sampler_rng: &mut Rng, data_rng: &mut Rng, align_rng: &mut Rng) -> Result<(), TrainError> {
        let step = self.state.step;
        let child = self.state.sampler.next(&self.state.alive, sampler_rng);
        let batch = self.task.gen_batch(self.cfg.batch_size, data_rng);
        let align_active =
            self.cfg.method.uses_alignment() && epoch >= self.cfg.align.warm_start_epochs && self.cfg.align.lambda > 0.0;
        let diverged = |loss: f64| TrainError::Diverged { step, loss };
        let outcome = if align_active {
            let target = match self.cfg.align.target {
                AlignTarget::Anchor => {
                    let anchor = &self.state.anchor.as_ref().expect("alignment methods keep an anchor").anchor;
                    self.net.forward_path(anchor, &batch, true)?.1.expect("trace captured")
                }
                AlignTarget::Average => {
                    let mut traces = Vec::with_capacity(self.net.space().num_candidates());
                    for _ in 0..self.net.space().num_candidates() {
                        let c = sample_uniform_alive(&self.state.alive, align_rng);
                        traces.push(self.net.forward_path(&c, &batch, true)?.1.expect("trace captured"));
                    }
                    alignment::average_trace(&traces).expect("nonempty traces")
                }
            };
            let layers = self.cfg.align.aligned_layers(self.net.space().num_layers);
            let objective = Objective::Aligned { target: &target, layers: &layers, lambda: self.cfg.align.lambda };
            self.net.path_loss_and_grads(&child, &batch, objective)
        } else {
            self.net.path_loss_and_grads(&child, &batch, Objective::Prediction)
        };
        let outcome = match outcome {
            Ok(o) => o,
            Err(NetError::NonFinite { .. }) => return Err(diverged(f64::NAN)),
            Err(e) => return Err(e.into()),
        };
        if !outcome.loss.is_finite() || outcome.loss > self.cfg.divergence_threshold {
            return Err(diverged(outcome.loss));
        }
        let lr = lr_at(step, self.cfg.warmup_steps, self.cfg.steps, self.cfg.optimizer.peak_lr());
        self.optimizer.set_lr(lr);
        self.net.apply_update(&outcome.grads, &mut self.optimizer)?;
        self.log.steps.push(StepRecord { step, child, pred_loss: outcome.pred_loss, align_loss: outcome.align_loss, lr });
        self.state.step += 1;
        Ok(())
    }

    fn end_epoch(&mut self, epoch: u64) -> Result<(), TrainError> {
        let mut record = EpochRecord { epoch, probe_mean: None, anchor: None };
        if let Some(anchor) = self.state.anchor.clone() {
            if self.cfg.align.target == AlignTarget::Anchor {
                let mut r = rng::stream(self.cfg.seed, &[rng::tag::PROBE, epoch]);
                let mut pool: Vec<(ChildModel, f64)> = Vec::with_capacity(self.cfg.probe_pool + 1);
                let mut candidates: Vec<ChildModel> =
                    (0..self.cfg.probe_pool).map(|_| sample_uniform_alive(&self.state.alive, &mut r)).collect();
                if matches!(anchor.policy, AnchorPolicy::TopP { .. }) {
                    candidates.push(anchor.anchor.clone());
                }
                candidates.sort();
                candidates.dedup();
                for c in candidates {
                    let score = validation_score(&self.net.view(&c)?, &self.val, self.cfg.val_metric)?;
                    pool.push((c, score));
                }
                record.probe_mean = Some(pool.iter().map(|p| p.1).sum::<f64>() / pool.len() as f64);
                let (mut next, replaced) = match anchor.policy {
                    AnchorPolicy::BestSoFar => {
                        let best = pool
                            .iter()
                            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                            .expect("nonempty pool");
                        alignment::maybe_replace_anchor(&anchor, &best.0, best.1)
                    }
                    AnchorPolicy::TopP { .. } => alignment::select_anchor_top_p(&pool, &anchor),
                };
                next.last_eval_epoch = Some(epoch);
                record.anchor = Some(AnchorLogEntry {
                    epoch,
                    anchor: next.anchor.clone(),
                    val: next.val_score,
                    replaced,
                    policy: next.policy,
                });
                self.state.anchor = Some(next);
            }
        }
        self.log.epochs.push(record);
        Ok(())
    }

    pub fn run(&mut self) -> Result<(), TrainError> {
        while !self.finished() {
            self.run_epoch()?;
        }
        Ok(())
    }
}

/// Trains `net` with `cfg` from scratch.
pub fn train_supernet<T: Scalar>(net: SuperNet<T>, task: &Task, cfg: TrainConfig) -> Result<(SuperNet<T>, TrainLog), TrainError> {
    let mut t = Trainer::new(net, task, cfg)?;
    t.run()?;
    Ok((t.net, t.log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StandaloneConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub warmup_steps: u64,
    pub seed: u64,
    pub val_batches: usize,
    pub val_batch_size: usize,
    pub divergence_threshold: f64,
}

impl Default for StandaloneConfig {
    fn default() -> Self {
        Self {
            steps: 2_000,
            batch_size: 32,
            optimizer: OptimizerConfig::adam(1e-3),
            warmup_steps: 100,
            seed: 0,
            val_batches: 4,
            val_batch_size: 32,
            divergence_threshold: 1e3,
        }
    }
}

/// Trains `child` from scratch and returns the model with its held-out
/// masked-token accuracy.
pub fn train_standalone<T: Scalar>(
    space: &SearchSpace,
    child: &ChildModel,
    task: &Task,
    cfg: &StandaloneConfig,
) -> Result<(ChildNet<T>, f64), TrainError> {
    if cfg.warmup_steps > cfg.steps {
        return Err(TrainError::Config(format!("warmup_steps {} exceeds steps {}", cfg.warmup_steps, cfg.steps)));
    }
    cfg.optimizer.validate().map_err(TrainError::Config)?;
    let mut model = ChildNet::<T>::init(space, child, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer.clone());
    let mut data = task.train_stream(cfg.seed, 0);
    for step in 0..cfg.steps {
        let batch = task.gen_batch(cfg.batch_size, &mut data);
        let outcome = match model.view().loss_and_grads(&batch, Objective::Prediction) {
            Ok(o) => o,
            Err(NetError::NonFinite { .. }) => return Err(TrainError::Diverged { step, loss: f64::NAN }),
            Err(e) => return Err(e.into()),
        };
        if !outcome.loss.is_finite() || outcome.loss > cfg.divergence_threshold {
            return Err(TrainError::Diverged { step, loss: outcome.loss });
        }
        opt.set_lr(lr_at(step, cfg.warmup_steps, cfg.steps, cfg.optimizer.peak_lr()));
        model.apply_update(&outcome.grads, &mut opt);
    }
    let val = task.val_set(cfg.val_batches, cfg.val_batch_size);
    let metric = validation_score(&model.view(), &val, ValMetric::Accuracy)?;
    Ok((model, metric))
}

#[cfg(test)]
mod tests;
