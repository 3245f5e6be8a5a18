//! One function per subcommand. Each writes its artifacts into its own
//! directory under `<root>/<name>/` and returns a short summary.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use magic_nas::analysis::{
    curve_csv, interference_vs_m, og_layer_sweep, probe_batch, rank_experiment, similarity_matrix, InterferenceProbe,
    RankReport,
};
use magic_nas::rng;
use magic_nas::sampling::{
    exact_mixing_curve, mixing_steps_for, monte_carlo_mixing, sample_uniform, MixingMethod, MixingReport,
};
use magic_nas::search::{run_search, SearchError, ShrinkState};
use magic_nas::supernet::{load_checkpoint, save_checkpoint, ChildModel, SuperNet};
use magic_nas::tasks::Task;
use magic_nas::trainer::{evaluate_proxy, train_standalone, Method, TrainLog, Trainer};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::output::RunDir;

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const TRACE_FILE: &str = "search_trace.json";

/// Stream tag for child sampling in the rank experiment.
const RANK_CHILDREN: u64 = 0x7261_6e6b;

/// Resolved inputs shared by all subcommands.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: ExperimentConfig,
    pub root: PathBuf,
}

impl Context {
    fn run_dir(&self, leaf: &str) -> Result<RunDir, CliError> {
        let dir = RunDir::create(self.root.join(&self.config.name).join(leaf))?;
        dir.write_json(CONFIG_FILE, &self.config)?;
        Ok(dir)
    }

    fn task(&self) -> Result<Task, CliError> {
        Task::new(self.config.task.clone()).map_err(|e| CliError::Config(format!("task: {}", e)))
    }

    /// Directory of `train` for the configured method.
    pub fn train_dir(&self) -> PathBuf {
        self.root.join(&self.config.name).join(format!("train-{}", self.config.train.method.name()))
    }

    fn load_net(&self, checkpoint: Option<&Path>) -> Result<SuperNet<f64>, CliError> {
        let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| self.train_dir().join(CHECKPOINT_DIR));
        let net = load_checkpoint::<f64>(&path)?.net;
        if net.space() != &self.config.search_space()? {
            return Err(CliError::Config(format!(
                "checkpoint {} was trained on a different search space than the config describes",
                path.display()
            )));
        }
        Ok(net)
    }
}

fn method_leaf(prefix: &str, method: Method) -> String {
    format!("{}-{}", prefix, method.name())
}

/// Appends the records of `log` not yet written.
struct LogWriter {
    path: PathBuf,
    steps: usize,
    epochs: usize,
}

impl LogWriter {
    /// Opens `path`, dropping records at or past `step` / `epoch` (what a
    /// checkpoint taken there has not seen yet).
    fn open(path: PathBuf, resume_at: Option<(u64, u64)>) -> Result<Self, CliError> {
        let kept = match (resume_at, path.exists()) {
            (Some((step, epoch)), true) => {
                let reader = BufReader::new(fs::File::open(&path)?);
                let mut kept = String::new();
                for line in reader.lines() {
                    let line = line?;
                    let v: serde_json::Value = serde_json::from_str(&line)?;
                    let keep = match v["kind"].as_str() {
                        Some("step") => v["step"].as_u64().is_some_and(|s| s < step),
                        Some("epoch") => v["epoch"].as_u64().is_some_and(|e| e < epoch),
                        _ => false,
                    };
                    if keep {
                        kept.push_str(&line);
                        kept.push('\n');
                    }
                }
                kept
            }
            _ => String::new(),
        };
        fs::write(&path, kept)?;
        Ok(Self { path, steps: 0, epochs: 0 })
    }

    fn flush(&mut self, log: &TrainLog) -> std::io::Result<()> {
        let chunk = TrainLog { steps: log.steps[self.steps..].to_vec(), epochs: log.epochs[self.epochs..].to_vec() };
        let mut out = BufWriter::new(OpenOptions::new().append(true).open(&self.path)?);
        chunk.write_jsonl(&mut out)?;
        out.flush()?;
        self.steps = log.steps.len();
        self.epochs = log.epochs.len();
        Ok(())
    }
}

fn open_trainer<'a>(
    ctx: &Context,
    task: &'a Task,
    dir: &RunDir,
    resume: bool,
) -> Result<(Trainer<'a, f64>, LogWriter), CliError> {
    let cfg = &ctx.config;
    let ckpt_dir = dir.file(CHECKPOINT_DIR);
    let trainer = if resume && ckpt_dir.join("manifest.json").exists() {
        let ckpt = load_checkpoint::<f64>(&ckpt_dir)?;
        if ckpt.net.space() != &cfg.search_space()? {
            return Err(CliError::Config("checkpoint space does not match the config".into()));
        }
        Trainer::resume(ckpt, task, cfg.train.clone())?
    } else {
        Trainer::new(SuperNet::new(cfg.search_space()?, cfg.seed), task, cfg.train.clone())?
    };
    let resume_at = resume.then(|| (trainer.state.step, trainer.epoch()));
    let log = LogWriter::open(dir.file(TRAIN_LOG), resume_at)?;
    Ok((trainer, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub method: Method,
    /// False when the run stopped early at `max_epochs`.
    pub finished: bool,
    pub steps: u64,
    pub fingerprint: String,
    pub anchor: Option<ChildModel>,
    pub anchor_val: Option<f64>,
}

/// Trains the super-net; checkpoints and log chunks are written after every
/// epoch so an interrupted run can continue with `resume`. At most
/// `max_epochs` epochs run in this call.
pub fn cmd_train(ctx: &Context, resume: bool, max_epochs: Option<u64>) -> Result<TrainSummary, CliError> {
    let dir = ctx.run_dir(&method_leaf("train", ctx.config.train.method))?;
    let task = ctx.task()?;
    let (mut trainer, mut log) = open_trainer(ctx, &task, &dir, resume)?;
    let mut budget = max_epochs.unwrap_or(u64::MAX);
    if budget == 0 {
        return Err(CliError::Config("--max-epochs must be positive".into()));
    }
    while !trainer.finished() && budget > 0 {
        budget -= 1;
        let outcome = trainer.run_epoch();
        log.flush(&trainer.log)?;
        if let Err(e) = outcome {
            dir.finish("train", "failed")?;
            return Err(e.into());
        }
        save_checkpoint(&dir.file(CHECKPOINT_DIR), &trainer.checkpoint())
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    if trainer.state.step == 0 {
        save_checkpoint(&dir.file(CHECKPOINT_DIR), &trainer.checkpoint())
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let summary = TrainSummary {
        method: trainer.cfg.method,
        finished: trainer.finished(),
        steps: trainer.state.step,
        fingerprint: format!("{:016x}", trainer.net.fingerprint()),
        anchor: trainer.state.anchor.as_ref().map(|a| a.anchor.clone()),
        anchor_val: trainer.state.anchor.as_ref().and_then(|a| a.val_score),
    };
    dir.write_json("train_summary.json", &summary)?;
    dir.finish("train", if summary.finished { "ok" } else { "paused" })?;
    Ok(summary)
}

/// Interference analysis of a trained checkpoint.
pub fn cmd_analyze(ctx: &Context, checkpoint: Option<&Path>) -> Result<PathBuf, CliError> {
    let cfg = &ctx.config;
    let a = &cfg.analysis;
    let mut net = ctx.load_net(checkpoint)?;
    net.freeze();
    let space = net.space().clone();
    let og = a.og_layer - 1;
    let dir = ctx.run_dir(&method_leaf("analyze", cfg.train.method))?;
    let task = ctx.task()?;
    let batch = probe_batch(&task, a.batch_size, cfg.seed);

    let mut r = rng::stream(cfg.seed, &[rng::tag::ANALYSIS, u64::MAX]);
    let probe = InterferenceProbe::draw(space.num_layers, space.num_candidates(), og, 1, &mut r)?;
    let matrix = similarity_matrix(&net, &probe.children, space.labels(), og, probe.og_op, &batch)?;
    dir.write("similarity_matrix.csv", matrix.to_csv())?;
    dir.write_json("similarity_probe.json", &probe)?;

    let curve = interference_vs_m(&net, &batch, og, &a.ms, a.repeats, cfg.seed)?;
    dir.write("interference_vs_m.csv", curve_csv(&curve))?;
    let sweep_layers: Vec<usize> = a.sweep_layers.iter().map(|l| l - 1).collect();
    let sweep = og_layer_sweep(&net, &batch, &sweep_layers, a.sweep_m, a.repeats, cfg.seed)?;
    dir.write("og_layer_sweep.csv", curve_csv(&sweep))?;
    dir.finish("analyze", "ok")?;
    Ok(dir.path)
}

/// `count` distinct uniformly drawn children.
pub fn distinct_children(space: &magic_nas::ops::SearchSpace, count: usize, seed: u64) -> Result<Vec<ChildModel>, CliError> {
    if count < 2 {
        return Err(CliError::Config(format!("rank needs at least 2 children, got {}", count)));
    }
    if (count as u128) > space.num_children() {
        return Err(CliError::Config(format!("{} children requested, space has {}", count, space.num_children())));
    }
    let mut r = rng::stream(seed, &[rng::tag::ANALYSIS, RANK_CHILDREN]);
    let mut children: Vec<ChildModel> = Vec::with_capacity(count);
    while children.len() < count {
        let c = sample_uniform(space, &mut r);
        if !children.contains(&c) {
            children.push(c);
        }
    }
    Ok(children)
}

/// Kendall tau between super-net proxies and standalone accuracy.
pub fn cmd_rank(ctx: &Context, checkpoint: Option<&Path>) -> Result<RankReport, CliError> {
    let cfg = &ctx.config;
    let children = distinct_children(&cfg.search_space()?, cfg.rank.children, cfg.seed)?;
    let net = ctx.load_net(checkpoint)?;
    let dir = ctx.run_dir(&method_leaf("rank", cfg.train.method))?;
    let task = ctx.task()?;
    let val = task.val_set(cfg.rank.proxy_val_batches, cfg.rank.proxy_val_batch_size);
    let report = rank_experiment(&net, &children, &task, &val, &cfg.rank.standalone)?;
    dir.write_json("rank_report.json", &report)?;
    dir.finish("rank", "ok")?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingSummary {
    pub states: u128,
    pub t_max: u64,
    /// Steps after which the coupling bound guarantees `epsilon`.
    pub bound_steps: u64,
    pub first_below_epsilon: Option<u64>,
    pub coupling_bound_holds: bool,
    pub paper_bound_holds: bool,
    pub non_ergodic: bool,
}

/// Total-variation curve of the MAGIC-T walk.
pub fn cmd_mixing(ctx: &Context) -> Result<(MixingReport, MixingSummary), CliError> {
    let m = &ctx.config.mixing;
    let walk = m.walk();
    if walk.non_ergodic() {
        return Err(magic_nas::sampling::SamplerError::Periodic.into());
    }
    let bound_steps = mixing_steps_for(m.epsilon, m.num_layers)?;
    let t_max = if m.t_max == 0 { 2 * bound_steps } else { m.t_max };
    let report = match m.method {
        MixingMethod::Exact => exact_mixing_curve(&walk, t_max, m.epsilon)?,
        MixingMethod::MonteCarlo { walkers } => {
            let mut r = rng::stream(ctx.config.seed, &[rng::tag::ANALYSIS, RANK_CHILDREN + 1]);
            monte_carlo_mixing(&walk, t_max, walkers, m.epsilon, &mut r)?
        }
    };
    let summary = MixingSummary {
        states: walk.num_states(),
        t_max,
        bound_steps,
        first_below_epsilon: report.first_below(m.epsilon),
        coupling_bound_holds: report.coupling_bound_holds(),
        paper_bound_holds: report.paper_bound_holds(),
        non_ergodic: report.non_ergodic,
    };
    let dir = ctx.run_dir("mixing")?;
    dir.write("mixing.csv", report.to_csv())?;
    dir.write_json("mixing_summary.json", &summary)?;
    dir.finish("mixing", "ok")?;
    Ok((report, summary))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalChild {
    pub child: ChildModel,
    pub description: String,
    pub proxy: f64,
    pub standalone_accuracy: Option<f64>,
    pub deletions: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SearchOutcome {
    Finished(FinalChild),
    /// Stopped at `max_epochs`; rerun with `resume` to continue.
    Paused { epoch: u64 },
}

const PAUSE: &str = "paused at the epoch limit";

/// Progressive shrinking; the trace and a checkpoint are written after every
/// shrink step, so `resume` continues an interrupted search.
pub fn cmd_search(ctx: &Context, resume: bool, max_epochs: Option<u64>) -> Result<SearchOutcome, CliError> {
    let cfg = &ctx.config;
    let dir = ctx.run_dir(&method_leaf("search", cfg.train.method))?;
    let task = ctx.task()?;
    let space = cfg.search_space()?;
    let trace_path = dir.file(TRACE_FILE);
    let resuming = resume && trace_path.exists() && dir.file(CHECKPOINT_DIR).join("manifest.json").exists();
    let (mut trainer, mut log) = open_trainer(ctx, &task, &dir, resuming)?;
    let mut state = if resuming {
        serde_json::from_str(&fs::read_to_string(&trace_path)?)?
    } else {
        ShrinkState::new(
            space.num_layers,
            space.num_candidates(),
            cfg.search.shrink.resolved_deletions(space.num_layers, space.num_candidates()),
        )
    };
    let ckpt_dir = dir.file(CHECKPOINT_DIR);
    let mut budget = max_epochs.unwrap_or(u64::MAX);
    if budget == 0 {
        return Err(CliError::Config("--max-epochs must be positive".into()));
    }
    let outcome = run_search(&mut trainer, &mut state, &cfg.search.shrink, |t, st| {
        let hook = |e: String| SearchError::Hook(e);
        log.flush(&t.log).map_err(|e| hook(e.to_string()))?;
        save_checkpoint(&ckpt_dir, &t.checkpoint()).map_err(|e| hook(e.to_string()))?;
        let text = serde_json::to_string_pretty(st).map_err(|e| hook(e.to_string()))?;
        fs::write(&trace_path, text + "\n").map_err(|e| hook(e.to_string()))?;
        budget -= 1;
        if budget == 0 && st.remaining_children() > 1 {
            return Err(hook(PAUSE.into()));
        }
        Ok(())
    });
    let child = match outcome {
        Ok(c) => c,
        Err(SearchError::Hook(msg)) if msg == PAUSE => {
            dir.finish("search", "paused")?;
            return Ok(SearchOutcome::Paused { epoch: state.epoch });
        }
        Err(e) => {
            log.flush(&trainer.log)?;
            dir.write_json(TRACE_FILE, &state)?;
            dir.finish("search", "failed")?;
            return Err(e.into());
        }
    };
    dir.write_json(TRACE_FILE, &state)?;
    let proxy = evaluate_proxy(&trainer.net, &child, trainer.val_set())?;
    let standalone_accuracy = if cfg.search.evaluate_final {
        Some(train_standalone::<f64>(&space, &child, &task, &cfg.rank.standalone)?.1)
    } else {
        None
    };
    let result = FinalChild {
        description: child.describe(&space),
        child,
        proxy,
        standalone_accuracy,
        deletions: state.total_deletions(),
    };
    dir.write_json("final_child.json", &result)?;
    dir.finish("search", "ok")?;
    Ok(SearchOutcome::Finished(result))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandaloneResult {
    pub child: ChildModel,
    pub description: String,
    pub accuracy: f64,
}

/// Trains one child from scratch.
pub fn cmd_standalone(ctx: &Context, child: Option<&str>) -> Result<StandaloneResult, CliError> {
    let cfg = &ctx.config;
    let text = child
        .or(cfg.standalone.child.as_deref())
        .ok_or_else(|| CliError::Config("standalone needs a child (--child or standalone.child)".into()))?;
    let child: ChildModel = text.parse().map_err(|e| CliError::Config(format!("child {:?}: {}", text, e)))?;
    let space = cfg.search_space()?;
    child.validate(&space).map_err(|e| CliError::Config(e.to_string()))?;
    let dir = ctx.run_dir("standalone")?;
    let task = ctx.task()?;
    let (_, accuracy) = train_standalone::<f64>(&space, &child, &task, &cfg.rank.standalone)?;
    let result = StandaloneResult { description: child.describe(&space), child, accuracy };
    dir.write_json(&format!("standalone-{}.json", result.child), &result)?;
    dir.finish("standalone", "ok")?;
    Ok(result)
}
