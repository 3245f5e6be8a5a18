//! Command-line front end for the `magic-nas` toolkit.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use magic_nas::trainer::Method;

pub use commands::Context;
pub use config::ExperimentConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "magic-nas", version, about = "Weight-sharing architecture search at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML). Without it only the required `name` is needed, via --set name=...
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training method: spos, magic_t, magic_a or magic_at.
    #[arg(long)]
    pub method: Option<Method>,
    /// Output root (default: $MAGIC_NAS_OUT, then `out_dir`, then ./runs).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for parallel sections.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the super-net.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the last epoch checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs (resumable).
        #[arg(long)]
        max_epochs: Option<u64>,
    },
    /// Gradient-interference analysis of a trained checkpoint.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Rank correlation between super-net proxies and standalone training.
    Rank {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of sampled children.
        #[arg(long)]
        children: Option<usize>,
    },
    /// Mixing-time curve of the single-operator random walk.
    Mixing {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        candidates: Option<usize>,
        #[arg(long)]
        lazy: bool,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        t_max: Option<u64>,
    },
    /// Progressive-shrinking search.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resume: bool,
        /// Stop after this many shrink epochs (resumable).
        #[arg(long)]
        max_epochs: Option<u64>,
    },
    /// Train one child from scratch.
    Standalone {
        #[command(flatten)]
        common: Common,
        /// Operator index per layer, e.g. `0.2.1.3.0.1`.
        #[arg(long)]
        child: Option<String>,
    },
}

fn context(common: &Common, extra: Vec<String>) -> Result<Context, CliError> {
    let mut overrides = common.overrides.clone();
    if let Some(m) = common.method {
        overrides.push(format!("train.method=\"{}\"", m.name()));
    }
    overrides.extend(extra);
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path, &overrides)?,
        None => ExperimentConfig::parse("", &overrides)?,
    };
    if let Some(seed) = common.seed {
        config.set_seed(seed);
    }
    if common.jobs == 0 {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    let root = output::output_root(common.out.as_deref(), config.out_dir.as_deref());
    Ok(Context { config, root })
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {}", e)))
}

/// Runs a parsed command line and returns the line to print on success.
pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Train { common, resume, max_epochs } => {
            let ctx = context(&common, vec![])?;
            let s = pool(common.jobs)?.install(|| commands::cmd_train(&ctx, resume, max_epochs))?;
            let verb = if s.finished { "trained" } else { "paused" };
            Ok(format!("{} {} at step {} (weights {})", verb, s.method.name(), s.steps, s.fingerprint))
        }
        Command::Analyze { common, checkpoint } => {
            let ctx = context(&common, vec![])?;
            let dir = pool(common.jobs)?.install(|| commands::cmd_analyze(&ctx, checkpoint.as_deref()))?;
            Ok(format!("analysis written to {}", dir.display()))
        }
        Command::Rank { common, checkpoint, children } => {
            let extra = children.map(|c| format!("rank.children={}", c)).into_iter().collect();
            let ctx = context(&common, extra)?;
            let r = pool(common.jobs)?.install(|| commands::cmd_rank(&ctx, checkpoint.as_deref()))?;
            Ok(format!("kendall tau {:.4} over {} children", r.tau, r.children.len()))
        }
        Command::Mixing { common, layers, candidates, lazy, epsilon, t_max } => {
            let mut extra = Vec::new();
            extra.extend(layers.map(|v| format!("mixing.num_layers={}", v)));
            extra.extend(candidates.map(|v| format!("mixing.candidates={}", v)));
            extra.extend(epsilon.map(|v| format!("mixing.epsilon={:?}", v)));
            extra.extend(t_max.map(|v| format!("mixing.t_max={}", v)));
            if lazy {
                extra.push("mixing.lazy=true".into());
            }
            let ctx = context(&common, extra)?;
            let (_, s) = commands::cmd_mixing(&ctx)?;
            Ok(format!(
                "{} states, tv below epsilon at t = {}, coupling bound holds: {}",
                s.states,
                s.first_below_epsilon.map_or("never".into(), |t| t.to_string()),
                s.coupling_bound_holds
            ))
        }
        Command::Search { common, resume, max_epochs } => {
            let ctx = context(&common, vec![])?;
            match pool(common.jobs)?.install(|| commands::cmd_search(&ctx, resume, max_epochs))? {
                commands::SearchOutcome::Finished(f) => {
                    Ok(format!("selected {} ({}) proxy {:.4}", f.child, f.description, f.proxy))
                }
                commands::SearchOutcome::Paused { epoch } => Ok(format!("search paused after shrink epoch {}", epoch)),
            }
        }
        Command::Standalone { common, child } => {
            let ctx = context(&common, vec![])?;
            let r = pool(common.jobs)?.install(|| commands::cmd_standalone(&ctx, child.as_deref()))?;
            Ok(format!("{} ({}) accuracy {:.4}", r.child, r.description, r.accuracy))
        }
    }
}
