//! Experiment configuration: one TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use magic_nas::ops::{OperatorSpec, SearchSpace};
use magic_nas::sampling::{MixingMethod, WalkConfig};
use magic_nas::search::SearchConfig;
use magic_nas::tasks::TaskSpec;
use magic_nas::trainer::{StandaloneConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Everything a run depends on. Every field except `name` has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Root seed. Copied into every nested training seed.
    #[serde(default)]
    pub seed: u64,
    /// Output root; the `MAGIC_NAS_OUT` environment variable and `--out`
    /// take precedence.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub space: SpaceConfig,
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub rank: RankConfig,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub mixing: MixingConfig,
    #[serde(default)]
    pub standalone: StandaloneSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpaceConfig {
    pub num_layers: usize,
    pub hidden: usize,
    /// Compact operator specs such as `mha:4:32=MHA4`, `ffn:64` or `conv:3`.
    pub candidates: Vec<String>,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        let space = SearchSpace::desk_default();
        Self {
            num_layers: space.num_layers,
            hidden: space.hidden,
            candidates: space.candidates.iter().map(OperatorSpec::compact).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// 1-based layer of the probed shared operator.
    pub og_layer: usize,
    /// Numbers of differing layers for the m-curve.
    pub ms: Vec<usize>,
    pub repeats: usize,
    pub batch_size: usize,
    /// 1-based layers for the probed-layer sweep.
    pub sweep_layers: Vec<usize>,
    pub sweep_m: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { og_layer: 1, ms: vec![1, 2, 3, 4], repeats: 10, batch_size: 32, sweep_layers: vec![2, 4], sweep_m: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankConfig {
    pub children: usize,
    /// Validation batches for the super-net proxy.
    pub proxy_val_batches: usize,
    pub proxy_val_batch_size: usize,
    pub standalone: StandaloneConfig,
}

impl Default for RankConfig {
    fn default() -> Self {
        Self { children: 16, proxy_val_batches: 4, proxy_val_batch_size: 32, standalone: StandaloneConfig::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    #[serde(flatten)]
    pub shrink: SearchConfig,
    /// Train the final child from scratch and record its accuracy.
    pub evaluate_final: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixingConfig {
    pub num_layers: usize,
    pub candidates: usize,
    pub k: usize,
    pub lazy: bool,
    pub epsilon: f64,
    /// `0` selects twice the step count the bound needs for `epsilon`.
    pub t_max: u64,
    pub method: MixingMethod,
}

impl Default for MixingConfig {
    fn default() -> Self {
        Self { num_layers: 4, candidates: 3, k: 1, lazy: false, epsilon: 0.01, t_max: 0, method: MixingMethod::Exact }
    }
}

impl MixingConfig {
    pub fn walk(&self) -> WalkConfig {
        WalkConfig { num_layers: self.num_layers, candidates: self.candidates, k: self.k, lazy: self.lazy }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StandaloneSection {
    /// Child to train, e.g. `0.2.1.3.0.1`.
    pub child: Option<String>,
}

/// Seed keys owned by the top-level `seed`.
const NESTED_SEEDS: [&[&str]; 3] = [&["train", "seed"], &["train", "sampler", "seed"], &["rank", "standalone", "seed"]];

impl ExperimentConfig {
    /// Parses TOML text, applies `key.path=value` overrides and validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(format!("config: {}", e)))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        for path in NESTED_SEEDS {
            if lookup(&doc, path).is_some() {
                return Err(CliError::Config(format!("`{}` is not settable; use the top-level `seed`", path.join("."))));
            }
        }
        let mut cfg: Self =
            toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| CliError::Config(format!("config: {}", e)))?;
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {}", path.display(), e)))?;
        Self::parse(&text, overrides)
    }

    /// Sets the root seed and copies it into the nested configs.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.propagate_seed();
    }

    fn propagate_seed(&mut self) {
        self.train.seed = self.seed;
        self.train.sampler.seed = self.seed;
        self.rank.standalone.seed = self.seed;
    }

    pub fn search_space(&self) -> Result<SearchSpace, CliError> {
        let candidates = self
            .space
            .candidates
            .iter()
            .map(|c| OperatorSpec::parse(c, self.space.hidden))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Config(format!("space.candidates: {}", e)))?;
        SearchSpace::new(self.space.num_layers, candidates, self.task.vocab, self.task.seq_len)
            .map_err(|e| CliError::Config(format!("space: {}", e)))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.name.trim().is_empty() || self.name.contains(['/', '\\']) {
            return Err(CliError::Config(format!("name {:?} must be a non-empty file name", self.name)));
        }
        self.task.validate().map_err(|e| CliError::Config(format!("task: {}", e)))?;
        let space = self.search_space()?;
        self.train.validate(&space).map_err(|e| CliError::Config(format!("train: {}", e)))?;
        let a = &self.analysis;
        if a.og_layer == 0 || a.sweep_layers.contains(&0) {
            return Err(CliError::Config("analysis layers are 1-based".into()));
        }
        if a.repeats == 0 || a.batch_size == 0 {
            return Err(CliError::Config("analysis.repeats and analysis.batch_size must be positive".into()));
        }
        if self.rank.proxy_val_batches == 0 || self.rank.proxy_val_batch_size == 0 {
            return Err(CliError::Config("rank proxy validation set must be non-empty".into()));
        }
        let m = &self.mixing;
        if !(m.epsilon > 0.0 && m.epsilon < 1.0) {
            return Err(CliError::Config(format!("mixing.epsilon must lie in (0, 1), got {}", m.epsilon)));
        }
        if m.candidates < 2 || m.num_layers == 0 {
            return Err(CliError::Config("mixing needs at least one layer and two candidates".into()));
        }
        m.walk().validate().map_err(|e| CliError::Config(format!("mixing: {}", e)))?;
        Ok(())
    }
}

fn lookup<'a>(doc: &'a toml::Table, path: &[&str]) -> Option<&'a toml::Value> {
    let (last, parents) = path.split_last()?;
    let mut table = doc;
    for key in parents {
        table = table.get(*key)?.as_table()?;
    }
    table.get(*last)
}

/// Applies `a.b.c=value`. The value is read as a TOML literal when it parses
/// as one and as a bare string otherwise.
fn apply_override(doc: &mut toml::Table, text: &str) -> Result<(), CliError> {
    let (key, raw) =
        text.split_once('=').ok_or_else(|| CliError::Config(format!("override {:?} is not key=value", text)))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key {:?}", key)));
    }
    let (last, parents) = parts.split_last().expect("non-empty split");
    let mut table = doc;
    for p in parents {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {:?}: `{}` is not a table", key, p)))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
