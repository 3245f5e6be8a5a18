//! Seeded synthetic masked-token tasks.
//!
//! Token ids 0 and 1 are reserved for padding and the mask symbol; generators
//! emit ids in `2..V`. Training and validation batches come from disjoint
//! seed streams.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng as _, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::ops::PadMask;
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const FIRST_TOKEN: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Generator {
    /// Order-2 Markov chain. The context `(a, b)` enters through
    /// `(a mod groups, b)`; each context allows `branching` successors with
    /// random weights drawn from `table_seed`.
    Markov2 { table_seed: u64, branching: usize, groups: usize },
    /// `x[i] = x[i - offset]` after `offset` random leading tokens.
    CopyShift { offset: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub vocab: usize,
    pub seq_len: usize,
    pub generator: Generator,
    pub mask_rate: f64,
    pub train_seed: u64,
    pub val_seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            vocab: 64,
            seq_len: 32,
            generator: Generator::Markov2 { table_seed: 17, branching: 3, groups: 4 },
            mask_rate: 0.15,
            train_seed: 1,
            val_seed: 2,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("vocabulary must be at least 4, got {0}")]
    SmallVocab(usize),
    #[error("mask rate must lie in (0, 1), got {0}")]
    MaskRate(f64),
    #[error("train and validation seeds must differ")]
    SharedSeed,
    #[error("sequence length must be positive")]
    EmptySequence,
    #[error("invalid generator: {0}")]
    Generator(String),
    #[error("batch has no masked positions")]
    NoMaskedPositions,
    #[error("logits shape {got:?} does not match batch [{batch}, {len}, V]")]
    LogitShape { got: Vec<usize>, batch: usize, len: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.vocab < 4 {
            return Err(TaskError::SmallVocab(self.vocab));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(TaskError::MaskRate(self.mask_rate));
        }
        if self.train_seed == self.val_seed {
            return Err(TaskError::SharedSeed);
        }
        if self.seq_len == 0 {
            return Err(TaskError::EmptySequence);
        }
        let real = self.vocab - FIRST_TOKEN;
        match self.generator {
            Generator::Markov2 { branching, .. } if branching == 0 || branching > real => Err(TaskError::Generator(
                format!("branching {} must lie in 1..={}", branching, real),
            )),
            Generator::Markov2 { groups, .. } if groups == 0 || groups > real => {
                Err(TaskError::Generator(format!("groups {} must lie in 1..={}", groups, real)))
            }
            Generator::CopyShift { offset } if offset == 0 || offset >= self.seq_len => Err(TaskError::Generator(
                format!("offset {} must lie in 1..{}", offset, self.seq_len),
            )),
            _ => Ok(()),
        }
    }
}

/// A batch of `B` sequences of length `L`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub id: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Model inputs: tokens with masked positions replaced by [`MASK`].
    pub inputs: Vec<usize>,
    /// Original tokens.
    pub tokens: Vec<usize>,
    pub masked: Vec<bool>,
    pub pad: PadMask,
}

impl Batch {
    /// `(flat position, target id)` for every masked position.
    pub fn targets(&self) -> Vec<(usize, usize)> {
        self.masked
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| (i, self.tokens[i]))
            .collect()
    }

    pub fn num_masked(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    /// Same sequences with no position masked (and hence no targets).
    pub fn without_targets(&self) -> Batch {
        Batch { inputs: self.tokens.clone(), masked: vec![false; self.masked.len()], ..self.clone() }
    }
}

/// Successor table of an order-2 chain over the real tokens.
#[derive(Clone, Debug)]
pub struct Markov2Table {
    real: usize,
    groups: usize,
    /// Per context `(a mod groups) * real + b`: successors and cumulative weights.
    successors: Vec<Vec<(usize, f64)>>,
}

impl Markov2Table {
    pub fn new(real: usize, branching: usize, groups: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[rng::tag::TASK_TABLE]);
        let successors = (0..groups * real)
            .map(|_| {
                let picks = rand::seq::index::sample(&mut r, real, branching);
                let weights: Vec<f64> = (0..branching).map(|_| r.random_range(0.5..1.5)).collect();
                let total: f64 = weights.iter().sum();
                let mut acc = 0.0;
                picks
                    .iter()
                    .zip(&weights)
                    .map(|(tok, w)| {
                        acc += w / total;
                        (tok, acc)
                    })
                    .collect()
            })
            .collect();
        Self { real, groups, successors }
    }

    fn context(&self, a: usize, b: usize) -> usize {
        (a % self.groups) * self.real + b
    }

    /// Probability of real token `c` following real tokens `(a, b)`.
    pub fn prob(&self, a: usize, b: usize, c: usize) -> f64 {
        let mut prev = 0.0;
        for &(tok, cum) in &self.successors[self.context(a, b)] {
            if tok == c {
                return cum - prev;
            }
            prev = cum;
        }
        0.0
    }

    fn sample(&self, a: usize, b: usize, r: &mut Rng) -> usize {
        let u: f64 = r.random();
        let row = &self.successors[self.context(a, b)];
        row.iter().find(|&&(_, cum)| u < cum).unwrap_or(row.last().expect("non-empty row")).0
    }
}

/// A task with its generator state built once.
#[derive(Clone, Debug)]
pub struct Task {
    pub spec: TaskSpec,
    table: Option<Markov2Table>,
}

impl Task {
    pub fn new(spec: TaskSpec) -> Result<Self, TaskError> {
        spec.validate()?;
        let table = match spec.generator {
            Generator::Markov2 { table_seed, branching, groups } => {
                Some(Markov2Table::new(spec.vocab - FIRST_TOKEN, branching, groups, table_seed))
            }
            Generator::CopyShift { .. } => None,
        };
        Ok(Self { spec, table })
    }

    pub fn table(&self) -> Option<&Markov2Table> {
        self.table.as_ref()
    }

    fn sequence(&self, r: &mut Rng) -> Vec<usize> {
        let (l, real) = (self.spec.seq_len, self.spec.vocab - FIRST_TOKEN);
        let mut seq = Vec::with_capacity(l);
        match (&self.spec.generator, &self.table) {
            (Generator::Markov2 { .. }, Some(table)) => {
                for i in 0..l {
                    let t = if i < 2 { r.random_range(0..real) } else { table.sample(seq[i - 2], seq[i - 1], r) };
                    seq.push(t);
                }
            }
            (Generator::CopyShift { offset }, _) => {
                for i in 0..l {
                    let t = if i < *offset { r.random_range(0..real) } else { seq[i - offset] };
                    seq.push(t);
                }
            }
            _ => unreachable!("markov2 task always carries its table"),
        }
        seq.into_iter().map(|t| t + FIRST_TOKEN).collect()
    }

    /// Draws a batch; at least one position is always masked.
    pub fn gen_batch(&self, batch_size: usize, r: &mut Rng) -> Batch {
        let id = r.next_u64();
        let l = self.spec.seq_len;
        let mut tokens = Vec::with_capacity(batch_size * l);
        for _ in 0..batch_size {
            tokens.extend(self.sequence(r));
        }
        let mut masked: Vec<bool> = (0..tokens.len()).map(|_| r.random::<f64>() < self.spec.mask_rate).collect();
        if !masked.iter().any(|&m| m) && !masked.is_empty() {
            let i = r.random_range(0..masked.len());
            masked[i] = true;
        }
        let inputs = tokens.iter().zip(&masked).map(|(&t, &m)| if m { MASK } else { t }).collect();
        Batch { id, batch_size, seq_len: l, inputs, tokens, masked, pad: PadMask::all_valid(batch_size, l) }
    }

    /// Training stream for one epoch of the run seeded with `run_seed`.
    pub fn train_stream(&self, run_seed: u64, epoch: u64) -> Rng {
        rng::stream(self.spec.train_seed, &[rng::tag::DATA, run_seed, epoch])
    }

    /// Fixed held-out batches.
    pub fn val_set(&self, batches: usize, batch_size: usize) -> Vec<Batch> {
        let mut r = rng::stream(self.spec.val_seed, &[rng::tag::VALIDATION]);
        (0..batches).map(|_| self.gen_batch(batch_size, &mut r)).collect()
    }

    /// Writes `batches` training batches as a little-endian `u32` token stream
    /// plus a JSON header next to it (`<path>.json`).
    pub fn write_dataset(&self, path: &Path, batches: usize, batch_size: usize, seed: u64) -> Result<(), TaskError> {
        let mut r = rng::stream(seed, &[rng::tag::DATA]);
        let mut out = BufWriter::new(File::create(path)?);
        for _ in 0..batches {
            let b = self.gen_batch(batch_size, &mut r);
            for t in b.tokens {
                out.write_all(&(t as u32).to_le_bytes())?;
            }
        }
        out.flush()?;
        let header = DatasetHeader {
            vocab: self.spec.vocab,
            seq_len: self.spec.seq_len,
            generator: self.spec.generator.clone(),
            seed,
            sequences: batches * batch_size,
        };
        let mut header_path = path.as_os_str().to_owned();
        header_path.push(".json");
        std::fs::write(header_path, serde_json::to_string_pretty(&header)?)?;
        Ok(())
    }
}

/// Header of an on-disk token dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub vocab: usize,
    pub seq_len: usize,
    pub generator: Generator,
    pub seed: u64,
    pub sequences: usize,
}

/// One batch drawn from a fresh task (convenience wrapper around [`Task`]).
pub fn gen_batch(spec: &TaskSpec, batch_size: usize, r: &mut Rng) -> Result<Batch, TaskError> {
    Ok(Task::new(spec.clone())?.gen_batch(batch_size, r))
}

/// Masked-position top-1 accuracy. When several classes share the maximum
/// logit the position earns `1/k` credit if the target is among the `k` tied
/// classes, i.e. the expected accuracy under random tie-breaking.
pub fn task_metric<T: Scalar>(logits: &Array<T>, batch: &Batch) -> Result<f64, TaskError> {
    let s = logits.shape();
    if s.len() != 3 || s[0] != batch.batch_size || s[1] != batch.seq_len {
        return Err(TaskError::LogitShape { got: s.to_vec(), batch: batch.batch_size, len: batch.seq_len });
    }
    let targets = batch.targets();
    if targets.is_empty() {
        return Err(TaskError::NoMaskedPositions);
    }
    let v = s[2];
    let credit: f64 = targets
        .iter()
        .map(|&(pos, target)| {
            let row = &logits.data()[pos * v..(pos + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let ties = row.iter().filter(|&&x| x == max).count();
            if target < v && row[target] == max {
                1.0 / ties as f64
            } else {
                0.0
            }
        })
        .sum();
    Ok(credit / targets.len() as f64)
}
