//! Candidate operators. Each one is a full residual sublayer,
//! `LayerNorm(H + Sublayer(H))`, mapping `[B, L, d]` to `[B, L, d]`.
//!
//! * MHA: Q/K/V projections to `qkv_hidden`, scaled dot-product attention per
//!   head with key padding mask, output projection back to `d`.
//! * FFN: `d -> inner -> d` with exact GELU.
//! * CONV (separable): depthwise conv (kernel k) -> pointwise 1x1 conv ->
//!   GELU -> output projection.
//! * CONV (full): k dense taps `d x d` -> GELU -> output projection.

mod space;

pub use space::SearchSpace;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, AutodiffError, Graph, KeyMask, NodeId, ParamMap};
use crate::rng;
use crate::scalar::Scalar;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OperatorKind {
    Mha { heads: usize, qkv_hidden: usize },
    Ffn { inner_hidden: usize },
    Conv { kernel_size: usize, separable: bool },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub kind: OperatorKind,
    pub hidden: usize,
    /// Display-name override (e.g. `FFN'`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SpecError {
    #[error("hidden size must be positive")]
    ZeroHidden,
    #[error("qkv_hidden {qkv} is not divisible by {heads} heads")]
    HeadSplit { qkv: usize, heads: usize },
    #[error("kernel size {0} must be odd")]
    EvenKernel(usize),
    #[error("size parameter must be positive")]
    ZeroSize,
    #[error("cannot parse operator {0:?} (expected mha:<heads>:<qkv>, ffn:<inner>, conv:<k> or fconv:<k>, optional =<label>)")]
    Parse(String),
}

impl OperatorSpec {
    pub fn mha(hidden: usize, heads: usize, qkv_hidden: usize) -> Self {
        Self { kind: OperatorKind::Mha { heads, qkv_hidden }, hidden, label: None }
    }

    pub fn ffn(hidden: usize, inner_hidden: usize) -> Self {
        Self { kind: OperatorKind::Ffn { inner_hidden }, hidden, label: None }
    }

    pub fn conv(hidden: usize, kernel_size: usize) -> Self {
        Self { kind: OperatorKind::Conv { kernel_size, separable: true }, hidden, label: None }
    }

    pub fn full_conv(hidden: usize, kernel_size: usize) -> Self {
        Self { kind: OperatorKind::Conv { kernel_size, separable: false }, hidden, label: None }
    }

    pub fn labeled(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    /// Parses the compact form used in configuration files, e.g. `mha:6:384`,
    /// `ffn:832=FFN'`, `conv:3`.
    pub fn parse(text: &str, hidden: usize) -> Result<Self, SpecError> {
        let err = || SpecError::Parse(text.to_string());
        let (body, label) = match text.split_once('=') {
            Some((b, l)) if !l.trim().is_empty() => (b, Some(l.trim().to_string())),
            Some(_) => return Err(err()),
            None => (text, None),
        };
        let parts: Vec<&str> = body.trim().split(':').collect();
        let num = |s: &str| s.trim().parse::<usize>().map_err(|_| err());
        let kind = match parts.as_slice() {
            [k, heads, qkv] if k.eq_ignore_ascii_case("mha") => {
                OperatorKind::Mha { heads: num(heads)?, qkv_hidden: num(qkv)? }
            }
            [k, inner] if k.eq_ignore_ascii_case("ffn") => OperatorKind::Ffn { inner_hidden: num(inner)? },
            [k, size] if k.eq_ignore_ascii_case("conv") => {
                OperatorKind::Conv { kernel_size: num(size)?, separable: true }
            }
            [k, size] if k.eq_ignore_ascii_case("fconv") => {
                OperatorKind::Conv { kernel_size: num(size)?, separable: false }
            }
            _ => return Err(err()),
        };
        let spec = Self { kind, hidden, label };
        spec.validate()?;
        Ok(spec)
    }

    /// Compact form accepted by [`OperatorSpec::parse`].
    pub fn compact(&self) -> String {
        let body = match &self.kind {
            OperatorKind::Mha { heads, qkv_hidden } => format!("mha:{}:{}", heads, qkv_hidden),
            OperatorKind::Ffn { inner_hidden } => format!("ffn:{}", inner_hidden),
            OperatorKind::Conv { kernel_size, separable: true } => format!("conv:{}", kernel_size),
            OperatorKind::Conv { kernel_size, separable: false } => format!("fconv:{}", kernel_size),
        };
        match &self.label {
            Some(l) => format!("{}={}", body, l),
            None => body,
        }
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.hidden == 0 {
            return Err(SpecError::ZeroHidden);
        }
        match self.kind {
            OperatorKind::Mha { heads, qkv_hidden } => {
                if heads == 0 || qkv_hidden == 0 {
                    return Err(SpecError::ZeroSize);
                }
                if qkv_hidden % heads != 0 {
                    return Err(SpecError::HeadSplit { qkv: qkv_hidden, heads });
                }
            }
            OperatorKind::Ffn { inner_hidden } => {
                if inner_hidden == 0 {
                    return Err(SpecError::ZeroSize);
                }
            }
            OperatorKind::Conv { kernel_size, .. } => {
                if kernel_size % 2 == 0 {
                    return Err(SpecError::EvenKernel(kernel_size));
                }
            }
        }
        Ok(())
    }

    /// Report name: the label when set, otherwise kind plus size suffix
    /// (`MHA6`, `FFN768`, `CONV3`, `FCONV3`).
    pub fn display_name(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        match &self.kind {
            OperatorKind::Mha { heads, .. } => format!("MHA{}", heads),
            OperatorKind::Ffn { inner_hidden } => format!("FFN{}", inner_hidden),
            OperatorKind::Conv { kernel_size, separable: true } => format!("CONV{}", kernel_size),
            OperatorKind::Conv { kernel_size, separable: false } => format!("FCONV{}", kernel_size),
        }
    }

    /// Parameter names and shapes, sorted by name.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.hidden;
        let mut out: Vec<(String, Vec<usize>)> = vec![("ln.b".into(), vec![d]), ("ln.g".into(), vec![d])];
        match self.kind {
            OperatorKind::Mha { qkv_hidden: q, .. } => {
                for p in ["q", "k", "v"] {
                    out.push((format!("{}.w", p), vec![d, q]));
                    out.push((format!("{}.b", p), vec![q]));
                }
                out.push(("o.w".into(), vec![q, d]));
                out.push(("o.b".into(), vec![d]));
            }
            OperatorKind::Ffn { inner_hidden: i } => {
                out.push(("in.w".into(), vec![d, i]));
                out.push(("in.b".into(), vec![i]));
                out.push(("out.w".into(), vec![i, d]));
                out.push(("out.b".into(), vec![d]));
            }
            OperatorKind::Conv { kernel_size: k, separable } => {
                if separable {
                    out.push(("dw.w".into(), vec![k, d]));
                    out.push(("dw.b".into(), vec![d]));
                    out.push(("pw.w".into(), vec![d, d]));
                    out.push(("pw.b".into(), vec![d]));
                } else {
                    for t in 0..k {
                        out.push((tap_name(t), vec![d, d]));
                    }
                    out.push(("conv.b".into(), vec![d]));
                }
                out.push(("out.w".into(), vec![d, d]));
                out.push(("out.b".into(), vec![d]));
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Trainable scalars in the sublayer's projection weights and biases,
    /// excluding the `2d` scalars of its LayerNorm.
    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .filter(|(name, _)| !is_norm_param(name))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Every trainable scalar, LayerNorm included.
    pub fn total_param_count(&self) -> usize {
        self.param_count() + 2 * self.hidden
    }
}

impl fmt::Display for OperatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.display_name())
    }
}

impl FromStr for OperatorKind {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OperatorSpec::parse(s, 1).map(|spec| spec.kind)
    }
}

fn tap_name(t: usize) -> String {
    format!("tap{:02}.w", t)
}

/// LayerNorm parameters are excluded from parameter counts and from the
/// flattened gradient vectors used for interference analysis.
pub fn is_norm_param(name: &str) -> bool {
    name.starts_with("ln.")
}

/// Weights ~ normal(0, 0.02) truncated at two standard deviations, biases 0,
/// LayerNorm gain 1 and bias 0. Deterministic per seed.
pub fn init_params<T: Scalar>(spec: &OperatorSpec, seed: u64) -> ParamMap<T> {
    let mut rng = rng::stream(seed, &[rng::tag::INIT]);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut out = ParamMap::new();
    for (name, shape) in spec.param_shapes() {
        let len: usize = shape.iter().product();
        let values: Vec<T> = if name == "ln.g" {
            vec![T::one(); len]
        } else if name.ends_with(".b") {
            vec![T::zero(); len]
        } else {
            (0..len)
                .map(|_| loop {
                    let v: f64 = normal.sample(&mut rng);
                    if v.abs() <= 2.0 * INIT_STD {
                        break T::cast(v);
                    }
                })
                .collect()
        };
        out.insert(name, Array::from_vec(&shape, values).expect("shape matches"));
    }
    out
}

/// Sequence padding flags for a `[B, L]` batch (`true` = real token).
#[derive(Clone, Debug, PartialEq)]
pub struct PadMask {
    pub batch: usize,
    pub len: usize,
    pub valid: Vec<bool>,
}

impl PadMask {
    pub fn all_valid(batch: usize, len: usize) -> Self {
        Self { batch, len, valid: vec![true; batch * len] }
    }

    pub fn is_trivial(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }
}

/// Looks up the graph node of a named operator parameter.
fn node(params: &BTreeMap<String, NodeId>, name: &str) -> Result<NodeId, AutodiffError> {
    params.get(name).copied().ok_or_else(|| AutodiffError::ShapeMismatch {
        node: "operator".into(),
        detail: format!("missing parameter {:?}", name),
    })
}

/// Records the residual sublayer of `spec` on `g`.
///
/// `params` maps the operator's local parameter names (see
/// [`OperatorSpec::param_shapes`]) to nodes already on the graph.
pub fn apply_operator<T: Scalar>(
    g: &mut Graph<T>,
    spec: &OperatorSpec,
    params: &BTreeMap<String, NodeId>,
    h: NodeId,
    pad: &PadMask,
) -> Result<NodeId, AutodiffError> {
    let s = g.shape(h).to_vec();
    if s.len() != 3 || s[2] != spec.hidden || s[0] != pad.batch || s[1] != pad.len {
        return Err(AutodiffError::ShapeMismatch {
            node: spec.display_name(),
            detail: format!("input {:?} for hidden {} with pad mask [{}, {}]", s, spec.hidden, pad.batch, pad.len),
        });
    }
    let sub = match spec.kind {
        OperatorKind::Mha { heads, qkv_hidden } => {
            let q = g.pointwise_conv1d(h, node(params, "q.w")?, node(params, "q.b")?)?;
            let k = g.pointwise_conv1d(h, node(params, "k.w")?, node(params, "k.b")?)?;
            let v = g.pointwise_conv1d(h, node(params, "v.w")?, node(params, "v.b")?)?;
            let (q, k, v) = (g.split_heads(q, heads)?, g.split_heads(k, heads)?, g.split_heads(v, heads)?);
            let scores = g.batch_matmul(q, k, true)?;
            let dh = (qkv_hidden / heads) as f64;
            let scores = g.scale(scores, T::cast(1.0 / dh.sqrt()))?;
            let mask = (!pad.is_trivial()).then(|| KeyMask { valid: pad.valid.clone(), rows_per_group: heads * pad.len });
            let probs = g.softmax(scores, mask)?;
            let ctx = g.batch_matmul(probs, v, false)?;
            let ctx = g.merge_heads(ctx, heads)?;
            g.pointwise_conv1d(ctx, node(params, "o.w")?, node(params, "o.b")?)?
        }
        OperatorKind::Ffn { .. } => {
            let inner = g.pointwise_conv1d(h, node(params, "in.w")?, node(params, "in.b")?)?;
            let inner = g.gelu(inner)?;
            g.pointwise_conv1d(inner, node(params, "out.w")?, node(params, "out.b")?)?
        }
        OperatorKind::Conv { kernel_size, separable } => {
            let x = masked_input(g, h, pad)?;
            let mixed = if separable {
                let dw = g.depthwise_conv1d(x, node(params, "dw.w")?, node(params, "dw.b")?)?;
                g.pointwise_conv1d(dw, node(params, "pw.w")?, node(params, "pw.b")?)?
            } else {
                let half = (kernel_size / 2) as isize;
                let mut acc: Option<NodeId> = None;
                for t in 0..kernel_size {
                    let shifted = g.shift(x, t as isize - half)?;
                    let y = g.matmul(shifted, node(params, &tap_name(t))?)?;
                    acc = Some(match acc {
                        Some(a) => g.add(a, y)?,
                        None => y,
                    });
                }
                g.add_bias(acc.expect("kernel has taps"), node(params, "conv.b")?)?
            };
            let act = g.gelu(mixed)?;
            g.pointwise_conv1d(act, node(params, "out.w")?, node(params, "out.b")?)?
        }
    };
    let res = g.add(h, sub)?;
    g.layer_norm(res, node(params, "ln.g")?, node(params, "ln.b")?)
}

fn masked_input<T: Scalar>(g: &mut Graph<T>, h: NodeId, pad: &PadMask) -> Result<NodeId, AutodiffError> {
    if pad.is_trivial() {
        return Ok(h);
    }
    let d = g.shape(h)[2];
    let mut m = Vec::with_capacity(pad.valid.len() * d);
    for &v in &pad.valid {
        m.extend(std::iter::repeat_n(if v { T::one() } else { T::zero() }, d));
    }
    let mask = g.input(Array::from_vec(&[pad.batch, pad.len, d], m)?);
    g.mul(h, mask)
}

/// Registers `params` on `g` under `prefix` and returns the local-name map.
pub fn register_params<T: Scalar>(
    g: &mut Graph<T>,
    prefix: &str,
    params: &ParamMap<T>,
) -> Result<BTreeMap<String, NodeId>, AutodiffError> {
    let mut out = BTreeMap::new();
    for (name, value) in params {
        let id = g.param(format!("{}{}", prefix, name), value.clone())?;
        out.insert(name.clone(), id);
    }
    Ok(out)
}

/// Eager application of one operator to a concrete input.
pub fn apply_operator_eager<T: Scalar>(
    spec: &OperatorSpec,
    params: &ParamMap<T>,
    h: &Array<T>,
    pad: &PadMask,
) -> Result<Array<T>, AutodiffError> {
    let mut g = Graph::new();
    let ids = register_params(&mut g, "", params)?;
    let x = g.input(h.clone());
    let y = apply_operator(&mut g, spec, &ids, x, pad)?;
    Ok(g.value(y).clone())
}

/// The six-operator analysis set at hidden size `d` scaled from BERT-base:
/// MHA6 and MHA8 with `d/2` QKV hidden, FFN with inner `d`, FFN' with inner
/// `13d/12`, CONV3 and CONV5.
pub fn parity_operator_set(d: usize) -> Vec<OperatorSpec> {
    vec![
        OperatorSpec::mha(d, 6, d / 2).labeled("MHA6"),
        OperatorSpec::mha(d, 8, d / 2).labeled("MHA8"),
        OperatorSpec::ffn(d, d).labeled("FFN"),
        OperatorSpec::ffn(d, d * 13 / 12).labeled("FFN'"),
        OperatorSpec::conv(d, 3),
        OperatorSpec::conv(d, 5),
    ]
}
