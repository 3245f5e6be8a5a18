use std::collections::BTreeMap;

use crate::autodiff::{Array, AutodiffError};
use crate::scalar::Scalar;

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Key-padding mask for attention scores laid out as `[groups * queries, keys]` rows.
///
/// Row `r` uses the mask entries `valid[(r / rows_per_group) * keys ..][..keys]`.
#[derive(Clone, Debug)]
pub struct KeyMask {
    pub valid: Vec<bool>,
    pub rows_per_group: usize,
}

enum Op<T> {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    BatchMatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: T },
    Gelu { a: NodeId },
    Softmax { a: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<T>, rstd: Vec<T> },
    DepthwiseConv1d { x: NodeId, weight: NodeId, bias: NodeId },
    Shift { a: NodeId, offset: isize },
    Embedding { table: NodeId, ids: Vec<usize> },
    SplitHeads { a: NodeId, heads: usize },
    MergeHeads { a: NodeId, heads: usize },
    Mse { a: NodeId, b: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<(usize, usize)>, probs: Vec<T> },
    SumAll { a: NodeId },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add { .. } => "add",
            Op::AddBias { .. } => "add_bias",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::DepthwiseConv1d { .. } => "depthwise_conv1d",
            Op::Shift { .. } => "shift",
            Op::Embedding { .. } => "embedding",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::Mse { .. } => "mse",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SumAll { .. } => "sum_all",
        }
    }
}

struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run computation graph.
///
/// Every operation is evaluated eagerly when it is added; the recorded nodes
/// double as the tape for [`Graph::backward`]. Node ids are issued in
/// topological order, so the backward sweep is a reverse scan.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, NodeId>,
}

const LN_EPS: f64 = 1e-5;

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn param_names(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    /// Trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Array<T>) -> Result<NodeId, AutodiffError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(AutodiffError::DuplicateParam(name));
        }
        let id = self.push_leaf(value, true);
        self.params.insert(name, id);
        Ok(id)
    }

    /// Non-trainable leaf (data, targets, stop-gradient values).
    pub fn input(&mut self, value: Array<T>) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Array<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let id = self.nodes.len();
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { node: id, op: op.name() });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(NodeId(id))
    }

    fn mismatch(&self, op: &str, detail: String) -> AutodiffError {
        AutodiffError::ShapeMismatch { node: format!("{}#{}", op, self.nodes.len()), detail }
    }

    fn check_node(&self, op: &str, id: NodeId) -> Result<(), AutodiffError> {
        if id.0 >= self.nodes.len() {
            return Err(self.mismatch(op, format!("unknown input node {}", id.0)));
        }
        Ok(())
    }

    /// `a[.., k] @ b[k, n] -> [.., n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.check_node("matmul", a)?;
        self.check_node("matmul", b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().is_empty() || bv.shape().len() != 2 || av.last_dim() != bv.shape()[0] {
            return Err(self.mismatch(
                "matmul",
                format!("cannot multiply {:?} by {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.rows(), av.last_dim(), bv.shape()[1]);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), av.data(), k as isize, 1, bv.data(), n as isize, 1, T::zero(), &mut out, n as isize, 1);
        let value = Array::from_vec(&shape, out)?;
        self.push(value, Op::MatMul { a, b }, &[a, b])
    }

    /// Per-group product of `[g, m, k]` with `[g, k, n]` (or `[g, n, k]` when `trans_b`).
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId, AutodiffError> {
        self.check_node("batch_matmul", a)?;
        self.check_node("batch_matmul", b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && {
            if trans_b {
                sa[2] == sb[2]
            } else {
                sa[2] == sb[1]
            }
        };
        if !ok {
            return Err(self.mismatch(
                "batch_matmul",
                format!("incompatible {:?} x {:?} (trans_b={})", sa, sb, trans_b),
            ));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![T::zero(); g * m * n];
        for gi in 0..g {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &av.data()[gi * m * k..(gi + 1) * m * k],
                k as isize,
                1,
                &bv.data()[gi * k * n..(gi + 1) * k * n],
                rsb,
                csb,
                T::zero(),
                &mut out[gi * m * n..(gi + 1) * m * n],
                n as isize,
                1,
            );
        }
        let value = Array::from_vec(&[g, m, n], out)?;
        self.push(value, Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.check_node("add", a)?;
        self.check_node("add", b)?;
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push(value, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.check_node("mul", a)?;
        self.check_node("mul", b)?;
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push(value, Op::Mul { a, b }, &[a, b])
    }

    fn zip_same(&self, op: &str, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Result<Array<T>, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(self.mismatch(op, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Array::from_vec(av.shape(), data)
    }

    /// Adds a vector along the last dimension.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        self.check_node("add_bias", a)?;
        self.check_node("add_bias", bias)?;
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.shape().len() != 1 || bv.len() != av.last_dim() {
            return Err(self.mismatch("add_bias", format!("bias {:?} for input {:?}", bv.shape(), av.shape())));
        }
        let n = bv.len();
        let mut value = av.clone();
        for row in value.data_mut().chunks_mut(n) {
            for (v, &b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        self.push(value, Op::AddBias { a, bias }, &[a, bias])
    }

    /// `a + bias` where bias is a `[n]` vector; the 1×1 convolution of a
    /// sequence is `x @ w + b` over channels.
    pub fn pointwise_conv1d(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        let y = self.matmul(x, weight)?;
        self.add_bias(y, bias)
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> Result<NodeId, AutodiffError> {
        self.check_node("scale", a)?;
        let value = self.value(a).map(|v| v * factor);
        self.push(value, Op::Scale { a, factor }, &[a])
    }

    /// Exact GELU, `x * Φ(x)`.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.check_node("gelu", a)?;
        let value = self.value(a).map(|x| x * normal_cdf(x));
        self.push(value, Op::Gelu { a }, &[a])
    }

    /// Softmax over the last dimension; masked keys receive probability 0.
    /// A row whose keys are all masked yields zeros.
    pub fn softmax(&mut self, a: NodeId, mask: Option<KeyMask>) -> Result<NodeId, AutodiffError> {
        self.check_node("softmax", a)?;
        let av = self.value(a);
        let keys = av.last_dim();
        if let Some(m) = &mask {
            let groups = if m.rows_per_group == 0 { 0 } else { av.rows().div_ceil(m.rows_per_group) };
            if m.rows_per_group == 0 || m.valid.len() != groups * keys || !av.rows().is_multiple_of(m.rows_per_group) {
                return Err(self.mismatch(
                    "softmax",
                    format!("mask of {} entries ({} rows/group) for scores {:?}", m.valid.len(), m.rows_per_group, av.shape()),
                ));
            }
        }
        let mut value = av.clone();
        for (r, row) in value.data_mut().chunks_mut(keys).enumerate() {
            let valid = mask.as_ref().map(|m| {
                let g = r / m.rows_per_group;
                &m.valid[g * keys..(g + 1) * keys]
            });
            softmax_row(row, valid);
        }
        self.push(value, Op::Softmax { a }, &[a])
    }

    /// Layer normalisation over the last dimension with gain and bias vectors.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        for id in [x, gain, bias] {
            self.check_node("layer_norm", id)?;
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.last_dim();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(self.mismatch(
                "layer_norm",
                format!("gain {:?} / bias {:?} for input {:?}", gv.shape(), bv.shape(), xv.shape()),
            ));
        }
        let eps = T::cast(LN_EPS);
        let inv_d = T::one() / T::cast(d as f64);
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let value = Array::from_vec(xv.shape(), out)?;
        self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias])
    }

    /// Per-channel convolution along the sequence axis of `[B, L, d]`.
    /// `weight` is `[k, d]` with odd `k`, `bias` is `[d]`, zero "same" padding.
    pub fn depthwise_conv1d(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        for id in [x, weight, bias] {
            self.check_node("depthwise_conv1d", id)?;
        }
        let (xv, wv, bv) = (self.value(x), self.value(weight), self.value(bias));
        let s = xv.shape();
        let ws = wv.shape();
        if s.len() != 3 || ws.len() != 2 || ws[1] != s[2] || ws[0] % 2 == 0 || bv.shape() != [s[2]] {
            return Err(self.mismatch(
                "depthwise_conv1d",
                format!("input {:?}, kernel {:?}, bias {:?}", s, ws, bv.shape()),
            ));
        }
        let (b, l, d, k) = (s[0], s[1], s[2], ws[0]);
        let half = (k / 2) as isize;
        let mut out = vec![T::zero(); b * l * d];
        for bi in 0..b {
            for i in 0..l {
                let o = &mut out[(bi * l + i) * d..(bi * l + i + 1) * d];
                o.copy_from_slice(bv.data());
                for t in 0..k {
                    let src = i as isize + t as isize - half;
                    if src < 0 || src >= l as isize {
                        continue;
                    }
                    let xs = &xv.data()[(bi * l + src as usize) * d..][..d];
                    let wt = &wv.data()[t * d..(t + 1) * d];
                    for c in 0..d {
                        o[c] += wt[c] * xs[c];
                    }
                }
            }
        }
        let value = Array::from_vec(s, out)?;
        self.push(value, Op::DepthwiseConv1d { x, weight, bias }, &[x, weight, bias])
    }

    /// `y[b, i] = x[b, i + offset]` along the sequence axis of `[B, L, d]`, zero outside.
    pub fn shift(&mut self, a: NodeId, offset: isize) -> Result<NodeId, AutodiffError> {
        self.check_node("shift", a)?;
        let av = self.value(a);
        let s = av.shape();
        if s.len() != 3 {
            return Err(self.mismatch("shift", format!("expected [B, L, d], got {:?}", s)));
        }
        let (b, l, d) = (s[0], s[1], s[2]);
        let mut out = vec![T::zero(); av.len()];
        for bi in 0..b {
            for i in 0..l {
                let src = i as isize + offset;
                if src < 0 || src >= l as isize {
                    continue;
                }
                out[(bi * l + i) * d..][..d].copy_from_slice(&av.data()[(bi * l + src as usize) * d..][..d]);
            }
        }
        let value = Array::from_vec(s, out)?;
        self.push(value, Op::Shift { a, offset }, &[a])
    }

    /// Row lookup into a `[V, d]` table; output shape is `prefix ++ [d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize], prefix: &[usize]) -> Result<NodeId, AutodiffError> {
        self.check_node("embedding", table)?;
        let tv = self.value(table);
        if tv.shape().len() != 2 || prefix.iter().product::<usize>() != ids.len() {
            return Err(self.mismatch(
                "embedding",
                format!("table {:?}, {} ids, prefix {:?}", tv.shape(), ids.len(), prefix),
            ));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(self.mismatch("embedding", format!("id {} out of range for vocabulary {}", bad, v)));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let value = Array::from_vec(&shape, out)?;
        self.push(value, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    /// `[B, L, H*dh] -> [B*H, L, dh]`
    pub fn split_heads(&mut self, a: NodeId, heads: usize) -> Result<NodeId, AutodiffError> {
        self.check_node("split_heads", a)?;
        let av = self.value(a);
        let s = av.shape();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(self.mismatch("split_heads", format!("{:?} into {} heads", s, heads)));
        }
        let (b, l, w) = (s[0], s[1], s[2]);
        let dh = w / heads;
        let mut out = vec![T::zero(); av.len()];
        for bi in 0..b {
            for li in 0..l {
                for h in 0..heads {
                    let src = &av.data()[(bi * l + li) * w + h * dh..][..dh];
                    out[((bi * heads + h) * l + li) * dh..][..dh].copy_from_slice(src);
                }
            }
        }
        let value = Array::from_vec(&[b * heads, l, dh], out)?;
        self.push(value, Op::SplitHeads { a, heads }, &[a])
    }

    /// `[B*H, L, dh] -> [B, L, H*dh]`
    pub fn merge_heads(&mut self, a: NodeId, heads: usize) -> Result<NodeId, AutodiffError> {
        self.check_node("merge_heads", a)?;
        let av = self.value(a);
        let s = av.shape();
        if s.len() != 3 || heads == 0 || !s[0].is_multiple_of(heads) {
            return Err(self.mismatch("merge_heads", format!("{:?} from {} heads", s, heads)));
        }
        let (b, l, dh) = (s[0] / heads, s[1], s[2]);
        let w = heads * dh;
        let mut out = vec![T::zero(); av.len()];
        for bi in 0..b {
            for li in 0..l {
                for h in 0..heads {
                    let src = &av.data()[((bi * heads + h) * l + li) * dh..][..dh];
                    out[(bi * l + li) * w + h * dh..][..dh].copy_from_slice(src);
                }
            }
        }
        let value = Array::from_vec(&[b, l, w], out)?;
        self.push(value, Op::MergeHeads { a, heads }, &[a])
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.check_node("mse", a)?;
        self.check_node("mse", b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || av.is_empty() {
            return Err(self.mismatch("mse", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let n = T::cast(av.len() as f64);
        let total: T = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        self.push(Array::scalar(total / n), Op::Mse { a, b }, &[a, b])
    }

    /// Mean softmax cross-entropy over the selected `(row, class)` targets of
    /// logits viewed as `[rows, classes]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[(usize, usize)]) -> Result<NodeId, AutodiffError> {
        self.check_node("cross_entropy", logits)?;
        if targets.is_empty() {
            return Err(AutodiffError::EmptyTargets);
        }
        let lv = self.value(logits);
        let classes = lv.last_dim();
        let rows = lv.rows();
        if let Some(&(r, c)) = targets.iter().find(|&&(r, c)| r >= rows || c >= classes) {
            return Err(self.mismatch(
                "cross_entropy",
                format!("target ({}, {}) outside logits {:?}", r, c, lv.shape()),
            ));
        }
        let mut probs = Vec::with_capacity(targets.len() * classes);
        let mut total = T::zero();
        for &(r, c) in targets {
            let row = &lv.data()[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            total += log_z - row[c];
            probs.extend(row.iter().map(|&v| (v - log_z).exp()));
        }
        let loss = total / T::cast(targets.len() as f64);
        self.push(
            Array::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.check_node("sum_all", a)?;
        let total = self.value(a).sum();
        self.push(Array::scalar(total), Op::SumAll { a }, &[a])
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, AutodiffError> {
        self.check_node("backward", loss)?;
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NotScalar { shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Array<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::from_vec(lv.shape(), vec![T::one()])?);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, params: self.params.clone(), shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backprop_node(&self, idx: usize, g: &Array<T>, grads: &mut [Option<Array<T>>]) {
        let node = &self.nodes[idx];
        if !node.requires_grad {
            return;
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.last_dim(), bv.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    // dA = dY @ B^T
                    T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, bv.data(), 1, n as isize, T::zero(), &mut da, k as isize, 1);
                    accumulate(grads, *a, av.shape(), da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    // dB = A^T @ dY
                    T::gemm(k, m, n, T::one(), av.data(), 1, k as isize, g.data(), n as isize, 1, T::zero(), &mut db, n as isize, 1);
                    accumulate(grads, *b, bv.shape(), db);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (gn, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = if *trans_b { bv.shape()[1] } else { bv.shape()[2] };
                // element (kk, nn) of the logical B lives at kk*rsb + nn*csb
                let (rsb, csb) = if *trans_b { (1isize, k as isize) } else { (n as isize, 1isize) };
                if self.wants(*a) {
                    let mut da = vec![T::zero(); gn * m * k];
                    for gi in 0..gn {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g.data()[gi * m * n..][..m * n],
                            n as isize,
                            1,
                            &bv.data()[gi * k * n..][..k * n],
                            csb,
                            rsb,
                            T::zero(),
                            &mut da[gi * m * k..][..m * k],
                            k as isize,
                            1,
                        );
                    }
                    accumulate(grads, *a, av.shape(), da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); gn * k * n];
                    for gi in 0..gn {
                        // logical dB[k, n] = A^T @ dY, written with B's physical layout
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &av.data()[gi * m * k..][..m * k],
                            1,
                            k as isize,
                            &g.data()[gi * m * n..][..m * n],
                            n as isize,
                            1,
                            T::zero(),
                            &mut db[gi * k * n..][..k * n],
                            rsb,
                            csb,
                        );
                    }
                    accumulate(grads, *b, bv.shape(), db);
                }
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    if self.wants(id) {
                        accumulate(grads, id, g.shape(), g.data().to_vec());
                    }
                }
            }
            Op::AddBias { a, bias } => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.shape(), g.data().to_vec());
                }
                if self.wants(*bias) {
                    let n = self.value(*bias).len();
                    let mut db = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *bias, &[n], db);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let da = g.data().iter().zip(bv.data()).map(|(&gv, &y)| gv * y).collect();
                    accumulate(grads, *a, av.shape(), da);
                }
                if self.wants(*b) {
                    let db = g.data().iter().zip(av.data()).map(|(&gv, &x)| gv * x).collect();
                    accumulate(grads, *b, bv.shape(), db);
                }
            }
            Op::Scale { a, factor } => {
                if self.wants(*a) {
                    let da = g.data().iter().map(|&gv| gv * *factor).collect();
                    accumulate(grads, *a, g.shape(), da);
                }
            }
            Op::Gelu { a } => {
                if self.wants(*a) {
                    let av = self.value(*a);
                    let da = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(&gv, &x)| gv * (normal_cdf(x) + x * normal_pdf(x)))
                        .collect();
                    accumulate(grads, *a, av.shape(), da);
                }
            }
            Op::Softmax { a, .. } => {
                if self.wants(*a) {
                    let y = &node.value;
                    let keys = y.last_dim();
                    let mut da = vec![T::zero(); y.len()];
                    for ((dr, yr), gr) in da.chunks_mut(keys).zip(y.data().chunks(keys)).zip(g.data().chunks(keys)) {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &gv)| p * gv).sum();
                        for c in 0..keys {
                            dr[c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(grads, *a, y.shape(), da);
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.value(*gain);
                let d = gv.len();
                if self.wants(*gain) {
                    let mut dg = vec![T::zero(); d];
                    for (gr, hr) in g.data().chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            dg[c] += gr[c] * hr[c];
                        }
                    }
                    accumulate(grads, *gain, &[d], dg);
                }
                if self.wants(*bias) {
                    let mut db = vec![T::zero(); d];
                    for gr in g.data().chunks(d) {
                        for c in 0..d {
                            db[c] += gr[c];
                        }
                    }
                    accumulate(grads, *bias, &[d], db);
                }
                if self.wants(*x) {
                    let inv_d = T::one() / T::cast(d as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    let mut dxhat = vec![T::zero(); d];
                    for (r, (gr, hr)) in g.data().chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..d {
                            dxhat[c] = gr[c] * gv.data()[c];
                            s1 += dxhat[c];
                            s2 += dxhat[c] * hr[c];
                        }
                        for c in 0..d {
                            dx[r * d + c] = rstd[r] * (dxhat[c] - inv_d * s1 - hr[c] * inv_d * s2);
                        }
                    }
                    accumulate(grads, *x, g.shape(), dx);
                }
            }
            Op::DepthwiseConv1d { x, weight, bias } => {
                let (xv, wv) = (self.value(*x), self.value(*weight));
                let s = xv.shape();
                let (b, l, d, k) = (s[0], s[1], s[2], wv.shape()[0]);
                let half = (k / 2) as isize;
                let want_x = self.wants(*x);
                let want_w = self.wants(*weight);
                let mut dx = vec![T::zero(); if want_x { xv.len() } else { 0 }];
                let mut dw = vec![T::zero(); if want_w { wv.len() } else { 0 }];
                for bi in 0..b {
                    for i in 0..l {
                        let gr = &g.data()[(bi * l + i) * d..][..d];
                        for t in 0..k {
                            let src = i as isize + t as isize - half;
                            if src < 0 || src >= l as isize {
                                continue;
                            }
                            let base = (bi * l + src as usize) * d;
                            if want_x {
                                let wt = &wv.data()[t * d..(t + 1) * d];
                                for c in 0..d {
                                    dx[base + c] += gr[c] * wt[c];
                                }
                            }
                            if want_w {
                                let xs = &xv.data()[base..base + d];
                                for c in 0..d {
                                    dw[t * d + c] += gr[c] * xs[c];
                                }
                            }
                        }
                    }
                }
                if want_x {
                    accumulate(grads, *x, s, dx);
                }
                if want_w {
                    accumulate(grads, *weight, wv.shape(), dw);
                }
                if self.wants(*bias) {
                    let mut db = vec![T::zero(); d];
                    for gr in g.data().chunks(d) {
                        for c in 0..d {
                            db[c] += gr[c];
                        }
                    }
                    accumulate(grads, *bias, &[d], db);
                }
            }
            Op::Shift { a, offset } => {
                if self.wants(*a) {
                    let s = g.shape();
                    let (b, l, d) = (s[0], s[1], s[2]);
                    let mut da = vec![T::zero(); g.len()];
                    for bi in 0..b {
                        for i in 0..l {
                            let src = i as isize + offset;
                            if src < 0 || src >= l as isize {
                                continue;
                            }
                            let dst = &mut da[(bi * l + src as usize) * d..][..d];
                            for (o, &v) in dst.iter_mut().zip(&g.data()[(bi * l + i) * d..][..d]) {
                                *o += v;
                            }
                        }
                    }
                    accumulate(grads, *a, s, da);
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let tv = self.value(*table);
                    let d = tv.shape()[1];
                    let mut dt = vec![T::zero(); tv.len()];
                    for (pos, &i) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[i * d + c] += g.data()[pos * d + c];
                        }
                    }
                    accumulate(grads, *table, tv.shape(), dt);
                }
            }
            Op::SplitHeads { a, heads } => {
                if self.wants(*a) {
                    let s = self.value(*a).shape().to_vec();
                    let (b, l, w) = (s[0], s[1], s[2]);
                    let dh = w / heads;
                    let mut da = vec![T::zero(); g.len()];
                    for bi in 0..b {
                        for li in 0..l {
                            for h in 0..*heads {
                                let src = &g.data()[((bi * heads + h) * l + li) * dh..][..dh];
                                da[(bi * l + li) * w + h * dh..][..dh].copy_from_slice(src);
                            }
                        }
                    }
                    accumulate(grads, *a, &s, da);
                }
            }
            Op::MergeHeads { a, heads } => {
                if self.wants(*a) {
                    let s = self.value(*a).shape().to_vec();
                    let (bh, l, dh) = (s[0], s[1], s[2]);
                    let b = bh / heads;
                    let w = heads * dh;
                    let mut da = vec![T::zero(); g.len()];
                    for bi in 0..b {
                        for li in 0..l {
                            for h in 0..*heads {
                                let src = &g.data()[(bi * l + li) * w + h * dh..][..dh];
                                da[((bi * heads + h) * l + li) * dh..][..dh].copy_from_slice(src);
                            }
                        }
                    }
                    accumulate(grads, *a, &s, da);
                }
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let scale = g.item() * T::cast(2.0) / T::cast(av.len() as f64);
                let diff: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * scale).collect();
                if self.wants(*b) {
                    accumulate(grads, *b, bv.shape(), diff.iter().map(|&v| -v).collect());
                }
                if self.wants(*a) {
                    accumulate(grads, *a, av.shape(), diff);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.wants(*logits) {
                    let lv = self.value(*logits);
                    let classes = lv.last_dim();
                    let scale = g.item() / T::cast(targets.len() as f64);
                    let mut dl = vec![T::zero(); lv.len()];
                    for (t, &(r, c)) in targets.iter().enumerate() {
                        let p = &probs[t * classes..(t + 1) * classes];
                        let row = &mut dl[r * classes..(r + 1) * classes];
                        for j in 0..classes {
                            row[j] += p[j] * scale;
                        }
                        row[c] -= scale;
                    }
                    accumulate(grads, *logits, lv.shape(), dl);
                }
            }
            Op::SumAll { a } => {
                if self.wants(*a) {
                    let av = self.value(*a);
                    accumulate(grads, *a, av.shape(), vec![g.item(); av.len()]);
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Array<T>>], id: NodeId, shape: &[usize], data: Vec<T>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(data) {
                *e += v;
            }
        }
        slot @ None => {
            *slot = Some(Array::from_vec(shape, data).expect("gradient shape follows node shape"));
        }
    }
}

fn softmax_row<T: Scalar>(row: &mut [T], valid: Option<&[bool]>) {
    let is_valid = |c: usize| valid.is_none_or(|v| v[c]);
    let mut max = T::neg_infinity();
    for (c, &v) in row.iter().enumerate() {
        if is_valid(c) && v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut sum = T::zero();
    for (c, v) in row.iter_mut().enumerate() {
        if is_valid(c) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = T::zero();
        }
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub(crate) fn normal_cdf<T: Scalar>(x: T) -> T {
    let half = T::cast(0.5);
    half * (T::one() + (x * T::cast(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn normal_pdf<T: Scalar>(x: T) -> T {
    let inv_sqrt_2pi = T::cast(0.398_942_280_401_432_7);
    inv_sqrt_2pi * (-(x * x) * T::cast(0.5)).exp()
}

/// Gradients of one backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
    params: BTreeMap<String, NodeId>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of any node; `None` when the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Array<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, zeros when it is unreachable from the loss.
    pub fn get_or_zeros(&self, id: NodeId) -> Array<T> {
        self.get(id).cloned().unwrap_or_else(|| Array::zeros(&self.shapes[id.0]))
    }

    pub fn param(&self, name: &str) -> Option<Array<T>> {
        self.params.get(name).map(|&id| self.get_or_zeros(id))
    }

    /// All parameter gradients by name (zeros for unreachable parameters).
    pub fn param_map(&self) -> BTreeMap<String, Array<T>> {
        self.params.iter().map(|(k, &id)| (k.clone(), self.get_or_zeros(id))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], v: &[f64]) -> Array<f64> {
        Array::from_f64(shape, v).unwrap()
    }

    #[test]
    fn identity_graph_returns_input() {
        let mut g = Graph::<f64>::new();
        let x = g.input(arr(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(g.value(x).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn matmul_shape_law() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Array::ones(&[2, 3]));
        let b = g.input(Array::ones(&[3, 4]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 4]);
        assert!(g.value(c).data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn matmul_mismatch_names_node() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Array::ones(&[2, 3]));
        let b = g.input(Array::ones(&[4, 4]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul#2"), "{}", err);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Array::zeros(&[2]));
        let s = g.softmax(a, None).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_all_masked_row_is_zero() {
        let mut g = Graph::<f64>::new();
        let a = g.input(arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let mask = KeyMask { valid: vec![false, false, true, false], rows_per_group: 1 };
        let s = g.softmax(a, Some(mask)).unwrap();
        assert_eq!(g.value(s).data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn square_has_derivative_six_at_three() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Array::scalar(3.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(g.value(y).item(), 9.0);
        assert_eq!(grads.param("x").unwrap().item(), 6.0);
    }

    #[test]
    fn mse_of_equal_arrays_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let y = g.param("y", arr(&[2, 2], &[0.3, -1.0, 2.0, 4.0])).unwrap();
        let loss = g.mse(y, y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
        assert!(grads.param("y").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Array::ones(&[2])).unwrap();
        assert!(matches!(g.backward(x), Err(AutodiffError::NotScalar { .. })));
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Array::scalar(2.0)).unwrap();
        let _unused = g.param("unused", Array::ones(&[3])).unwrap();
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param("unused").unwrap().data(), &[0.0, 0.0, 0.0]);
        assert_eq!(grads.param_map().len(), 2);
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Array::scalar(f64::MAX));
        let err = g.mul(x, x).unwrap_err();
        assert!(matches!(err, AutodiffError::NonFinite { node: 1, op: "mul" }));
    }

    #[test]
    fn duplicate_param_rejected() {
        let mut g = Graph::<f64>::new();
        g.param("w", Array::scalar(1.0)).unwrap();
        assert!(g.param("w", Array::scalar(1.0)).is_err());
    }

    #[test]
    fn cross_entropy_requires_targets() {
        let mut g = Graph::<f64>::new();
        let l = g.input(Array::zeros(&[2, 3]));
        assert!(matches!(g.cross_entropy(l, &[]), Err(AutodiffError::EmptyTargets)));
        let ce = g.cross_entropy(l, &[(0, 1)]).unwrap();
        assert!((g.value(ce).item() - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn split_merge_heads_round_trip() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.input(arr(&[2, 3, 4], &data));
        let s = g.split_heads(x, 2).unwrap();
        assert_eq!(g.shape(s), &[4, 3, 2]);
        let m = g.merge_heads(s, 2).unwrap();
        assert_eq!(g.value(m).data(), g.value(x).data());
    }

    #[test]
    fn shift_moves_along_sequence() {
        let mut g = Graph::<f64>::new();
        let x = g.input(arr(&[1, 3, 1], &[1.0, 2.0, 3.0]));
        let s = g.shift(x, -1).unwrap();
        assert_eq!(g.value(s).data(), &[0.0, 1.0, 2.0]);
        let s = g.shift(x, 1).unwrap();
        assert_eq!(g.value(s).data(), &[2.0, 3.0, 0.0]);
    }
}
