use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::activations::{gelu, relu, softmax_rows, GELU_CLIP};
use crate::error::{Error, Result};
use crate::quant::{quantize, quantize_mask, QuantBlob};
use crate::tensor::{self, Tensor};

/// What a node keeps alive between its forward and backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StoragePolicy {
    Full32,
    Quant4,
    Mask1,
    NoSave,
}

impl StoragePolicy {
    /// Bytes needed to keep `elements` values under this policy.
    pub fn bytes(self, elements: u64) -> u64 {
        match self {
            StoragePolicy::Full32 => 4 * elements,
            StoragePolicy::Quant4 => elements.div_ceil(2) + crate::quant::QUANT_HEADER_BYTES,
            StoragePolicy::Mask1 => elements.div_ceil(8),
            StoragePolicy::NoSave => 0,
        }
    }
}

impl fmt::Display for StoragePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SavedState {
    Empty,
    Full(Tensor),
    Quant(QuantBlob),
}

impl SavedState {
    pub fn policy(&self) -> StoragePolicy {
        match self {
            SavedState::Empty => StoragePolicy::NoSave,
            SavedState::Full(_) => StoragePolicy::Full32,
            SavedState::Quant(q) if q.bits() == 1 => StoragePolicy::Mask1,
            SavedState::Quant(_) => StoragePolicy::Quant4,
        }
    }

    pub fn bytes(&self) -> u64 {
        match self {
            SavedState::Empty => 0,
            SavedState::Full(t) => 4 * t.numel() as u64,
            SavedState::Quant(q) => q.storage_bytes(),
        }
    }
}

/// Operation recorded on the tape. Shape bookkeeping needed by the backward
/// pass lives in the variant; everything else comes from saved state or
/// from parameter values.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input,
    Param(ParamId),
    /// `[x, w, b?]`: `x·W + b` over the last axis.
    Linear,
    Add,
    /// `[a, b]`: adds `b` into columns `offset..offset + b.cols` of `a`.
    AddColumns { offset: usize },
    /// `[x, A, B]`: `x + A·B`, broadcast over the batch.
    LowRankPrompt { tokens: usize },
    /// `[x, p]`: adds a `[tokens, C]` table to every sample.
    AddTokenwise { tokens: usize },
    /// Concatenates token blocks per sample; `shared` parts are broadcast.
    ConcatTokens { batch: usize, counts: Vec<usize>, shared: Vec<bool> },
    SliceTokens { batch: usize, tokens: usize, start: usize, len: usize },
    /// `[qkv]` → scaled `Q·Kᵀ` per head, rows `(b, h, i)`.
    AttentionScores { batch: usize, heads: usize, tokens: usize },
    Softmax,
    /// `[probs, qkv]` → `P·V` per head. Reads `P` from the softmax parent.
    AttentionContext { batch: usize, heads: usize, tokens: usize },
    Gelu,
    Relu,
    ChannelAvgPool { factor: usize },
    /// `[x, kernel, bias]` with `x` holding `batch·h·w` grid tokens.
    DepthwiseConv { batch: usize, h: usize, w: usize },
    MeanTokens { batch: usize, tokens: usize },
    ConcatChannels,
    /// Mean cross-entropy over the batch; saves the class probabilities.
    CrossEntropy { labels: Vec<usize> },
    WeightedSum { weights: Tensor },
    Sum,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Linear => "linear",
            Op::Add => "add",
            Op::AddColumns { .. } => "add_columns",
            Op::LowRankPrompt { .. } => "low_rank_prompt",
            Op::AddTokenwise { .. } => "add_tokenwise",
            Op::ConcatTokens { .. } => "concat_tokens",
            Op::SliceTokens { .. } => "slice_tokens",
            Op::AttentionScores { .. } => "attention_scores",
            Op::Softmax => "softmax",
            Op::AttentionContext { .. } => "attention_context",
            Op::Gelu => "gelu",
            Op::Relu => "relu",
            Op::ChannelAvgPool { .. } => "channel_avg_pool",
            Op::DepthwiseConv { .. } => "depthwise_conv",
            Op::MeanTokens { .. } => "mean_tokens",
            Op::ConcatChannels => "concat_channels",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Sum => "sum",
        }
    }

    /// Policies this op knows how to store and restore.
    pub fn allowed_policies(&self) -> &'static [StoragePolicy] {
        use StoragePolicy::*;
        match self {
            Op::Linear
            | Op::AttentionScores { .. }
            | Op::AttentionContext { .. }
            | Op::DepthwiseConv { .. }
            | Op::CrossEntropy { .. } => &[Full32, NoSave],
            Op::Softmax | Op::Gelu => &[Full32, Quant4, NoSave],
            Op::Relu => &[Full32, Mask1, NoSave],
            _ => &[NoSave],
        }
    }

    fn arity_ok(&self, n: usize) -> bool {
        match self {
            Op::Input | Op::Param(_) => n == 0,
            Op::Linear => n == 2 || n == 3,
            Op::Add
            | Op::AddColumns { .. }
            | Op::AddTokenwise { .. }
            | Op::AttentionContext { .. }
            | Op::ConcatChannels => n == 2,
            Op::LowRankPrompt { .. } | Op::DepthwiseConv { .. } => n == 3,
            Op::ConcatTokens { counts, .. } => n == counts.len() && n > 0,
            _ => n == 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TapeNode {
    pub op: Op,
    pub parents: Vec<usize>,
    pub saved: SavedState,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub label: String,
}

/// Value produced by a tape operation together with its node id.
///
/// The tape never keeps forward outputs; whatever the backward pass needs
/// must be in a node's saved state.
#[derive(Clone, Debug)]
pub struct Var {
    id: usize,
    value: Tensor,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn into_value(self) -> Tensor {
        self.value
    }
}

/// Append-only record of one forward pass.
#[derive(Debug)]
pub struct Tape {
    pub(crate) nodes: Vec<TapeNode>,
    quantize: bool,
    grad_enabled: bool,
    overrides: HashMap<String, StoragePolicy>,
    param_vars: HashMap<ParamId, Var>,
}

impl Tape {
    /// `quantize` selects Quant4/Mask1 saves for softmax, GELU and ReLU.
    pub fn new(quantize: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            quantize,
            grad_enabled: true,
            overrides: HashMap::new(),
            param_vars: HashMap::new(),
        }
    }

    /// A tape that never requires gradients and therefore saves nothing.
    pub fn no_grad() -> Self {
        let mut t = Tape::new(false);
        t.grad_enabled = false;
        t
    }

    pub fn quantize(&self) -> bool {
        self.quantize
    }

    /// Forces the policy of every node recorded under `label`.
    pub fn override_policy(&mut self, label: &str, policy: StoragePolicy) {
        self.overrides.insert(label.to_string(), policy);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[TapeNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> Option<&TapeNode> {
        self.nodes.get(id)
    }

    pub fn requires_grad(&self, v: &Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// Total bytes held in saved state across the tape.
    pub fn live_activation_bytes(&self) -> u64 {
        self.nodes.iter().map(|n| n.saved.bytes()).sum()
    }

    /// Saved bytes grouped by node label; nodes saving nothing are omitted.
    pub fn saved_bytes_by_label(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for n in &self.nodes {
            let b = n.saved.bytes();
            if b > 0 {
                *out.entry(n.label.clone()).or_insert(0) += b;
            }
        }
        out
    }

    /// Appends a node after validating parents and saved-state policy.
    pub fn record(
        &mut self,
        op: Op,
        parents: &[usize],
        saved: SavedState,
        shape: Vec<usize>,
        label: &str,
    ) -> Result<usize> {
        let id = self.nodes.len();
        if let Some(&bad) = parents.iter().find(|&&p| p >= id) {
            return Err(Error::Precondition(format!(
                "parent id {bad} is not on the tape (length {id})"
            )));
        }
        if !op.arity_ok(parents.len()) {
            return Err(Error::Registration(format!(
                "{} cannot take {} parents",
                op.name(),
                parents.len()
            )));
        }
        let policy = saved.policy();
        if !op.allowed_policies().contains(&policy) {
            return Err(Error::Registration(format!(
                "{} does not support storage policy {policy}",
                op.name()
            )));
        }
        let requires_grad = self.grad_enabled && parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(TapeNode {
            op,
            parents: parents.to_vec(),
            saved,
            shape,
            requires_grad,
            label: label.to_string(),
        });
        Ok(id)
    }

    /// [`Tape::record`] for a node whose forward value is already known.
    pub fn record_value(
        &mut self,
        op: Op,
        parents: &[usize],
        saved: SavedState,
        value: Tensor,
        label: &str,
    ) -> Result<Var> {
        let id = self.record(op, parents, saved, value.shape().to_vec(), label)?;
        Ok(Var { id, value })
    }

    fn push(&mut self, op: Op, parents: &[&Var], saved: SavedState, value: Tensor, label: &str) -> Result<Var> {
        let ids: Vec<usize> = parents.iter().map(|v| v.id).collect();
        let id = self.record(op, &ids, saved, value.shape().to_vec(), label)?;
        Ok(Var { id, value })
    }

    fn any_rg(&self, vars: &[&Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.id].requires_grad)
    }

    fn policy(&self, label: &str, default: StoragePolicy) -> StoragePolicy {
        self.overrides.get(label).copied().unwrap_or(default)
    }

    fn param_id_of(&self, v: &Var, what: &str) -> Result<ParamId> {
        match self.nodes[v.id].op {
            Op::Param(pid) => Ok(pid),
            _ => Err(Error::Registration(format!("{what} must be a parameter node"))),
        }
    }

    fn save_full(policy: StoragePolicy, t: impl FnOnce() -> Tensor) -> SavedState {
        match policy {
            StoragePolicy::NoSave => SavedState::Empty,
            _ => SavedState::Full(t()),
        }
    }

    fn check_policy(op: &Op, policy: StoragePolicy) -> Result<()> {
        if op.allowed_policies().contains(&policy) {
            Ok(())
        } else {
            Err(Error::Registration(format!(
                "{} does not support storage policy {policy}",
                op.name()
            )))
        }
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf tensor; with `requires_grad` its gradient is reported by backward.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(TapeNode {
            op: Op::Input,
            parents: Vec::new(),
            saved: SavedState::Empty,
            shape: value.shape().to_vec(),
            requires_grad: requires_grad && self.grad_enabled,
            label: "input".into(),
        });
        Var { id, value }
    }

    /// Leaf for a stored parameter. Repeated calls return the same node so
    /// fan-out gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, pid: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&pid) {
            return v.clone();
        }
        let p = store.get(pid);
        let id = self.nodes.len();
        self.nodes.push(TapeNode {
            op: Op::Param(pid),
            parents: Vec::new(),
            saved: SavedState::Empty,
            shape: p.value.shape().to_vec(),
            requires_grad: p.trainable && self.grad_enabled,
            label: p.name.clone(),
        });
        let v = Var { id, value: p.value.clone() };
        self.param_vars.insert(pid, v.clone());
        v
    }

    /// `x·W + b` over the last axis. The input is kept only when `W` trains.
    pub fn linear(&mut self, label: &str, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        self.param_id_of(w, "linear weight")?;
        let (d_in, d_out) = match *w.shape() {
            [i, o] => (i, o),
            _ => return Err(Error::dim("linear", x.shape(), w.shape())),
        };
        if x.value.rank() == 0 || x.value.last_dim() != d_in {
            return Err(Error::dim("linear", x.shape(), w.shape()));
        }
        let rows = x.value.rows();
        let x2 = Tensor::new(vec![rows, d_in], x.value.data().to_vec())?;
        let mut y = tensor::matmul(&x2, &w.value)?;
        if let Some(b) = b {
            self.param_id_of(b, "linear bias")?;
            y = tensor::add_row_bias(&y, &b.value)?;
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        let y = y.reshape(&shape)?;
        let default = if self.any_rg(&[w]) { StoragePolicy::Full32 } else { StoragePolicy::NoSave };
        let policy = self.policy(label, default);
        Self::check_policy(&Op::Linear, policy)?;
        let saved = Self::save_full(policy, || x2);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(Op::Linear, &parents, saved, y, label)
    }

    pub fn add(&mut self, label: &str, a: &Var, b: &Var) -> Result<Var> {
        let y = a.value.add(&b.value)?;
        self.push(Op::Add, &[a, b], SavedState::Empty, y, label)
    }

    pub fn add_columns(&mut self, label: &str, a: &Var, b: &Var, offset: usize) -> Result<Var> {
        let (ca, cb) = (a.value.last_dim(), b.value.last_dim());
        if a.value.rows() != b.value.rows() || offset + cb > ca {
            return Err(Error::dim("add_columns", a.shape(), b.shape()));
        }
        let mut y = a.value.clone();
        for (row, brow) in y.data_mut().chunks_mut(ca).zip(b.value.data().chunks(cb.max(1))) {
            for (o, v) in row[offset..offset + cb].iter_mut().zip(brow) {
                *o += v;
            }
        }
        self.push(Op::AddColumns { offset }, &[a, b], SavedState::Empty, y, label)
    }

    /// `x + A·B` where `x` holds `batch·tokens` rows. Nothing is saved:
    /// `A` and `B` are parameters and `∂L/∂x` is the upstream gradient.
    pub fn low_rank_prompt(&mut self, label: &str, x: &Var, a: &Var, b: &Var) -> Result<Var> {
        self.param_id_of(a, "low-rank prompt A")?;
        self.param_id_of(b, "low-rank prompt B")?;
        let ab = tensor::matmul(&a.value, &b.value)?;
        let tokens = ab.shape()[0];
        let y = add_per_sample(&x.value, &ab, "low_rank_prompt")?;
        self.push(Op::LowRankPrompt { tokens }, &[x, a, b], SavedState::Empty, y, label)
    }

    pub fn add_tokenwise(&mut self, label: &str, x: &Var, p: &Var) -> Result<Var> {
        if p.value.rank() != 2 {
            return Err(Error::dim("add_tokenwise", x.shape(), p.shape()));
        }
        let tokens = p.shape()[0];
        let y = add_per_sample(&x.value, &p.value, "add_tokenwise")?;
        self.push(Op::AddTokenwise { tokens }, &[x, p], SavedState::Empty, y, label)
    }

    /// Per-sample token concatenation. A part flagged `shared` is a single
    /// `[T_i, C]` block repeated for every sample.
    pub fn concat_tokens(&mut self, label: &str, parts: &[(&Var, bool)], batch: usize) -> Result<Var> {
        if parts.is_empty() || batch == 0 {
            return Err(Error::Precondition("concat_tokens needs parts and batch ≥ 1".into()));
        }
        let c = parts[0].0.value.last_dim();
        let mut counts = Vec::with_capacity(parts.len());
        for (v, shared) in parts {
            let rows = v.value.rows();
            if v.value.last_dim() != c || (!shared && rows % batch != 0) {
                return Err(Error::dim("concat_tokens", parts[0].0.shape(), v.shape()));
            }
            counts.push(if *shared { rows } else { rows / batch });
        }
        let total: usize = counts.iter().sum();
        let mut out = Vec::with_capacity(batch * total * c);
        for b in 0..batch {
            for ((v, shared), &n) in parts.iter().zip(&counts) {
                let start = if *shared { 0 } else { b * n * c };
                out.extend_from_slice(&v.value.data()[start..start + n * c]);
            }
        }
        let y = Tensor::new(vec![batch * total, c], out)?;
        let shared = parts.iter().map(|p| p.1).collect();
        let vars: Vec<&Var> = parts.iter().map(|p| p.0).collect();
        self.push(Op::ConcatTokens { batch, counts, shared }, &vars, SavedState::Empty, y, label)
    }

    pub fn slice_tokens(&mut self, label: &str, x: &Var, batch: usize, start: usize, len: usize) -> Result<Var> {
        let rows = x.value.rows();
        if batch == 0 || rows % batch != 0 || start + len > rows / batch {
            return Err(Error::Shape {
                shape: x.shape().to_vec(),
                reason: format!("cannot take tokens {start}..{} of {batch} samples", start + len),
            });
        }
        let tokens = rows / batch;
        let c = x.value.last_dim();
        let mut out = Vec::with_capacity(batch * len * c);
        for b in 0..batch {
            let s = (b * tokens + start) * c;
            out.extend_from_slice(&x.value.data()[s..s + len * c]);
        }
        let y = Tensor::new(vec![batch * len, c], out)?;
        self.push(Op::SliceTokens { batch, tokens, start, len }, &[x], SavedState::Empty, y, label)
    }

    /// Scaled dot-product scores from a fused `[batch·T, 3C]` projection.
    /// Saves the query and key columns when the projection needs gradients.
    pub fn attention_scores(&mut self, label: &str, qkv: &Var, batch: usize, heads: usize) -> Result<Var> {
        let geo = AttnGeometry::new(qkv.value(), batch, heads)?;
        let y = geo.scores(qkv.value().data());
        let op = Op::AttentionScores { batch, heads, tokens: geo.t };
        let default = if self.any_rg(&[qkv]) { StoragePolicy::Full32 } else { StoragePolicy::NoSave };
        let policy = self.policy(label, default);
        Self::check_policy(&op, policy)?;
        let saved = Self::save_full(policy, || geo.columns(qkv.value(), 0, 2 * geo.c));
        self.push(op, &[qkv], saved, y, label)
    }

    pub fn softmax(&mut self, label: &str, x: &Var) -> Result<Var> {
        let y = softmax_rows(&x.value);
        let default = match (self.any_rg(&[x]), self.quantize) {
            (false, _) => StoragePolicy::NoSave,
            (true, true) => StoragePolicy::Quant4,
            (true, false) => StoragePolicy::Full32,
        };
        let policy = self.policy(label, default);
        Self::check_policy(&Op::Softmax, policy)?;
        let saved = match policy {
            StoragePolicy::Quant4 => SavedState::Quant(quantize(&y, 4)?),
            StoragePolicy::Full32 => SavedState::Full(y.clone()),
            _ => SavedState::Empty,
        };
        self.push(Op::Softmax, &[x], saved, y, label)
    }

    /// `P·V` per head. `probs` must come from [`Tape::softmax`]; its saved
    /// output doubles as the `P` needed for `∂L/∂V`.
    pub fn attention_context(&mut self, label: &str, probs: &Var, qkv: &Var, batch: usize, heads: usize) -> Result<Var> {
        if self.nodes[probs.id].op != Op::Softmax {
            return Err(Error::Registration(
                "attention_context expects its probabilities from a softmax node".into(),
            ));
        }
        let geo = AttnGeometry::new(qkv.value(), batch, heads)?;
        if probs.shape() != [batch * heads * geo.t, geo.t] {
            return Err(Error::dim("attention_context", probs.shape(), qkv.shape()));
        }
        let y = geo.context(probs.value().data(), qkv.value().data(), 2 * geo.c, 3 * geo.c);
        let op = Op::AttentionContext { batch, heads, tokens: geo.t };
        let default = if self.any_rg(&[probs]) { StoragePolicy::Full32 } else { StoragePolicy::NoSave };
        let policy = self.policy(label, default);
        Self::check_policy(&op, policy)?;
        let saved = Self::save_full(policy, || geo.columns(qkv.value(), 2 * geo.c, geo.c));
        self.push(op, &[probs, qkv], saved, y, label)
    }

    /// GELU; quantized mode saves `clip(x, -2, 2)` at 4 bits.
    pub fn gelu(&mut self, label: &str, x: &Var) -> Result<Var> {
        let y = gelu(&x.value);
        let default = match (self.any_rg(&[x]), self.quantize) {
            (false, _) => StoragePolicy::NoSave,
            (true, true) => StoragePolicy::Quant4,
            (true, false) => StoragePolicy::Full32,
        };
        let policy = self.policy(label, default);
        Self::check_policy(&Op::Gelu, policy)?;
        let saved = match policy {
            StoragePolicy::Quant4 => {
                let clipped = x.value.map(|v| v.clamp(-GELU_CLIP, GELU_CLIP));
                SavedState::Quant(quantize(&clipped, 4)?)
            }
            StoragePolicy::Full32 => SavedState::Full(x.value.clone()),
            _ => SavedState::Empty,
        };
        self.push(Op::Gelu, &[x], saved, y, label)
    }

    /// ReLU; quantized mode saves the 1-bit mask `x > 0`.
    pub fn relu(&mut self, label: &str, x: &Var) -> Result<Var> {
        let y = relu(&x.value);
        let default = match (self.any_rg(&[x]), self.quantize) {
            (false, _) => StoragePolicy::NoSave,
            (true, true) => StoragePolicy::Mask1,
            (true, false) => StoragePolicy::Full32,
        };
        let policy = self.policy(label, default);
        Self::check_policy(&Op::Relu, policy)?;
        let saved = match policy {
            StoragePolicy::Mask1 => SavedState::Quant(quantize_mask(&x.value, |v| v > 0.0)),
            StoragePolicy::Full32 => SavedState::Full(x.value.clone()),
            _ => SavedState::Empty,
        };
        self.push(Op::Relu, &[x], saved, y, label)
    }

    /// Means over groups of `factor` consecutive channels.
    pub fn channel_avg_pool(&mut self, label: &str, x: &Var, factor: usize) -> Result<Var> {
        let y = channel_avg_pool(&x.value, factor)?;
        self.push(Op::ChannelAvgPool { factor }, &[x], SavedState::Empty, y, label)
    }

    /// 3×3 depthwise convolution over `batch` grids of `h×w` tokens.
    pub fn depthwise_conv(
        &mut self,
        label: &str,
        x: &Var,
        kernel: &Var,
        bias: &Var,
        batch: usize,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        self.param_id_of(kernel, "depthwise kernel")?;
        self.param_id_of(bias, "depthwise bias")?;
        let c = x.value.last_dim();
        if x.value.rows() != batch * h * w {
            return Err(Error::Shape {
                shape: x.shape().to_vec(),
                reason: format!("expected {batch}·{h}·{w} grid tokens"),
            });
        }
        let grid = Tensor::new(vec![batch, h, w, c], x.value.data().to_vec())?;
        let y = tensor::depthwise_conv(&grid, &kernel.value, &bias.value)?.reshape(x.shape())?;
        let op = Op::DepthwiseConv { batch, h, w };
        let default = if self.any_rg(&[kernel]) { StoragePolicy::Full32 } else { StoragePolicy::NoSave };
        let policy = self.policy(label, default);
        Self::check_policy(&op, policy)?;
        let saved = Self::save_full(policy, || grid);
        self.push(op, &[x, kernel, bias], saved, y, label)
    }

    pub fn mean_tokens(&mut self, label: &str, x: &Var, batch: usize) -> Result<Var> {
        let rows = x.value.rows();
        if batch == 0 || rows % batch != 0 || rows == 0 {
            return Err(Error::Shape {
                shape: x.shape().to_vec(),
                reason: format!("cannot split into {batch} samples"),
            });
        }
        let tokens = rows / batch;
        let c = x.value.last_dim();
        let mut out = vec![0.0f32; batch * c];
        for b in 0..batch {
            let o = &mut out[b * c..(b + 1) * c];
            for t in 0..tokens {
                let r = &x.value.data()[(b * tokens + t) * c..(b * tokens + t + 1) * c];
                for (o, v) in o.iter_mut().zip(r) {
                    *o += v;
                }
            }
            for v in o.iter_mut() {
                *v /= tokens as f32;
            }
        }
        let y = Tensor::new(vec![batch, c], out)?;
        self.push(Op::MeanTokens { batch, tokens }, &[x], SavedState::Empty, y, label)
    }

    pub fn concat_channels(&mut self, label: &str, a: &Var, b: &Var) -> Result<Var> {
        let y = tensor::concat_last_dim(&a.value, &b.value)?;
        self.push(Op::ConcatChannels, &[a, b], SavedState::Empty, y, label)
    }

    /// Mean cross-entropy of `[batch, classes]` logits.
    pub fn cross_entropy(&mut self, label: &str, logits: &Var, labels: &[usize]) -> Result<Var> {
        let (rows, k) = match *logits.shape() {
            [r, k] => (r, k),
            _ => return Err(Error::dim("cross_entropy", logits.shape(), &[labels.len()])),
        };
        if rows != labels.len() || rows == 0 {
            return Err(Error::dim("cross_entropy", logits.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Validation(format!("label {bad} out of range for {k} classes")));
        }
        let probs = softmax_rows(&logits.value);
        let mut loss = 0.0f32;
        for (row, &l) in probs.data().chunks(k).zip(labels) {
            loss -= row[l].max(f32::MIN_POSITIVE).ln();
        }
        loss /= rows as f32;
        let op = Op::CrossEntropy { labels: labels.to_vec() };
        let default = if self.any_rg(&[logits]) { StoragePolicy::Full32 } else { StoragePolicy::NoSave };
        let policy = self.policy(label, default);
        Self::check_policy(&op, policy)?;
        let saved = Self::save_full(policy, || probs);
        self.push(op, &[logits], saved, Tensor::scalar(loss), label)
    }

    /// `Σ wᵢ·xᵢ` with constant weights, used to inject upstream gradients.
    pub fn weighted_sum(&mut self, label: &str, x: &Var, weights: &Tensor) -> Result<Var> {
        if weights.shape() != x.shape() {
            return Err(Error::dim("weighted_sum", x.shape(), weights.shape()));
        }
        let s: f32 = x.value.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        self.push(
            Op::WeightedSum { weights: weights.clone() },
            &[x],
            SavedState::Empty,
            Tensor::scalar(s),
            label,
        )
    }

    pub fn sum(&mut self, label: &str, x: &Var) -> Result<Var> {
        let s = x.value.sum();
        self.push(Op::Sum, &[x], SavedState::Empty, Tensor::scalar(s), label)
    }
}

/// Adds a `[tokens, C]` table to each `tokens`-row block of `x`.
fn add_per_sample(x: &Tensor, table: &Tensor, op: &'static str) -> Result<Tensor> {
    let (tokens, c) = match *table.shape() {
        [t, c] => (t, c),
        _ => return Err(Error::dim(op, x.shape(), table.shape())),
    };
    if x.rank() == 0 || x.last_dim() != c || tokens == 0 || x.rows() % tokens != 0 {
        return Err(Error::dim(op, x.shape(), table.shape()));
    }
    let mut y = x.clone();
    for block in y.data_mut().chunks_mut(tokens * c) {
        for (o, v) in block.iter_mut().zip(table.data()) {
            *o += v;
        }
    }
    Ok(y)
}

/// Sums `[batch·tokens, C]` rows over the batch into `[tokens, C]`.
pub(crate) fn sum_per_sample(g: &Tensor, tokens: usize) -> Result<Tensor> {
    let c = g.last_dim();
    let mut out = vec![0.0f32; tokens * c];
    for block in g.data().chunks(tokens * c) {
        for (o, v) in out.iter_mut().zip(block) {
            *o += v;
        }
    }
    Tensor::new(vec![tokens, c], out)
}

pub fn channel_avg_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    let c = x.last_dim();
    if factor == 0 || c % factor != 0 {
        return Err(Error::Config(format!(
            "channel count {c} is not divisible by pooling factor {factor}"
        )));
    }
    let k = c / factor;
    let inv = 1.0 / factor as f32;
    let mut out = Vec::with_capacity(x.rows() * k);
    for row in x.data().chunks(c) {
        for group in row.chunks(factor) {
            out.push(group.iter().sum::<f32>() * inv);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = k;
    Tensor::new(shape, out)
}

/// Head/token layout of a fused `[batch·T, 3C]` projection.
pub(crate) struct AttnGeometry {
    pub b: usize,
    pub h: usize,
    pub t: usize,
    pub c: usize,
    pub dh: usize,
}

impl AttnGeometry {
    pub fn new(qkv: &Tensor, batch: usize, heads: usize) -> Result<Self> {
        Self::from_shape(qkv.shape(), batch, heads)
    }

    pub fn from_shape(shape: &[usize], batch: usize, heads: usize) -> Result<Self> {
        let bad = || Error::Shape {
            shape: shape.to_vec(),
            reason: format!("not a fused qkv projection for {batch} samples and {heads} heads"),
        };
        let [rows, width] = *shape else { return Err(bad()) };
        if batch == 0 || heads == 0 || width % 3 != 0 || rows % batch != 0 || (width / 3) % heads != 0 {
            return Err(bad());
        }
        let c = width / 3;
        Ok(AttnGeometry { b: batch, h: heads, t: rows / batch, c, dh: c / heads })
    }

    fn scale(&self) -> f32 {
        1.0 / (self.dh as f32).sqrt()
    }

    /// Copies `len` columns starting at `start` out of `[rows, 3C]`.
    pub fn columns(&self, qkv: &Tensor, start: usize, len: usize) -> Tensor {
        let w = qkv.last_dim();
        let mut out = Vec::with_capacity(qkv.rows() * len);
        for row in qkv.data().chunks(w) {
            out.extend_from_slice(&row[start..start + len]);
        }
        Tensor::new(vec![qkv.rows(), len], out).expect("column slice")
    }

    /// Scaled scores with queries at column 0 and keys at column `C`.
    pub fn scores(&self, qkv: &[f32]) -> Tensor {
        let w = 3 * self.c;
        self.scores_strided(qkv, w, 0, qkv, w, self.c, self.scale())
    }

    /// Per-head `scale · q_i·k_j` with row stride and column offset given
    /// separately for each operand.
    #[allow(clippy::too_many_arguments)]
    pub fn scores_strided(&self, q: &[f32], qs: usize, qo: usize, k: &[f32], ks: usize, ko: usize, scale: f32) -> Tensor {
        let (t, dh) = (self.t, self.dh);
        let mut out = vec![0.0f32; self.b * self.h * t * t];
        for b in 0..self.b {
            for h in 0..self.h {
                for i in 0..t {
                    let qrow = &q[(b * t + i) * qs + qo + h * dh..][..dh];
                    let o = &mut out[((b * self.h + h) * t + i) * t..][..t];
                    for (j, o) in o.iter_mut().enumerate() {
                        let krow = &k[(b * t + j) * ks + ko + h * dh..][..dh];
                        let mut acc = 0.0f32;
                        for (x, y) in qrow.iter().zip(krow) {
                            acc += x * y;
                        }
                        *o = acc * scale;
                    }
                }
            }
        }
        Tensor::new(vec![self.b * self.h * t, t], out).expect("scores shape")
    }

    /// `P·V` with `V` read from `v` at column offset `vo` and row stride `vs`.
    pub fn context(&self, p: &[f32], v: &[f32], vo: usize, vs: usize) -> Tensor {
        let (t, dh, c) = (self.t, self.dh, self.c);
        let mut out = vec![0.0f32; self.b * t * c];
        for b in 0..self.b {
            for h in 0..self.h {
                for i in 0..t {
                    let prow = &p[((b * self.h + h) * t + i) * t..][..t];
                    let o = &mut out[(b * t + i) * c + h * dh..][..dh];
                    for (j, &pv) in prow.iter().enumerate() {
                        let vrow = &v[(b * t + j) * vs + vo + h * dh..][..dh];
                        for (o, x) in o.iter_mut().zip(vrow) {
                            *o += pv * x;
                        }
                    }
                }
            }
        }
        Tensor::new(vec![self.b * t, c], out).expect("context shape")
    }
}
