use std::collections::BTreeMap;

use super::params::{ParamId, ParamStore};
use super::tape::{sum_per_sample, AttnGeometry, Op, SavedState, Tape, TapeNode, Var};
use crate::activations::{
    gelu_backward, gelu_backward_exact, relu_backward, relu_backward_exact, softmax_backward,
    softmax_backward_exact,
};
use crate::error::{Error, Result};
use crate::quant::dequantize;
use crate::tensor::{self, Tensor};

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct GradStore {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl GradStore {
    pub fn grad(&self, v: &Var) -> Option<&Tensor> {
        self.grad_of(v.id())
    }

    pub fn grad_of(&self, node: usize) -> Option<&Tensor> {
        self.nodes.get(node).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradients of trainable parameters, in parameter order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }
}

fn corrupted(node: usize, reason: impl Into<String>) -> Error {
    Error::CorruptedTape {
        node,
        reason: reason.into(),
    }
}

fn saved_full<'a>(n: &'a TapeNode, id: usize) -> Result<&'a Tensor> {
    match &n.saved {
        SavedState::Full(t) => Ok(t),
        _ => Err(corrupted(id, format!("{} ({}) needs a full-precision saved tensor", n.op.name(), n.label))),
    }
}

fn param_value<'a>(tape: &Tape, store: &'a ParamStore, node: usize) -> Result<&'a Tensor> {
    match tape.nodes[node].op {
        Op::Param(pid) => Ok(store.value(pid)),
        _ => Err(corrupted(node, "expected a parameter node")),
    }
}

fn as_rows(t: &Tensor, cols: usize) -> Result<Tensor> {
    Tensor::new(vec![t.numel() / cols.max(1), cols], t.data().to_vec())
}

impl Tape {
    /// Reverse pass from a scalar `loss`. Parameter values are read from
    /// `store`; every other input to a local derivative must come from saved
    /// state. Nodes that do not require gradients are never visited.
    pub fn backward(&self, loss: &Var, store: &ParamStore) -> Result<GradStore> {
        let root = loss.id();
        let node = self
            .nodes
            .get(root)
            .ok_or_else(|| Error::Precondition(format!("loss node {root} is not on this tape")))?;
        if node.shape.iter().product::<usize>() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if node.requires_grad {
            grads[root] = Some(Tensor::full(&node.shape, 1.0));
        }
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let n = &self.nodes[id];
            let parent_grads = self.local_backward(id, n, &g, store)?;
            grads[id] = Some(g);
            for (slot, pg) in parent_grads.into_iter().enumerate() {
                let Some(pg) = pg else { continue };
                let p = n.parents[slot];
                if pg.shape() != self.nodes[p].shape.as_slice() {
                    return Err(corrupted(id, format!(
                        "gradient for parent {p} has shape {:?}, expected {:?}",
                        pg.shape(),
                        self.nodes[p].shape
                    )));
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot => *slot = Some(pg),
                }
            }
        }
        let mut params = BTreeMap::new();
        for (id, n) in self.nodes.iter().enumerate() {
            if let (Op::Param(pid), Some(g)) = (&n.op, &grads[id]) {
                params.insert(*pid, g.clone());
            }
        }
        Ok(GradStore { nodes: grads, params })
    }

    fn wants(&self, n: &TapeNode, slot: usize) -> bool {
        self.nodes[n.parents[slot]].requires_grad
    }

    fn local_backward(&self, id: usize, n: &TapeNode, g: &Tensor, store: &ParamStore) -> Result<Vec<Option<Tensor>>> {
        let mut out: Vec<Option<Tensor>> = vec![None; n.parents.len()];
        let shape_of = |slot: usize| self.nodes[n.parents[slot]].shape.clone();
        match &n.op {
            Op::Input | Op::Param(_) => {}
            Op::Linear => {
                let w = param_value(self, store, n.parents[1])?;
                let d_out = w.shape()[1];
                let g2 = as_rows(g, d_out)?;
                if self.wants(n, 0) {
                    out[0] = Some(tensor::matmul(&g2, &w.transpose()?)?.reshape(&shape_of(0))?);
                }
                if self.wants(n, 1) {
                    let x = saved_full(n, id)?;
                    out[1] = Some(tensor::matmul_tn(x, &g2)?);
                }
                if n.parents.len() == 3 && self.wants(n, 2) {
                    out[2] = Some(tensor::column_sums(&g2)?);
                }
            }
            Op::Add => {
                out[0] = self.wants(n, 0).then(|| g.clone());
                out[1] = self.wants(n, 1).then(|| g.clone());
            }
            Op::AddColumns { offset } => {
                out[0] = self.wants(n, 0).then(|| g.clone());
                if self.wants(n, 1) {
                    let shape = shape_of(1);
                    let cb = *shape.last().unwrap();
                    let cols = g.last_dim();
                    let mut d = Vec::with_capacity(g.rows() * cb);
                    for row in g.data().chunks(cols) {
                        d.extend_from_slice(&row[*offset..offset + cb]);
                    }
                    out[1] = Some(Tensor::new(shape, d)?);
                }
            }
            Op::LowRankPrompt { tokens } => {
                out[0] = self.wants(n, 0).then(|| g.clone());
                if self.wants(n, 1) || self.wants(n, 2) {
                    let a = param_value(self, store, n.parents[1])?;
                    let b = param_value(self, store, n.parents[2])?;
                    let gs = sum_per_sample(g, *tokens)?;
                    if self.wants(n, 1) {
                        out[1] = Some(tensor::matmul_nt(&gs, b)?);
                    }
                    if self.wants(n, 2) {
                        out[2] = Some(tensor::matmul_tn(a, &gs)?);
                    }
                }
            }
            Op::AddTokenwise { tokens } => {
                out[0] = self.wants(n, 0).then(|| g.clone());
                if self.wants(n, 1) {
                    out[1] = Some(sum_per_sample(g, *tokens)?);
                }
            }
            Op::ConcatTokens { batch, counts, shared } => {
                let c = g.last_dim();
                let total: usize = counts.iter().sum();
                let mut offset = 0;
                for (slot, (&cnt, &sh)) in counts.iter().zip(shared).enumerate() {
                    if self.wants(n, slot) {
                        let mut d = vec![0.0f32; if sh { cnt * c } else { batch * cnt * c }];
                        for b in 0..*batch {
                            let src = &g.data()[(b * total + offset) * c..][..cnt * c];
                            let dst = if sh { &mut d[..] } else { &mut d[b * cnt * c..(b + 1) * cnt * c] };
                            for (o, v) in dst.iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                        out[slot] = Some(Tensor::new(shape_of(slot), d)?);
                    }
                    offset += cnt;
                }
            }
            Op::SliceTokens { batch, tokens, start, len } => {
                if self.wants(n, 0) {
                    let c = g.last_dim();
                    let mut d = vec![0.0f32; batch * tokens * c];
                    for b in 0..*batch {
                        d[(b * tokens + start) * c..][..len * c]
                            .copy_from_slice(&g.data()[b * len * c..][..len * c]);
                    }
                    out[0] = Some(Tensor::new(shape_of(0), d)?);
                }
            }
            Op::AttentionScores { batch, heads, .. } => {
                if self.wants(n, 0) {
                    let qk = saved_full(n, id)?;
                    let geo = AttnGeometry::from_shape(&shape_of(0), *batch, *heads)?;
                    out[0] = Some(scores_backward(&geo, qk, g)?);
                }
            }
            Op::Softmax => {
                if self.wants(n, 0) {
                    out[0] = Some(match &n.saved {
                        SavedState::Full(y) => softmax_backward_exact(y, g)?,
                        SavedState::Quant(q) => softmax_backward(q, g)?,
                        SavedState::Empty => return Err(corrupted(id, format!("softmax ({}) saved nothing", n.label))),
                    });
                }
            }
            Op::AttentionContext { batch, heads, .. } => {
                let geo = AttnGeometry::from_shape(&shape_of(1), *batch, *heads)?;
                if self.wants(n, 0) {
                    let v = saved_full(n, id)?;
                    let c = geo.c;
                    out[0] = Some(geo.scores_strided(g.data(), c, 0, v.data(), c, 0, 1.0));
                }
                if self.wants(n, 1) {
                    let pnode = n.parents[0];
                    let p = match &self.nodes[pnode].saved {
                        SavedState::Full(t) => t.clone(),
                        SavedState::Quant(q) => dequantize(q)?,
                        SavedState::Empty => {
                            return Err(corrupted(pnode, "attention probabilities were not saved"))
                        }
                    };
                    out[1] = Some(context_value_grad(&geo, &p, g)?);
                }
            }
            Op::Gelu => {
                if self.wants(n, 0) {
                    out[0] = Some(match &n.saved {
                        SavedState::Full(x) => gelu_backward_exact(x, g)?,
                        SavedState::Quant(q) => gelu_backward(q, g)?,
                        SavedState::Empty => return Err(corrupted(id, format!("gelu ({}) saved nothing", n.label))),
                    });
                }
            }
            Op::Relu => {
                if self.wants(n, 0) {
                    out[0] = Some(match &n.saved {
                        SavedState::Full(x) => relu_backward_exact(x, g)?,
                        SavedState::Quant(q) => relu_backward(q, g)?,
                        SavedState::Empty => return Err(corrupted(id, format!("relu ({}) saved nothing", n.label))),
                    });
                }
            }
            Op::ChannelAvgPool { factor } => {
                if self.wants(n, 0) {
                    let inv = 1.0 / *factor as f32;
                    let mut d = Vec::with_capacity(g.numel() * factor);
                    for &v in g.data() {
                        d.extend(std::iter::repeat(v * inv).take(*factor));
                    }
                    out[0] = Some(Tensor::new(shape_of(0), d)?);
                }
            }
            Op::DepthwiseConv { batch, h, w } => {
                let c = g.last_dim();
                let grid = Tensor::new(vec![*batch, *h, *w, c], g.data().to_vec())?;
                if self.wants(n, 0) {
                    let k = param_value(self, store, n.parents[1])?;
                    out[0] = Some(tensor::depthwise_conv_input_grad(&grid, k)?.reshape(&shape_of(0))?);
                }
                if self.wants(n, 1) {
                    let x = saved_full(n, id)?;
                    out[1] = Some(tensor::depthwise_conv_kernel_grad(x, &grid)?);
                }
                if self.wants(n, 2) {
                    out[2] = Some(tensor::column_sums(&as_rows(g, c)?)?);
                }
            }
            Op::MeanTokens { batch, tokens } => {
                if self.wants(n, 0) {
                    let c = g.last_dim();
                    let inv = 1.0 / *tokens as f32;
                    let mut d = Vec::with_capacity(batch * tokens * c);
                    for row in g.data().chunks(c) {
                        for _ in 0..*tokens {
                            d.extend(row.iter().map(|v| v * inv));
                        }
                    }
                    out[0] = Some(Tensor::new(shape_of(0), d)?);
                }
            }
            Op::ConcatChannels => {
                let c1 = *shape_of(0).last().unwrap();
                let (a, b) = tensor::split_last_dim(g, c1)?;
                out[0] = self.wants(n, 0).then_some(a);
                out[1] = self.wants(n, 1).then_some(b);
            }
            Op::CrossEntropy { labels } => {
                if self.wants(n, 0) {
                    let probs = saved_full(n, id)?;
                    let k = probs.last_dim();
                    let scale = g.data()[0] / labels.len() as f32;
                    let mut d = probs.data().to_vec();
                    for (row, &l) in d.chunks_mut(k).zip(labels) {
                        row[l] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                    out[0] = Some(Tensor::new(shape_of(0), d)?);
                }
            }
            Op::WeightedSum { weights } => {
                if self.wants(n, 0) {
                    out[0] = Some(weights.scale(g.data()[0]));
                }
            }
            Op::Sum => {
                if self.wants(n, 0) {
                    out[0] = Some(Tensor::full(&shape_of(0), g.data()[0]));
                }
            }
        }
        Ok(out)
    }
}

/// `∂L/∂qkv` from score gradients; the value columns stay zero.
fn scores_backward(geo: &AttnGeometry, qk: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (t, dh, c, nh) = (geo.t, geo.dh, geo.c, geo.h);
    let scale = 1.0 / (dh as f32).sqrt();
    let qd = qk.data();
    let gd = g.data();
    let mut d = vec![0.0f32; geo.b * t * 3 * c];
    for b in 0..geo.b {
        for h in 0..nh {
            for i in 0..t {
                let grow = &gd[((b * nh + h) * t + i) * t..][..t];
                let qi = (b * t + i) * 2 * c + h * dh;
                for (j, &gv) in grow.iter().enumerate() {
                    let gv = gv * scale;
                    if gv == 0.0 {
                        continue;
                    }
                    let kj = (b * t + j) * 2 * c + c + h * dh;
                    for e in 0..dh {
                        d[(b * t + i) * 3 * c + h * dh + e] += gv * qd[kj + e];
                        d[(b * t + j) * 3 * c + c + h * dh + e] += gv * qd[qi + e];
                    }
                }
            }
        }
    }
    Tensor::new(vec![geo.b * t, 3 * c], d)
}

/// `∂L/∂V = Pᵀ·g` per head, written into the value columns of `∂L/∂qkv`.
fn context_value_grad(geo: &AttnGeometry, p: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (t, dh, c, nh) = (geo.t, geo.dh, geo.c, geo.h);
    let (pd, gd) = (p.data(), g.data());
    let mut d = vec![0.0f32; geo.b * t * 3 * c];
    for b in 0..geo.b {
        for h in 0..nh {
            for i in 0..t {
                let prow = &pd[((b * nh + h) * t + i) * t..][..t];
                let gi = &gd[(b * t + i) * c + h * dh..][..dh];
                for (j, &pv) in prow.iter().enumerate() {
                    let dst = &mut d[(b * t + j) * 3 * c + 2 * c + h * dh..][..dh];
                    for (o, x) in dst.iter_mut().zip(gi) {
                        *o += pv * x;
                    }
                }
            }
        }
    }
    Tensor::new(vec![geo.b * t, 3 * c], d)
}
