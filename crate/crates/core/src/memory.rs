//! Analytic training-memory accounting.
//!
//! A model is described as a list of [`LayerSpec`] rows: how many values
//! each layer would keep for backward per sample, under which policy, and
//! how many parameters it owns. [`estimate`] turns that into bytes for
//! weights, gradients, optimizer moments and saved activations.
//!
//! [`build_model_spec`] derives the rows for a ViT from its geometry and a
//! tuning method without running anything. [`verify_against_tape`] runs
//! the same model on a real tape and compares the two per layer.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{StoragePolicy, Tape};
use crate::error::{Error, Result};
use crate::petl::{Method, Model, ViTConfig};
use crate::tensor::Tensor;

pub const BYTES_PER_MB: f64 = (1u64 << 20) as f64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Linear,
    AttentionSoftmax,
    /// Query/key/value operands kept by the two attention products.
    AttentionMatmul,
    Gelu,
    Relu,
    Layernorm,
    Lrp,
    Cap,
    Lsb,
    Adapter,
    Lora,
    VptPrompt,
    Head,
    Embedding,
}

impl LayerKind {
    /// Parameter-free layers whose saved state can be quantized.
    pub fn is_nonparametric(self) -> bool {
        matches!(self, LayerKind::AttentionSoftmax | LayerKind::Gelu | LayerKind::Relu)
    }
}

/// Which saved tensors count toward the activation total.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AccountingScope {
    /// Per-layer inputs of linear maps and non-parametric layers; the
    /// operands of the attention products are left out.
    #[default]
    Analysis,
    /// Everything the tape actually holds.
    Tape,
}

impl AccountingScope {
    pub fn name(self) -> &'static str {
        match self {
            AccountingScope::Analysis => "analysis",
            AccountingScope::Tape => "tape",
        }
    }

    fn counts(self, kind: LayerKind) -> bool {
        self == AccountingScope::Tape || kind != LayerKind::AttentionMatmul
    }
}

impl FromStr for AccountingScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analysis" => Ok(AccountingScope::Analysis),
            "tape" => Ok(AccountingScope::Tape),
            other => Err(Error::Config(format!("unknown accounting scope {other:?}"))),
        }
    }
}

impl fmt::Display for AccountingScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One layer of a model description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Values the layer's backward would need, per sample.
    pub activation_elements: u64,
    pub param_count: u64,
    pub trainable_params: u64,
    pub save_policy: StoragePolicy,
}

/// A full model description as accepted on the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: String,
    pub method: String,
    /// Parameter count of the unmodified backbone with its head; the
    /// denominator of the trainable percentage.
    pub backbone_params: u64,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.backbone_params == 0 {
            return Err(Error::Validation("backbone_params must be positive".into()));
        }
        for l in &self.layers {
            if l.activation_elements == 0 {
                return Err(Error::Validation(format!("layer {:?} has no activation elements", l.name)));
            }
            if l.trainable_params > l.param_count {
                return Err(Error::Validation(format!(
                    "layer {:?} has more trainable parameters than parameters",
                    l.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub name: String,
    pub kind: LayerKind,
    pub elements: u64,
    pub policy: StoragePolicy,
    pub activation_bytes: u64,
    /// False when the scope leaves this row out of the activation total.
    pub counted: bool,
    pub params: u64,
    pub trainable_params: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub arch: String,
    pub method: String,
    pub batch: u64,
    pub scope: AccountingScope,
    pub rows: Vec<MemoryRow>,
    pub total_params: u64,
    pub trainable_params: u64,
    pub backbone_params: u64,
    pub trainable_percent: f64,
    pub weight_bytes: u64,
    pub gradient_bytes: u64,
    pub optimizer_bytes: u64,
    pub activation_bytes: u64,
    pub total_bytes: u64,
    pub total_mb: f64,
}

impl MemoryReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Saved bytes per layer name for rows that keep anything.
    pub fn activation_bytes_by_name(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.counted && r.activation_bytes > 0) {
            *out.entry(r.name.clone()).or_insert(0) += r.activation_bytes;
        }
        out
    }
}

/// Bytes for every part of training state at `batch`.
pub fn estimate(spec: &ModelSpec, batch: u64, scope: AccountingScope) -> Result<MemoryReport> {
    if batch == 0 {
        return Err(Error::Config("batch must be at least 1".into()));
    }
    spec.validate()?;
    let rows: Vec<MemoryRow> = spec
        .layers
        .iter()
        .map(|l| {
            let elements = l.activation_elements * batch;
            MemoryRow {
                name: l.name.clone(),
                kind: l.kind,
                elements,
                policy: l.save_policy,
                activation_bytes: l.save_policy.bytes(elements),
                counted: scope.counts(l.kind),
                params: l.param_count,
                trainable_params: l.trainable_params,
            }
        })
        .collect();
    let total_params: u64 = rows.iter().map(|r| r.params).sum();
    let trainable_params: u64 = rows.iter().map(|r| r.trainable_params).sum();
    let activation_bytes: u64 = rows.iter().filter(|r| r.counted).map(|r| r.activation_bytes).sum();
    let weight_bytes = 4 * total_params;
    let gradient_bytes = 4 * trainable_params;
    let optimizer_bytes = 8 * trainable_params;
    let total_bytes = weight_bytes + gradient_bytes + optimizer_bytes + activation_bytes;
    Ok(MemoryReport {
        arch: spec.arch.clone(),
        method: spec.method.clone(),
        batch,
        scope,
        rows,
        total_params,
        trainable_params,
        backbone_params: spec.backbone_params,
        trainable_percent: 100.0 * trainable_params as f64 / spec.backbone_params as f64,
        weight_bytes,
        gradient_bytes,
        optimizer_bytes,
        activation_bytes,
        total_bytes,
        total_mb: total_bytes as f64 / BYTES_PER_MB,
    })
}

/// Per-layer description of `cfg` adapted by `method`. `quantize` selects
/// 4-bit/1-bit saves for softmax, GELU and ReLU.
pub fn build_model_spec(arch: &str, cfg: &ViTConfig, method: Method, quantize: bool) -> Result<ModelSpec> {
    cfg.validate()?;
    let c = cfg.d_model as u64;
    let m = cfg.mlp_dim as u64;
    let t = cfg.tokens() as u64;
    let p = cfg.patches() as u64;
    let k = cfg.classes as u64;
    let heads = cfg.heads as u64;
    let side = cfg.side_dim() as u64;
    let pd = cfg.patch_dim() as u64;

    let train_w = method == Method::Full;
    let train_b = method.tunes_biases();
    let act_policy = |needed: bool, low: StoragePolicy| match (needed, quantize) {
        (false, _) => StoragePolicy::NoSave,
        (true, true) => low,
        (true, false) => StoragePolicy::Full32,
    };
    let keep = |needed: bool| if needed { StoragePolicy::Full32 } else { StoragePolicy::NoSave };

    let mut layers = Vec::new();
    let push = |layers: &mut Vec<LayerSpec>, name: String, kind, elements: u64, params: u64, trainable: u64, policy| {
        layers.push(LayerSpec {
            name,
            kind,
            activation_elements: elements,
            param_count: params,
            trainable_params: trainable,
            save_policy: policy,
        })
    };
    // Parameter count of a linear layer and how much of it trains.
    let linear = |din: u64, dout: u64| {
        let total = din * dout + dout;
        let trainable = if train_w { total } else if train_b { dout } else { 0 };
        (total, trainable)
    };

    let (pp, pt) = linear(pd, c);
    push(&mut layers, "embed.patch".into(), LayerKind::Linear, p * pd, pp, pt, keep(train_w));
    let cls_train = if train_w { c } else { 0 };
    push(&mut layers, "embed.tokens".into(), LayerKind::Embedding, t * c, c, cls_train, StoragePolicy::NoSave);
    push(&mut layers, "embed.pos".into(), LayerKind::Embedding, t * c, t * c, cls_train * t, StoragePolicy::NoSave);
    // Whether the running hidden state depends on a trainable parameter.
    let mut flows = train_w || train_b;

    for i in 0..cfg.depth {
        let l = |s: &str| format!("blocks.{i}.{s}");
        let mut tt = t;
        if method == Method::S2a {
            let r = cfg.lrp_rank as u64;
            let n = t * r + r * c;
            push(&mut layers, l("lrp"), LayerKind::Lrp, t * c, n, n, StoragePolicy::NoSave);
            flows = true;
        }
        if method == Method::Vpt {
            let n = cfg.vpt_tokens as u64 * c;
            tt = t + cfg.vpt_tokens as u64;
            push(&mut layers, l("vpt"), LayerKind::VptPrompt, tt * c, n, n, StoragePolicy::NoSave);
            flows = true;
        }

        let (qp, qt) = linear(c, 3 * c);
        push(&mut layers, l("attn.qkv"), LayerKind::Linear, tt * c, qp, qt, keep(train_w));
        let mut qkv_flows = flows || qt > 0;
        if method == Method::Lora {
            let r = cfg.lora_rank as u64;
            push(&mut layers, l("attn.lora_a"), LayerKind::Lora, tt * c, c * r, c * r, StoragePolicy::Full32);
            push(&mut layers, l("attn.lora_b"), LayerKind::Lora, tt * r, r * c, r * c, StoragePolicy::Full32);
            qkv_flows = true;
        }
        push(&mut layers, l("attn.scores"), LayerKind::AttentionMatmul, 2 * tt * c, 0, 0, keep(qkv_flows));
        push(&mut layers, 
            l("attn.softmax"),
            LayerKind::AttentionSoftmax,
            heads * tt * tt,
            0,
            0,
            act_policy(qkv_flows, StoragePolicy::Quant4),
        );
        push(&mut layers, l("attn.context"), LayerKind::AttentionMatmul, tt * c, 0, 0, keep(qkv_flows));
        let (op, ot) = linear(c, c);
        push(&mut layers, l("attn.proj"), LayerKind::Linear, tt * c, op, ot, keep(train_w));
        let mut attn_flows = qkv_flows || ot > 0;

        let adapter = |layers: &mut Vec<LayerSpec>, k: usize| {
            let a = cfg.adapter_dim as u64;
            let ad = |s: &str| format!("blocks.{i}.adapter{k}.{s}");
            push(layers, ad("down"), LayerKind::Adapter, tt * c, c * a + a, c * a + a, StoragePolicy::Full32);
            push(layers, ad("act"), LayerKind::Relu, tt * a, 0, 0, act_policy(true, StoragePolicy::Mask1));
            push(layers, ad("up"), LayerKind::Adapter, tt * a, a * c + c, a * c + c, StoragePolicy::Full32);
        };
        if method == Method::Adapter {
            adapter(&mut layers, 1);
            attn_flows = true;
        }
        flows = flows || attn_flows;

        let (f1p, f1t) = linear(c, m);
        push(&mut layers, l("mlp.fc1"), LayerKind::Linear, tt * c, f1p, f1t, keep(train_w));
        let h_flows = flows || f1t > 0;
        push(&mut layers, l("mlp.gelu"), LayerKind::Gelu, tt * m, 0, 0, act_policy(h_flows, StoragePolicy::Quant4));
        let (f2p, f2t) = linear(m, c);
        push(&mut layers, l("mlp.fc2"), LayerKind::Linear, tt * m, f2p, f2t, keep(train_w));
        let mut m_flows = h_flows || f2t > 0;
        if method == Method::Adapter {
            adapter(&mut layers, 2);
            m_flows = true;
        }
        flows = flows || m_flows;

        if method == Method::S2a {
            push(&mut layers, l("cap"), LayerKind::Cap, p * c, 0, 0, StoragePolicy::NoSave);
            let pw = side * side + side;
            push(&mut layers, l("lsb.pw1"), LayerKind::Lsb, p * side, pw, pw, StoragePolicy::Full32);
            push(&mut layers, l("lsb.dw"), LayerKind::Lsb, p * side, 10 * side, 10 * side, StoragePolicy::Full32);
            push(&mut layers, l("lsb.pw2"), LayerKind::Lsb, p * side, pw, pw, StoragePolicy::Full32);
        }
    }

    let head_in = c + if method == Method::S2a { side } else { 0 };
    let hp = head_in * k + k;
    push(&mut layers, "head".into(), LayerKind::Head, head_in, hp, hp, StoragePolicy::Full32);
    push(&mut layers, "head.loss".into(), LayerKind::Head, k, 0, 0, StoragePolicy::Full32);

    Ok(ModelSpec {
        arch: arch.to_string(),
        method: method.name().to_string(),
        backbone_params: backbone_params(cfg),
        layers,
    })
}

/// Parameters of the unmodified backbone including a `d_model`-input head.
pub fn backbone_params(cfg: &ViTConfig) -> u64 {
    let c = cfg.d_model as u64;
    let m = cfg.mlp_dim as u64;
    let t = cfg.tokens() as u64;
    let embed = cfg.patch_dim() as u64 * c + c + c + t * c;
    let block = (c * 3 * c + 3 * c) + (c * c + c) + (c * m + m) + (m * c + c);
    embed + cfg.depth as u64 * block + c * cfg.classes as u64 + cfg.classes as u64
}

/// Whether `method` quantizes its non-parametric saves by default.
pub fn default_quantize(method: Method) -> bool {
    method == Method::S2a
}

/// Text table with one line per report: method, trainable percentage and
/// total memory.
pub fn render_table(reports: &[MemoryReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:>12} {:>13}", "Method", "Params (%)", "Memory (MB)");
    for r in reports {
        let _ = writeln!(out, "{:<10} {:>12.2} {:>13.1}", r.method, r.trainable_percent, r.total_mb);
    }
    out
}

/// Itemized breakdown of a single report.
pub fn render_breakdown(r: &MemoryReport) -> String {
    let mut out = render_table(std::slice::from_ref(r));
    let mb = |b: u64| b as f64 / BYTES_PER_MB;
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<24} {:>13}", "Component", "Memory (MB)");
    for (name, b) in [
        ("weights", r.weight_bytes),
        ("gradients", r.gradient_bytes),
        ("optimizer state", r.optimizer_bytes),
        ("saved activations", r.activation_bytes),
    ] {
        let _ = writeln!(out, "{name:<24} {:>13.1}", mb(b));
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<28} {:<18} {:<7} {:>14} {:>12}", "Layer", "Kind", "Policy", "Elements", "Bytes");
    for row in r.rows.iter().filter(|row| row.activation_bytes > 0) {
        let kind = serde_json::to_value(row.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let mark = if row.counted { "" } else { " (excluded)" };
        let _ = writeln!(
            out,
            "{:<28} {:<18} {:<7} {:>14} {:>12}{mark}",
            row.name, kind, row.policy, row.elements, row.activation_bytes
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Discrepancy {
    pub layer: String,
    pub predicted: u64,
    pub measured: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TapeCheck {
    pub method: String,
    pub batch: u64,
    pub quantize: bool,
    pub predicted_bytes: u64,
    pub measured_bytes: u64,
    pub discrepancies: Vec<Discrepancy>,
}

impl TapeCheck {
    pub fn is_exact(&self) -> bool {
        self.discrepancies.is_empty() && self.predicted_bytes == self.measured_bytes
    }
}

/// Runs `model` forward on a random batch and compares the tape's saved
/// bytes per layer with the accountant's prediction for the same model.
/// `overrides` force node policies on the tape only.
pub fn verify_against_tape(
    model: &Model,
    batch: usize,
    quantize: bool,
    overrides: &[(&str, StoragePolicy)],
    seed: u64,
) -> Result<TapeCheck> {
    let cfg = model.config();
    let spec = build_model_spec("toy_vit", cfg, model.method(), quantize)?;
    let report = estimate(&spec, batch as u64, AccountingScope::Tape)?;
    let predicted = report.activation_bytes_by_name();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = Tensor::from_fn(&[batch, cfg.image_size, cfg.image_size, cfg.channels], |_| rng.gen::<f32>());
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..cfg.classes)).collect();
    let mut tape = Tape::new(quantize);
    for (label, policy) in overrides {
        tape.override_policy(label, *policy);
    }
    model.forward(&mut tape, &images, Some(&labels))?;
    let measured = tape.saved_bytes_by_label();

    let mut names: Vec<&String> = predicted.keys().chain(measured.keys()).collect();
    names.sort();
    names.dedup();
    let discrepancies = names
        .into_iter()
        .filter_map(|name| {
            let p = predicted.get(name).copied().unwrap_or(0);
            let m = measured.get(name).copied().unwrap_or(0);
            (p != m).then(|| Discrepancy {
                layer: name.clone(),
                predicted: p,
                measured: m,
            })
        })
        .collect();
    Ok(TapeCheck {
        method: model.method().name().to_string(),
        batch: batch as u64,
        quantize,
        predicted_bytes: report.activation_bytes,
        measured_bytes: tape.live_activation_bytes(),
        discrepancies,
    })
}
