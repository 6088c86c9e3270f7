use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::{load_dataset, DataSource, Dataset, SplitTag};
use super::optim::AdamW;
use super::schedule::cosine_schedule;
use crate::autograd::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::memory::{build_model_spec, default_quantize, estimate, AccountingScope, MemoryReport};
use crate::petl::{Method, Model, ViTConfig};

const SHUFFLE_STREAM: u64 = 0xD47A_0BDE;
const EVAL_CHUNK: usize = 64;

/// Supervised pretraining of the whole backbone on a source task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub data: DataSource,
    pub epochs: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub batch: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            data: DataSource::Synthetic { seed: 1, n: 1000 },
            epochs: 10,
            lr: 3e-3,
            weight_decay: 0.05,
            batch: 32,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub model: ViTConfig,
    /// Quantized saves for softmax, GELU and ReLU; method default when unset.
    pub quantize: Option<bool>,
    pub lr: f32,
    pub weight_decay: f32,
    pub batch: usize,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub seed: u64,
    pub data: DataSource,
    /// Backbone pretraining before fine-tuning; a random backbone if unset.
    pub pretrain: Option<PretrainConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::S2a,
            model: ViTConfig::toy(),
            quantize: None,
            lr: 1e-2,
            weight_decay: 0.05,
            batch: 32,
            warmup_epochs: 2,
            total_epochs: 20,
            seed: 0,
            data: DataSource::Synthetic { seed: 7, n: 1000 },
            pretrain: Some(PretrainConfig::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be at least 1".into()));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::Config("warmup_epochs exceeds total_epochs".into()));
        }
        if let Some(p) = &self.pretrain {
            if p.batch == 0 || !(p.lr > 0.0) {
                return Err(Error::Config("pretrain needs batch ≥ 1 and lr > 0".into()));
            }
        }
        Ok(())
    }

    pub fn quantize(&self) -> bool {
        self.quantize.unwrap_or_else(|| default_quantize(self.method))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub lr: f32,
}

/// Saved-activation bytes of one training batch with and without
/// quantized saves, measured on the tape and predicted by the accountant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationAudit {
    pub batch: usize,
    pub measured_quantized: u64,
    pub measured_full: u64,
    pub predicted_quantized: u64,
    pub predicted_full: u64,
    pub measured_ratio: f64,
    pub predicted_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: Method,
    pub quantize: bool,
    pub seed: u64,
    pub epochs: usize,
    pub steps: usize,
    pub final_val_accuracy: f64,
    pub test_accuracy: f64,
    pub total_params: usize,
    pub trainable_params: usize,
    pub trainable_fraction: f64,
    pub frozen_bit_identical: bool,
    pub activations: ActivationAudit,
    pub loss_curve_sha256: String,
    pub memory: MemoryReport,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub history: Vec<EpochRecord>,
    pub losses: Vec<f32>,
    pub summary: Summary,
    pub model: Model,
}

/// Trains the whole backbone on the source task and returns its parameters.
pub fn pretrain_backbone(model_cfg: &ViTConfig, cfg: &PretrainConfig) -> Result<ParamStore> {
    let data = load_dataset(&cfg.data, model_cfg.classes, cfg.seed)?;
    let mut model = Model::new(model_cfg.clone(), Method::Full, cfg.seed)?;
    let warmup = cfg.epochs.min(1);
    fit(&mut model, &data, cfg.epochs, warmup, cfg.batch, cfg.lr, cfg.weight_decay, false, cfg.seed, |_| {})?;
    Ok(model.params().clone())
}

/// Fine-tunes `config.method` on `data` starting from `pretrained` (a
/// parameter store holding at least every backbone tensor).
pub fn run_finetune(
    config: &TrainConfig,
    data: &Dataset,
    pretrained: Option<&ParamStore>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FinetuneOutcome> {
    config.validate()?;
    if data.classes != config.model.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {}",
            data.classes, config.model.classes
        )));
    }
    let cfg = &config.model;
    if data.image_shape() != [cfg.image_size, cfg.image_size, cfg.channels] {
        return Err(Error::Config(format!("dataset images {:?} do not fit the model", data.image_shape())));
    }
    let quantize = config.quantize();
    let mut model = Model::new(cfg.clone(), config.method, config.seed)?;
    if let Some(p) = pretrained {
        model.load_backbone(p)?;
    }
    let frozen_before = frozen_snapshot(model.params());

    let mut history = Vec::with_capacity(config.total_epochs);
    let losses = fit(
        &mut model,
        data,
        config.total_epochs,
        config.warmup_epochs,
        config.batch,
        config.lr,
        config.weight_decay,
        quantize,
        config.seed,
        |r| {
            on_epoch(&r);
            history.push(r);
        },
    )?;

    let frozen_bit_identical = frozen_before == frozen_snapshot(model.params());
    let activations = audit(&model, data, config.batch)?;
    let spec = build_model_spec("toy_vit", cfg, config.method, quantize)?;
    let memory = estimate(&spec, config.batch as u64, AccountingScope::Analysis)?;
    let store = model.params();
    let mut hasher = Sha256::new();
    for l in &losses {
        hasher.update(l.to_le_bytes());
    }
    let summary = Summary {
        method: config.method,
        quantize,
        seed: config.seed,
        epochs: config.total_epochs,
        steps: losses.len(),
        final_val_accuracy: history.last().map_or(0.0, |r| r.val_accuracy),
        test_accuracy: accuracy(&model, data, SplitTag::Test)?,
        total_params: store.total_elements(),
        trainable_params: store.trainable_elements(),
        trainable_fraction: store.trainable_elements() as f64 / store.total_elements() as f64,
        frozen_bit_identical,
        activations,
        loss_curve_sha256: hex(&hasher.finalize()),
        memory,
    };
    Ok(FinetuneOutcome {
        history,
        losses,
        summary,
        model,
    })
}

/// Shared loop. Returns the per-step losses.
#[allow(clippy::too_many_arguments)]
fn fit(
    model: &mut Model,
    data: &Dataset,
    epochs: usize,
    warmup_epochs: usize,
    batch: usize,
    lr: f32,
    weight_decay: f32,
    quantize: bool,
    seed: u64,
    mut on_epoch: impl FnMut(EpochRecord),
) -> Result<Vec<f32>> {
    let steps_per_epoch = data.train.len().div_ceil(batch);
    if steps_per_epoch == 0 {
        return Err(Error::Config("training split is empty".into()));
    }
    let total = epochs * steps_per_epoch;
    let warmup = warmup_epochs * steps_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_STREAM);
    let mut opt = AdamW::new();
    let mut losses = Vec::with_capacity(total);
    let mut order = data.train.clone();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut step_lr = 0.0;
        for chunk in order.chunks(batch) {
            let step = losses.len();
            step_lr = cosine_schedule(step, warmup, total, lr)?;
            let (images, labels) = data.batch(chunk);
            let mut tape = Tape::new(quantize);
            let out = model.forward(&mut tape, &images, Some(&labels))?;
            let loss = out.loss.expect("labels were given");
            let value = loss.value().data()[0];
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("loss = {value}"),
                });
            }
            let grads = tape.backward(&loss, model.params())?;
            drop(tape);
            opt.step(model.params_mut(), &grads, step_lr, weight_decay).map_err(|e| match e {
                Error::Numeric(detail) => Error::Divergence { step, detail },
                e => e,
            })?;
            losses.push(value);
            epoch_loss += value as f64;
        }
        on_epoch(EpochRecord {
            epoch: epoch + 1,
            train_loss: epoch_loss / steps_per_epoch as f64,
            val_accuracy: accuracy(model, data, SplitTag::Val)?,
            lr: step_lr,
        });
    }
    Ok(losses)
}

/// Fraction of `tag` classified correctly.
pub fn accuracy(model: &Model, data: &Dataset, tag: SplitTag) -> Result<f64> {
    let idx = data.indices(tag);
    if idx.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (images, labels) = data.batch(chunk);
        let pred = model.predict(&images)?;
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / idx.len() as f64)
}

fn audit(model: &Model, data: &Dataset, batch: usize) -> Result<ActivationAudit> {
    let n = batch.min(data.train.len());
    let (images, labels) = data.batch(&data.train[..n]);
    let measure = |q: bool| -> Result<u64> {
        let mut tape = Tape::new(q);
        model.forward(&mut tape, &images, Some(&labels))?;
        Ok(tape.live_activation_bytes())
    };
    let predict = |q: bool| -> Result<u64> {
        let spec = build_model_spec("toy_vit", model.config(), model.method(), q)?;
        Ok(estimate(&spec, n as u64, AccountingScope::Tape)?.activation_bytes)
    };
    let (mq, mf) = (measure(true)?, measure(false)?);
    let (pq, pf) = (predict(true)?, predict(false)?);
    Ok(ActivationAudit {
        batch: n,
        measured_quantized: mq,
        measured_full: mf,
        predicted_quantized: pq,
        predicted_full: pf,
        measured_ratio: mq as f64 / mf as f64,
        predicted_ratio: pq as f64 / pf as f64,
    })
}

fn frozen_snapshot(store: &ParamStore) -> Vec<(String, Vec<u32>)> {
    store
        .iter()
        .filter(|(_, p)| !p.trainable)
        .map(|(_, p)| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
