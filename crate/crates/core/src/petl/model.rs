use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Method, ViTConfig};
use super::layers::{normal, BiasLinear, Cap, Lrp, Lsb};
use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Offset mixed into the seed for method-specific parameters, so the
/// backbone draws are identical across methods.
const METHOD_STREAM: u64 = 0x5EED_0F_AD_A7;

#[derive(Clone, Debug)]
struct Adapter {
    down: BiasLinear,
    up: BiasLinear,
}

#[derive(Clone, Debug)]
struct Block {
    qkv: BiasLinear,
    proj: BiasLinear,
    fc1: BiasLinear,
    fc2: BiasLinear,
    lrp: Option<Lrp>,
    lsb: Option<Lsb>,
    lora: Option<(ParamId, ParamId)>,
    adapters: Option<[Adapter; 2]>,
    vpt: Option<ParamId>,
}

/// Tensors produced by one forward pass.
pub struct Forward {
    pub logits: Var,
    /// Class-token features of the backbone after the last block.
    pub cls: Var,
    pub loss: Option<Var>,
}

/// A ViT backbone plus the parameters one tuning method adds to it.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ViTConfig,
    method: Method,
    store: ParamStore,
    patch: BiasLinear,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    head: BiasLinear,
}

/// `[B, H, W, ch]` images to `[B·patches, patch·patch·ch]` rows, patches in
/// row-major grid order and pixels row-major inside each patch.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let [b, h, w, ch] = *images.shape() else {
        return Err(Error::Shape {
            shape: images.shape().to_vec(),
            reason: "images must be [batch, height, width, channels]".into(),
        });
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape {
            shape: images.shape().to_vec(),
            reason: format!("not divisible into {patch}×{patch} patches"),
        });
    }
    let (gh, gw) = (h / patch, w / patch);
    let d = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for n in 0..b {
        for pi in 0..gh {
            for pj in 0..gw {
                for y in 0..patch {
                    let row = ((n * h + pi * patch + y) * w + pj * patch) * ch;
                    out.extend_from_slice(&d[row..row + patch * ch]);
                }
            }
        }
    }
    Tensor::new(vec![b * gh * gw, patch * patch * ch], out)
}

impl Model {
    /// Builds the backbone from `seed` (identical for every method) and the
    /// method's extra parameters from a derived stream.
    pub fn new(cfg: ViTConfig, method: Method, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (c, m, t) = (cfg.d_model, cfg.mlp_dim, cfg.tokens());
        let train_w = method == Method::Full;
        let train_b = method.tunes_biases();
        let std_in = |n: usize| 1.0 / (n as f32).sqrt();

        let patch = BiasLinear::new(
            &mut store,
            "embed.patch",
            normal(&mut rng, &[cfg.patch_dim(), c], std_in(cfg.patch_dim())),
            Some(normal(&mut rng, &[c], 0.02)),
            train_w,
            train_b,
        )?;
        let cls = store.add("embed.cls", normal(&mut rng, &[1, c], 0.02), train_w, false)?;
        let pos = store.add("embed.pos", normal(&mut rng, &[t, c], 0.02), train_w, false)?;

        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let mut lin = |name: &str, din: usize, dout: usize, rng: &mut ChaCha8Rng| {
                BiasLinear::new(
                    &mut store,
                    &format!("blocks.{i}.{name}"),
                    normal(rng, &[din, dout], std_in(din)),
                    Some(normal(rng, &[dout], 0.02)),
                    train_w,
                    train_b,
                )
            };
            let qkv = lin("attn.qkv", c, 3 * c, &mut rng)?;
            let proj = lin("attn.proj", c, c, &mut rng)?;
            let fc1 = lin("mlp.fc1", c, m, &mut rng)?;
            let fc2 = lin("mlp.fc2", m, c, &mut rng)?;
            blocks.push(Block {
                qkv,
                proj,
                fc1,
                fc2,
                lrp: None,
                lsb: None,
                lora: None,
                adapters: None,
                vpt: None,
            });
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ METHOD_STREAM);
        for (i, block) in blocks.iter_mut().enumerate() {
            match method {
                Method::S2a => {
                    block.lrp = Some(Lrp::new(&mut store, &format!("blocks.{i}.lrp"), t, c, cfg.lrp_rank, &mut rng)?);
                    block.lsb = Some(Lsb::new(&mut store, &format!("blocks.{i}.lsb"), cfg.side_dim(), &mut rng)?);
                }
                Method::Lora => {
                    let r = cfg.lora_rank;
                    let a = store.add(&format!("blocks.{i}.attn.lora_a.w"), Tensor::zeros(&[c, r]), true, true)?;
                    let b = store.add(&format!("blocks.{i}.attn.lora_b.w"), normal(&mut rng, &[r, c], 0.02), true, true)?;
                    block.lora = Some((a, b));
                }
                Method::Adapter => {
                    let a = cfg.adapter_dim;
                    let mut make = |k: usize, rng: &mut ChaCha8Rng| -> Result<Adapter> {
                        let down = BiasLinear::new(
                            &mut store,
                            &format!("blocks.{i}.adapter{k}.down"),
                            normal(rng, &[c, a], std_in(c)),
                            Some(Tensor::zeros(&[a])),
                            true,
                            true,
                        )?;
                        let up = BiasLinear::new(
                            &mut store,
                            &format!("blocks.{i}.adapter{k}.up"),
                            Tensor::zeros(&[a, c]),
                            Some(Tensor::zeros(&[c])),
                            true,
                            true,
                        )?;
                        Ok(Adapter { down, up })
                    };
                    block.adapters = Some([make(1, &mut rng)?, make(2, &mut rng)?]);
                }
                Method::Vpt => {
                    let p = normal(&mut rng, &[cfg.vpt_tokens, c], 0.02);
                    block.vpt = Some(store.add(&format!("blocks.{i}.vpt"), p, true, false)?);
                }
                Method::Full | Method::Linear | Method::Bias => {}
            }
        }
        let head_in = c + if method == Method::S2a { cfg.side_dim() } else { 0 };
        let head = BiasLinear::new(
            &mut store,
            "head",
            normal(&mut rng, &[head_in, cfg.classes], 0.01),
            Some(Tensor::zeros(&[cfg.classes])),
            true,
            true,
        )?;
        Ok(Model {
            cfg,
            method,
            store,
            patch,
            cls,
            pos,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.cfg
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Copies every backbone tensor (everything outside the head and the
    /// method's own parameters) from `other` by name.
    pub fn load_backbone(&mut self, other: &ParamStore) -> Result<()> {
        let names: Vec<String> = self
            .store
            .iter()
            .map(|(_, p)| p.name.clone())
            .filter(|n| is_backbone_name(n))
            .collect();
        for name in names {
            let src = other.value(other.lookup(&name)?).clone();
            let id = self.store.lookup(&name)?;
            let dst = &mut self.store.get_mut(id).value;
            if dst.shape() != src.shape() {
                return Err(Error::dim("load_backbone", dst.shape(), src.shape()));
            }
            *dst = src;
        }
        Ok(())
    }

    /// Records the forward pass of `images` (`[B, H, W, ch]`) on `tape`.
    pub fn forward(&self, tape: &mut Tape, images: &Tensor, labels: Option<&[usize]>) -> Result<Forward> {
        let cfg = &self.cfg;
        let expected = [cfg.image_size, cfg.image_size, cfg.channels];
        if images.rank() != 4 || images.shape()[1..] != expected {
            return Err(Error::dim("model_forward", images.shape(), &expected));
        }
        let batch = images.shape()[0];
        let (t, p, heads) = (cfg.tokens(), cfg.patches(), cfg.heads);
        let store = &self.store;

        let x = tape.input(patchify(images, cfg.patch)?);
        let x = self.patch.forward(tape, store, "embed.patch", &x)?;
        let cls = tape.param(store, self.cls);
        let x = tape.concat_tokens("embed.tokens", &[(&cls, true), (&x, false)], batch)?;
        let pos = tape.param(store, self.pos);
        let mut x = tape.add_tokenwise("embed.pos", &x, &pos)?;

        let cap = Cap { factor: cfg.lsb_factor };
        let mut side: Option<Var> = None;
        for (i, blk) in self.blocks.iter().enumerate() {
            let l = |s: &str| format!("blocks.{i}.{s}");
            if let Some(lrp) = &blk.lrp {
                x = lrp.forward(tape, store, &l("lrp"), &x)?;
            }
            let mut h = x.clone();
            if let Some(pid) = blk.vpt {
                let prompts = tape.param(store, pid);
                h = tape.concat_tokens(&l("vpt"), &[(&h, false), (&prompts, true)], batch)?;
            }

            let mut qkv = blk.qkv.forward(tape, store, &l("attn.qkv"), &h)?;
            if let Some((a, b)) = blk.lora {
                let a = tape.param(store, a);
                let b = tape.param(store, b);
                let u = tape.linear(&l("attn.lora_a"), &h, &a, None)?;
                let u = tape.linear(&l("attn.lora_b"), &u, &b, None)?;
                qkv = tape.add_columns(&l("attn.lora"), &qkv, &u, 0)?;
            }
            let scores = tape.attention_scores(&l("attn.scores"), &qkv, batch, heads)?;
            let probs = tape.softmax(&l("attn.softmax"), &scores)?;
            let ctx = tape.attention_context(&l("attn.context"), &probs, &qkv, batch, heads)?;
            let mut a = blk.proj.forward(tape, store, &l("attn.proj"), &ctx)?;
            if let Some(ad) = &blk.adapters {
                a = adapter(tape, store, &ad[0], &l("adapter1"), &a)?;
            }
            h = tape.add(&l("attn.residual"), &h, &a)?;

            let m = blk.fc1.forward(tape, store, &l("mlp.fc1"), &h)?;
            let m = tape.gelu(&l("mlp.gelu"), &m)?;
            let mut m = blk.fc2.forward(tape, store, &l("mlp.fc2"), &m)?;
            if let Some(ad) = &blk.adapters {
                m = adapter(tape, store, &ad[1], &l("adapter2"), &m)?;
            }
            h = tape.add(&l("mlp.residual"), &h, &m)?;

            x = if blk.vpt.is_some() {
                tape.slice_tokens(&l("vpt.drop"), &h, batch, 0, t)?
            } else {
                h
            };

            if let Some(lsb) = &blk.lsb {
                let patches = tape.slice_tokens(&l("side.patches"), &x, batch, 1, p)?;
                let d = cap.forward(tape, &l("cap"), &patches)?;
                side = Some(lsb.forward(tape, store, &l("lsb"), &d, side.as_ref(), batch, cfg.grid())?);
            }
        }

        let cls = tape.slice_tokens("head.cls", &x, batch, 0, 1)?;
        let feat = match &side {
            Some(s) => {
                let pooled = tape.mean_tokens("head.side_pool", s, batch)?;
                tape.concat_channels("head.concat", &cls, &pooled)?
            }
            None => cls.clone(),
        };
        let logits = self.head.forward(tape, store, "head", &feat)?;
        let loss = match labels {
            Some(y) => Some(tape.cross_entropy("head.loss", &logits, y)?),
            None => None,
        };
        Ok(Forward { logits, cls, loss })
    }

    /// Argmax predictions without recording anything for backward.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let mut tape = Tape::no_grad();
        let out = self.forward(&mut tape, images, None)?;
        let k = self.cfg.classes;
        Ok(out
            .logits
            .value()
            .data()
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

fn adapter(tape: &mut Tape, store: &ParamStore, ad: &Adapter, label: &str, x: &Var) -> Result<Var> {
    let d = ad.down.forward(tape, store, &format!("{label}.down"), x)?;
    let r = tape.relu(&format!("{label}.act"), &d)?;
    let u = ad.up.forward(tape, store, &format!("{label}.up"), &r)?;
    tape.add(&format!("{label}.out"), x, &u)
}

/// Names of parameters every method shares with the pretrained backbone.
pub(crate) fn is_backbone_name(name: &str) -> bool {
    const BACKBONE: [&str; 4] = ["attn.qkv.", "attn.proj.", "mlp.fc1.", "mlp.fc2."];
    name.starts_with("embed.") || (name.starts_with("blocks.") && BACKBONE.iter().any(|b| name.contains(b)))
}
