use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) fn normal(rng: &mut impl Rng, shape: &[usize], std: f32) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// `y = x·W + b`. With `W` frozen the tape keeps nothing for this layer.
#[derive(Clone, Debug)]
pub struct BiasLinear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl BiasLinear {
    /// Registers `{name}.w` and, when given, `{name}.b`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        w: Tensor,
        b: Option<Tensor>,
        train_w: bool,
        train_b: bool,
    ) -> Result<Self> {
        let w = store.add(&format!("{name}.w"), w, train_w, true)?;
        let b = match b {
            Some(b) => Some(store.add(&format!("{name}.b"), b, train_b, false)?),
            None => None,
        };
        Ok(BiasLinear { w, b })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, label: &str, x: &Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        tape.linear(label, x, &w, b.as_ref())
    }
}

/// Low-rank prompt `y = x + A·B` with `A` starting at zero.
#[derive(Clone, Debug)]
pub struct Lrp {
    pub a: ParamId,
    pub b: ParamId,
}

impl Lrp {
    pub const INIT_STD: f32 = 0.02;

    /// `rank` must be positive and below both `tokens` and `channels`.
    pub fn new(store: &mut ParamStore, name: &str, tokens: usize, channels: usize, rank: usize, rng: &mut impl Rng) -> Result<Self> {
        if rank == 0 || rank >= tokens || rank >= channels {
            return Err(Error::Config(format!(
                "{name}: rank {rank} must be positive and below {tokens} tokens and {channels} channels"
            )));
        }
        let a = store.add(&format!("{name}.a"), Tensor::zeros(&[tokens, rank]), true, false)?;
        let b = store.add(&format!("{name}.b"), normal(rng, &[rank, channels], Self::INIT_STD), true, false)?;
        Ok(Lrp { a, b })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, label: &str, x: &Var) -> Result<Var> {
        let a = tape.param(store, self.a);
        let b = tape.param(store, self.b);
        tape.low_rank_prompt(label, x, &a, &b)
    }
}

/// Parameter-free channel average pooling by `factor`.
#[derive(Clone, Copy, Debug)]
pub struct Cap {
    pub factor: usize,
}

impl Cap {
    pub fn forward(&self, tape: &mut Tape, label: &str, x: &Var) -> Result<Var> {
        tape.channel_avg_pool(label, x, self.factor)
    }
}

/// Pointwise → 3×3 depthwise → pointwise at a fixed reduced width.
#[derive(Clone, Debug)]
pub struct Lsb {
    pub pw1: BiasLinear,
    pub dw_kernel: ParamId,
    pub dw_bias: ParamId,
    pub pw2: BiasLinear,
}

impl Lsb {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut impl Rng) -> Result<Self> {
        let std = 1.0 / (width as f32).sqrt();
        let pw1 = BiasLinear::new(
            store,
            &format!("{name}.pw1"),
            normal(rng, &[width, width], std),
            Some(Tensor::zeros(&[width])),
            true,
            true,
        )?;
        let dw_kernel = store.add(&format!("{name}.dw.k"), normal(rng, &[3, 3, width], 1.0 / 3.0), true, true)?;
        let dw_bias = store.add(&format!("{name}.dw.b"), Tensor::zeros(&[width]), true, false)?;
        let pw2 = BiasLinear::new(
            store,
            &format!("{name}.pw2"),
            normal(rng, &[width, width], std),
            Some(Tensor::zeros(&[width])),
            true,
            true,
        )?;
        Ok(Lsb { pw1, dw_kernel, dw_bias, pw2 })
    }

    /// `pw2(dw(pw1(x_d + y_prev)))` over `batch` grids of `side×side`
    /// tokens; a missing `y_prev` acts as zero.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        label: &str,
        x_d: &Var,
        y_prev: Option<&Var>,
        batch: usize,
        side: usize,
    ) -> Result<Var> {
        let s = match y_prev {
            Some(y) => tape.add(&format!("{label}.in"), x_d, y)?,
            None => x_d.clone(),
        };
        let h = self.pw1.forward(tape, store, &format!("{label}.pw1"), &s)?;
        let k = tape.param(store, self.dw_kernel);
        let b = tape.param(store, self.dw_bias);
        let h = tape.depthwise_conv(&format!("{label}.dw"), &h, &k, &b, batch, side, side)?;
        self.pw2.forward(tape, store, &format!("{label}.pw2"), &h)
    }
}
