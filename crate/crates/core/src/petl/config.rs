use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a pretrained backbone is adapted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Every parameter trains.
    Full,
    /// Only the classification head trains.
    Linear,
    /// Biases of the frozen linear layers plus the head.
    Bias,
    /// Low-rank update of the query projection in every block.
    Lora,
    /// Two bottleneck adapters per block.
    Adapter,
    /// Learnable prompt tokens prepended in every block.
    Vpt,
    /// Bias tuning, low-rank prompts and a lite side branch.
    S2a,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Full,
        Method::Linear,
        Method::Bias,
        Method::Lora,
        Method::Adapter,
        Method::Vpt,
        Method::S2a,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::Linear => "linear",
            Method::Bias => "bias",
            Method::Lora => "lora",
            Method::Adapter => "adapter",
            Method::Vpt => "vpt",
            Method::S2a => "s2a",
        }
    }

    /// Backbone biases train under this method.
    pub fn tunes_biases(self) -> bool {
        matches!(self, Method::Full | Method::Bias | Method::S2a)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Geometry of a plain ViT without normalization layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub classes: usize,
    /// Channel compression of the side branch.
    pub lsb_factor: usize,
    /// Rank of the low-rank prompt.
    pub lrp_rank: usize,
    pub vpt_tokens: usize,
    pub lora_rank: usize,
    pub adapter_dim: usize,
}

impl ViTConfig {
    /// ViT-B/16 at 224×224 with a 100-way head.
    pub fn vit_b_16() -> Self {
        ViTConfig {
            image_size: 224,
            channels: 3,
            patch: 16,
            d_model: 768,
            depth: 12,
            heads: 12,
            mlp_dim: 3072,
            classes: 100,
            lsb_factor: 8,
            lrp_rank: 30,
            vpt_tokens: 50,
            lora_rank: 96,
            adapter_dim: 96,
        }
    }

    /// Small grayscale model used for training runs and tape cross-checks.
    pub fn toy() -> Self {
        ViTConfig {
            image_size: 16,
            channels: 1,
            patch: 4,
            d_model: 128,
            depth: 2,
            heads: 4,
            mlp_dim: 512,
            classes: 4,
            lsb_factor: 8,
            lrp_rank: 4,
            vpt_tokens: 8,
            lora_rank: 16,
            adapter_dim: 16,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "vit_b_16" => Ok(Self::vit_b_16()),
            "toy_vit" => Ok(Self::toy()),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patch tokens plus the class token.
    pub fn tokens(&self) -> usize {
        self.patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn side_dim(&self) -> usize {
        self.d_model / self.lsb_factor
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if [self.image_size, self.channels, self.patch, self.d_model, self.depth, self.heads, self.mlp_dim, self.classes]
            .contains(&0)
        {
            return fail("all dimensions must be positive".into());
        }
        if self.image_size % self.patch != 0 {
            return fail(format!("image size {} is not a multiple of patch {}", self.image_size, self.patch));
        }
        if self.d_model % self.heads != 0 {
            return fail(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.lsb_factor == 0 || self.d_model % self.lsb_factor != 0 {
            return fail(format!("d_model {} is not divisible by lsb_factor {}", self.d_model, self.lsb_factor));
        }
        if self.lrp_rank == 0 || self.lrp_rank >= self.tokens() || self.lrp_rank >= self.d_model {
            return fail(format!(
                "lrp_rank {} must be positive and below both {} tokens and {} channels",
                self.lrp_rank,
                self.tokens(),
                self.d_model
            ));
        }
        if self.lora_rank == 0 || self.adapter_dim == 0 {
            return fail("lora_rank and adapter_dim must be positive".into());
        }
        Ok(())
    }
}
