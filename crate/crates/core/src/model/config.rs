use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mrope::RotaryConfig;
use crate::sequence::LayoutConfig;
use crate::tokenizer::VOCAB_SIZE;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    /// Hidden width of the gated MLP is `mlp_ratio * d_model`.
    pub mlp_ratio: usize,
    pub vocab: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// Longest sequence a forward pass accepts.
    pub max_pack: usize,
    pub norm_eps: f64,
    pub layout: LayoutConfig,
    pub rope: RotaryConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Tiny,
    Small,
    Base,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "small" => Ok(Preset::Small),
            "base" => Ok(Preset::Base),
            other => Err(Error::config(format!("unknown preset `{other}`"))),
        }
    }
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        let (d_model, n_layers, n_heads) = match p {
            Preset::Tiny => (128, 4, 4),
            Preset::Small => (256, 8, 8),
            Preset::Base => (384, 8, 12),
        };
        let d_head = d_model / n_heads;
        Self {
            d_model,
            n_layers,
            n_heads,
            d_head,
            mlp_ratio: 3,
            vocab: VOCAB_SIZE,
            patch_size: 4,
            channels: 3,
            max_pack: 1024,
            norm_eps: 1e-5,
            layout: LayoutConfig::default(),
            rope: RotaryConfig::new(d_head),
        }
    }

    pub fn tiny() -> Self {
        Self::preset(Preset::Tiny)
    }

    pub fn small() -> Self {
        Self::preset(Preset::Small)
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.d_model
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("mlp_ratio", self.mlp_ratio),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("max_pack", self.max_pack),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::config(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.vocab < VOCAB_SIZE {
            return Err(Error::config(format!(
                "vocab {} is smaller than the byte+special vocabulary {VOCAB_SIZE}",
                self.vocab
            )));
        }
        if self.rope.head_dim != self.d_head {
            return Err(Error::config(format!(
                "rotary head_dim {} != d_head {}",
                self.rope.head_dim, self.d_head
            )));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::config("norm_eps must be positive"));
        }
        self.rope.validate()
    }

    /// Closed-form count of trainable scalars.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d + 4 * d * d + 3 * d * self.mlp_hidden();
        self.vocab * d + self.patch_dim() * d + d + self.n_layers * per_layer + d + d * self.vocab
    }
}
