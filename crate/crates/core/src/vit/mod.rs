//! Vision Transformer for field-to-field forecasting.
//!
//! Two ways to turn a `C×H×W` field into tokens:
//! * `multi_ch`: one token per (channel, spatial patch), channel-major, so the
//!   sequence grows with the channel count;
//! * `agg_ch`: per-channel patch tokens fused into one token per spatial patch
//!   by cross-attention against a learnable query.
//!
//! The encoder is a stack of pre-norm blocks followed by a final norm and a
//! linear head that maps every token back to its patch pixels.

mod embed;
mod model;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use embed::{
    embed_backward, embed_forward, patch_embed_agg, patch_embed_multi, patchify, unpatchify, EmbedCache,
};
pub(crate) use model::target_tokens;
pub use model::{
    block_backward, block_forward, head_backward, head_forward, local_forward_backward, vit_forward,
    vit_loss, AttnState, BlockCache, Comm, HeadCache, LocalComm, AttnCache, MlpCache, SublayerGrads,
    attention_sublayer_backward, attention_sublayer_forward, mlp_backward, mlp_forward,
};
pub(crate) use params::check_tp;
pub use params::{AggParams, BlockParams, EmbedParams, HeadParams, ViTParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    MultiCh,
    #[default]
    AggCh,
}

impl EmbedMode {
    pub fn name(self) -> &'static str {
        match self {
            EmbedMode::MultiCh => "multi_ch",
            EmbedMode::AggCh => "agg_ch",
        }
    }
}

impl std::str::FromStr for EmbedMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "multi" | "multi_ch" => Ok(EmbedMode::MultiCh),
            "agg" | "agg_ch" => Ok(EmbedMode::AggCh),
            other => Err(format!("unknown embed mode `{other}` (expected multi or agg)")),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub patch: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub channels: usize,
    #[serde(default)]
    pub embed: EmbedMode,
    #[serde(default = "default_lead_time")]
    pub lead_time: usize,
}

fn default_mlp_ratio() -> usize {
    3
}

fn default_lead_time() -> usize {
    1
}

impl ViTConfig {
    /// The small model used throughout the test suites: 64 tokens of width 32.
    pub fn tiny() -> Self {
        Self {
            dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 3,
            patch: 4,
            img_h: 32,
            img_w: 32,
            channels: 2,
            embed: EmbedMode::AggCh,
            lead_time: 1,
        }
    }

    /// Encoder shapes from the model table (image settings are placeholders).
    pub fn table1() -> [(&'static str, Self, f64); 4] {
        let row = |dim, depth, heads| Self {
            dim,
            depth,
            heads,
            mlp_ratio: 3,
            patch: 4,
            img_h: 128,
            img_w: 256,
            channels: 92,
            embed: EmbedMode::AggCh,
            lead_time: 1,
        };
        [
            ("ViT-Base", row(1024, 8, 16), 84.0e6),
            ("ViT-Large", row(2048, 16, 32), 671.0e6),
            ("ViT-5B", row(4096, 32, 32), 5_370.0e6),
            ("ViT-10B", row(4608, 48, 64), 10_194.0e6),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dim", self.dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("patch", self.patch),
            ("img_h", self.img_h),
            ("img_w", self.img_w),
            ("channels", self.channels),
        ] {
            if v == 0 {
                return Err(Error::config("positive-extents", format!("{name} must be positive")));
            }
        }
        if !self.img_h.is_multiple_of(self.patch) || !self.img_w.is_multiple_of(self.patch) {
            return Err(Error::Divisibility(format!(
                "patch {} does not tile a {}x{} image",
                self.patch, self.img_h, self.img_w
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Divisibility(format!(
                "width {} is not a multiple of {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    /// Spatial patches per channel.
    pub fn patches(&self) -> usize {
        (self.img_h / self.patch) * (self.img_w / self.patch)
    }

    /// Values each token predicts.
    pub fn token_out(&self) -> usize {
        let p2 = self.patch * self.patch;
        match self.embed {
            EmbedMode::MultiCh => p2,
            EmbedMode::AggCh => p2 * self.channels,
        }
    }

    /// Tokens per sample; panics on an invalid config, see [`seq_len`].
    pub fn tokens(&self) -> usize {
        seq_len(self).expect("validated config")
    }
}

/// Token count for a config.
pub fn seq_len(cfg: &ViTConfig) -> Result<usize> {
    cfg.validate()?;
    seq_len_for(cfg.img_h, cfg.img_w, cfg.patch, cfg.channels, cfg.embed)
}

/// Token count from image geometry alone.
pub fn seq_len_for(img_h: usize, img_w: usize, patch: usize, channels: usize, mode: EmbedMode) -> Result<usize> {
    if patch == 0 || img_h == 0 || img_w == 0 || channels == 0 {
        return Err(Error::config("positive-extents", "image, patch and channels must be positive"));
    }
    if !img_h.is_multiple_of(patch) || !img_w.is_multiple_of(patch) {
        return Err(Error::Divisibility(format!(
            "patch {patch} does not tile a {img_h}x{img_w} image"
        )));
    }
    let spatial = (img_h / patch) * (img_w / patch);
    Ok(match mode {
        EmbedMode::MultiCh => spatial * channels,
        EmbedMode::AggCh => spatial,
    })
}

/// Parameter totals split by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    /// Weight matrices of the encoder blocks: `(4 + 2r)·d²·L`.
    pub encoder: u64,
    /// Biases and layer-norm affines inside the blocks and the final norm.
    pub encoder_aux: u64,
    pub embedding: u64,
    pub head: u64,
}

impl ParamCount {
    pub fn total(&self) -> u64 {
        self.encoder + self.encoder_aux + self.embedding + self.head
    }
}

pub fn param_count(cfg: &ViTConfig) -> ParamCount {
    let d = cfg.dim as u64;
    let l = cfg.depth as u64;
    let r = cfg.mlp_ratio as u64;
    let p2 = (cfg.patch * cfg.patch) as u64;
    let c = cfg.channels as u64;
    let np = ((cfg.img_h / cfg.patch.max(1)) * (cfg.img_w / cfg.patch.max(1))) as u64;
    let per_block_aux = 3 * d + d + r * d + d + 4 * d;
    let mut embedding = p2 * d + d + c * d + np * d;
    if cfg.embed == EmbedMode::AggCh {
        embedding += d + 2 * d * d;
    }
    let out = cfg.token_out() as u64;
    ParamCount {
        encoder: (4 + 2 * r) * d * d * l,
        encoder_aux: per_block_aux * l + 2 * d,
        embedding,
        head: d * out + out,
    }
}
