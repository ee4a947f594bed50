use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tokens::{ClsPolicy, MergeMode};

/// Where bipartite matching reads its similarity from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchSource {
    /// Token features at the merge point.
    #[default]
    Features,
    /// Key projections of the layer's attention input.
    Keys,
}

/// How the video embedding is read out of the final tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Plain mean of the surviving CLS tokens.
    #[default]
    ClsMean,
    /// Size-weighted mean over every final token.
    SizeWeightedAll,
}

/// Merge-related switches shared by the blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeOptions {
    pub mode: MergeMode,
    pub cls_policy: ClsPolicy,
    pub match_source: MatchSource,
    pub pooling: Pooling,
}

impl Default for MergeOptions {
    fn default() -> Self {
        Self {
            mode: MergeMode::SizeWeighted,
            cls_policy: ClsPolicy::Protect,
            match_source: MatchSource::Features,
            pooling: Pooling::ClsMean,
        }
    }
}

/// Shape and hyperparameters of both encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Patches per side; a frame has `patch_grid^2 + 1` tokens.
    pub patch_grid: usize,
    /// Length of one flattened input patch (`3 * p * p` for RGB patches of side `p`).
    pub patch_dim: usize,
    pub frames: usize,
    pub text_layers: usize,
    pub text_vocab_size: usize,
    pub text_max_len: usize,
    pub embed_dim: usize,
    pub proportional_attention: bool,
    pub temperature: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub ln_eps: f64,
    pub merge: MergeOptions,
}

/// Named configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    B32,
    B16,
    Toy,
    Micro,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::B32, Preset::B16, Preset::Toy, Preset::Micro];

    pub fn name(self) -> &'static str {
        match self {
            Preset::B32 => "b32",
            Preset::B16 => "b16",
            Preset::Toy => "toy",
            Preset::Micro => "micro",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn config(self) -> ModelConfig {
        match self {
            // ViT-B/32 at 224px: 7x7 patches of 32x32x3
            Preset::B32 => ModelConfig {
                num_layers: 12,
                width: 768,
                heads: 12,
                ffn_dim: 3072,
                patch_grid: 7,
                patch_dim: 3 * 32 * 32,
                frames: 12,
                text_layers: 12,
                text_vocab_size: 49_408,
                text_max_len: 32,
                embed_dim: 512,
                ..ModelConfig::base()
            },
            // ViT-B/16 at 224px: 14x14 patches of 16x16x3
            Preset::B16 => ModelConfig {
                num_layers: 12,
                width: 768,
                heads: 12,
                ffn_dim: 3072,
                patch_grid: 14,
                patch_dim: 3 * 16 * 16,
                frames: 12,
                text_layers: 12,
                text_vocab_size: 49_408,
                text_max_len: 32,
                embed_dim: 512,
                ..ModelConfig::base()
            },
            Preset::Toy => ModelConfig {
                num_layers: 12,
                width: 64,
                heads: 4,
                ffn_dim: 256,
                patch_grid: 4,
                patch_dim: 48,
                frames: 12,
                text_layers: 4,
                text_vocab_size: 256,
                text_max_len: 16,
                embed_dim: 32,
                ..ModelConfig::base()
            },
            Preset::Micro => ModelConfig {
                num_layers: 2,
                width: 16,
                heads: 2,
                ffn_dim: 64,
                patch_grid: 2,
                patch_dim: 12,
                frames: 4,
                text_layers: 2,
                text_vocab_size: 64,
                text_max_len: 8,
                embed_dim: 16,
                lora_rank: 4,
                ..ModelConfig::base()
            },
        }
    }

    /// Default schedule text for the preset.
    pub fn default_schedule(self) -> &'static str {
        match self {
            Preset::B32 => "12@9:6@10:3@11:1 r=2 Rc=0.7 Ri=0.9",
            Preset::B16 => "12@9:6@10:3@11:1 r=10 Rc=0.6 Ri=0.8",
            // 12 protected CLS tokens in 17-token frames rule out Rc=0.7 at layer 11
            Preset::Toy => "12@9:6@10:3@11:1 r=1 Rc=0.8 Ri=0.9",
            Preset::Micro => "4@2:1 r=1 Rc=0.7 Ri=0.9",
        }
    }

    /// Values used for `r`, `Rc` and `Ri` when a schedule omits them.
    pub fn schedule_defaults(self) -> crate::schedule::ScheduleDefaults {
        use crate::schedule::ScheduleDefaults;
        match self {
            Preset::B32 => ScheduleDefaults { img_r: 2, keep_cross: 0.7, keep_intra: 0.9 },
            Preset::B16 => ScheduleDefaults { img_r: 10, keep_cross: 0.6, keep_intra: 0.8 },
            Preset::Toy => ScheduleDefaults { img_r: 1, keep_cross: 0.8, keep_intra: 0.9 },
            Preset::Micro => ScheduleDefaults { img_r: 1, keep_cross: 0.7, keep_intra: 0.9 },
        }
    }
}

impl ModelConfig {
    fn base() -> Self {
        Self {
            num_layers: 12,
            width: 64,
            heads: 4,
            ffn_dim: 256,
            patch_grid: 4,
            patch_dim: 48,
            frames: 12,
            text_layers: 4,
            text_vocab_size: 256,
            text_max_len: 16,
            embed_dim: 32,
            proportional_attention: true,
            temperature: 0.05,
            lora_rank: 8,
            lora_alpha: 1.0,
            ln_eps: 1e-5,
            merge: MergeOptions::default(),
        }
    }

    /// Tokens per frame including the CLS token.
    pub fn tokens_per_frame(&self) -> usize {
        self.patch_grid * self.patch_grid + 1
    }

    pub fn patches_per_frame(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Same token geometry (layers, grid, frames) at a smaller width.
    ///
    /// Token counts depend only on the geometry, so a narrowed model runs
    /// the exact merge trajectory of the full-size one at a fraction of
    /// the cost.
    pub fn narrowed(&self, width: usize, heads: usize) -> Self {
        Self {
            width,
            heads,
            ffn_dim: 4 * width,
            patch_dim: self.patch_dim.min(width),
            text_vocab_size: self.text_vocab_size.min(256),
            text_layers: self.text_layers.min(2),
            embed_dim: width,
            lora_rank: self.lora_rank.min(width / 2).max(1),
            ..self.clone()
        }
    }

    pub fn with_frames(&self, frames: usize) -> Self {
        Self { frames, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| contract("ModelConfig::validate", msg);
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return fail(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.tokens_per_frame() < 2 {
            return fail("need at least one patch per frame".into());
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return fail(format!("temperature {} must be positive", self.temperature));
        }
        if self.num_layers == 0 || self.frames == 0 || self.patch_dim == 0 || self.embed_dim == 0 {
            return fail("layers, frames, patch_dim and embed_dim must be positive".into());
        }
        if self.text_vocab_size < 4 || self.text_max_len == 0 {
            return fail("text vocabulary needs at least 4 ids and max length >= 1".into());
        }
        if self.lora_rank == 0 {
            return fail("LoRA rank must be positive".into());
        }
        Ok(())
    }
}
