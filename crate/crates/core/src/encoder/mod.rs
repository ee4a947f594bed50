//! A CLIP-style dual encoder with token merging.
//!
//! The video tower runs image-level layers per frame, then clip-level
//! layers that fuse neighbouring clips as the schedule dictates. The text
//! tower is a plain causal transformer. Both carry optional LoRA adapters
//! on the query, key and value projections.

mod block;
mod config;
mod text;
mod video;
mod weights;

pub use block::{attention, clipme_block, imgme_block, BlockSettings, UnitPlans};
pub use config::{MatchSource, MergeOptions, ModelConfig, Pooling, Preset};
pub use text::{encode_text, Tokenizer};
pub use video::{embed_frames, encode_video, ForwardOptions, VideoInput, VideoOutput};
pub use weights::{
    lora_merge, ClipPositionalEmbeddings, EncoderWeights, LayerLora, LayerWeights, LoraAdapter, LoraParams, TensorMut,
    TensorRef, TowerWeights, Trainable,
};

pub(crate) use text::{text_backward, text_forward};
pub(crate) use video::{forward as video_forward, video_backward};
