//! Progressive temporal token merging for text-video retrieval.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense matrices and deterministic kernels.
//! * [`tokens`]: token sets, bipartite soft matching and merge application.
//! * [`schedule`]: merge schedules and exact per-layer token-count prediction.
//! * [`encoder`]: a CLIP-style dual encoder with image-level and clip-level
//!   merge blocks, LoRA adapters and clip positional embeddings.
//! * [`accounting`]: MAC-based GFLOPs estimation and throughput benchmarks.
//! * [`retrieval`]: similarity, symmetric contrastive loss, gradients,
//!   recall metrics and a small training loop.
//! * [`synthgen`]: synthetic paired text/video data with tunable redundancy.
//! * [`container`]: the JSON-header tensor file format.
//!
//! ```
//! use tempme::encoder::{encode_video, EncoderWeights, ForwardOptions, Preset};
//! use tempme::schedule::{parse_schedule_with, predict_token_counts};
//! use tempme::synthgen::{generate, SynthSpec};
//!
//! # fn main() -> tempme::Result<()> {
//! let p = Preset::Toy;
//! let cfg = p.config();
//! let sched = parse_schedule_with("12@9:6@10:3@11:1", p.schedule_defaults())?;
//! let predicted = predict_token_counts(&cfg, &sched)?;
//!
//! let w = EncoderWeights::<f32>::init(&cfg, 0)?;
//! let data = generate(&SynthSpec::for_config(&cfg, 1, 0.8, 0))?;
//! let out = encode_video(&w, None, None, &sched, &data.pairs[0].video, &ForwardOptions::default())?;
//! assert_eq!(out.trace, predicted.layers);
//! assert_eq!(predicted.final_token_count, 42);
//! # Ok(())
//! # }
//! ```

pub mod accounting;
pub mod container;
pub mod encoder;
mod error;
pub mod numerics;
pub mod retrieval;
pub mod schedule;
pub mod synthgen;
pub mod tokens;

pub use error::{Error, Result};
