//! Progressive merge schedules.
//!
//! A schedule says how many tokens each image-level layer removes per
//! frame, at which layers neighbouring clips are fused, and what fraction
//! of tokens the cross-clip and intra-clip merges keep. The text form is
//!
//! ```text
//! 12@9:6@10:3@11:1 r=2 Rc=0.7 Ri=0.9
//! ```
//!
//! meaning 12 frames, fused into 6 clips at layer 9, 3 clips at layer 10
//! and a single clip at layer 11.

mod parse;
mod predict;

pub use parse::parse_schedule_with;
pub use predict::{predict_token_counts, LayerCount, Stage, TokenCountReport};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fuse clips so that `clips` remain after `layer` (1-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipStep {
    pub layer: usize,
    pub clips: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeSchedule {
    pub frames: usize,
    /// Tokens removed per frame by each image-level layer.
    pub img_r: usize,
    /// First clip-level layer (1-based); `None` means image-level layers
    /// throughout.
    pub start_clip: Option<usize>,
    pub steps: Vec<ClipStep>,
    /// Kept fraction for cross-clip merging, in `(0, 1]`.
    pub keep_cross: f64,
    /// Kept fraction for intra-clip merging, in `(0, 1]`.
    pub keep_intra: f64,
    /// Keep applying intra-clip merging after the last fusion step.
    pub tail_intra: bool,
    /// Apply intra-clip merging in clip-level layers between fusion steps.
    pub gap_intra: bool,
}

/// Values substituted for options a schedule string leaves out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleDefaults {
    pub img_r: usize,
    pub keep_cross: f64,
    pub keep_intra: f64,
}

impl ScheduleDefaults {
    /// No merging unless the text asks for it.
    pub const NEUTRAL: Self = Self { img_r: 0, keep_cross: 1.0, keep_intra: 1.0 };
}

/// What one transformer layer does to the token sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerOp {
    /// Per-frame layer removing `merge` tokens between attention and FFN.
    Image { merge: usize },
    /// Clip-level layer. `group` consecutive clips are fused; the
    /// cross-clip merge runs only when `cross` is set (i.e. `group > 1`).
    Clip { group: usize, cross: bool, intra: bool },
}

/// Parses a schedule with neutral defaults (`r=0`, `Rc=1`, `Ri=1`).
pub fn parse_schedule(text: &str) -> Result<MergeSchedule> {
    parse_schedule_with(text, ScheduleDefaults::NEUTRAL)
}

/// `ceil(total * ratio)`, the number of tokens a ratio-based merge keeps.
///
/// A tolerance of `1e-9` absorbs binary rounding of products such as
/// `10 * 0.7` so that exact integers are not bumped up by one.
pub fn keep_count(total: usize, ratio: f64) -> usize {
    let kept = (total as f64 * ratio - 1e-9).ceil();
    (kept.max(0.0) as usize).min(total)
}

impl MergeSchedule {
    /// Plain forward pass: no merging of any kind.
    pub fn identity(frames: usize) -> Self {
        Self {
            frames,
            img_r: 0,
            start_clip: None,
            steps: Vec::new(),
            keep_cross: 1.0,
            keep_intra: 1.0,
            tail_intra: true,
            gap_intra: true,
        }
    }

    /// Clip count after the last fusion step.
    pub fn final_clips(&self) -> usize {
        self.steps.last().map_or(self.frames, |s| s.clips)
    }

    /// Expands the schedule into one operation per layer.
    pub fn layer_ops(&self, num_layers: usize) -> Result<Vec<LayerOp>> {
        if let Some(bad) = self.steps.iter().find(|s| s.layer > num_layers) {
            return Err(Error::Infeasible {
                layer: bad.layer,
                msg: format!("fusion step beyond the last layer ({num_layers})"),
            });
        }
        if let Some(start) = self.start_clip {
            if start > num_layers {
                return Err(Error::Infeasible {
                    layer: start,
                    msg: format!("clip stage starts beyond the last layer ({num_layers})"),
                });
            }
        }
        let last_step = self.steps.last().map(|s| s.layer);
        let mut clips = self.frames;
        let mut ops = Vec::with_capacity(num_layers);
        for layer in 1..=num_layers {
            let op = match self.start_clip {
                Some(start) if layer >= start => {
                    if let Some(step) = self.steps.iter().find(|s| s.layer == layer) {
                        let group = clips / step.clips;
                        clips = step.clips;
                        LayerOp::Clip { group, cross: group > 1, intra: true }
                    } else if last_step.is_some_and(|l| layer < l) {
                        LayerOp::Clip { group: 1, cross: false, intra: self.gap_intra }
                    } else {
                        LayerOp::Clip { group: 1, cross: false, intra: self.tail_intra }
                    }
                }
                _ => LayerOp::Image { merge: self.img_r },
            };
            ops.push(op);
        }
        Ok(ops)
    }

    /// Group sizes of the fusion steps, in order; one clip positional
    /// embedding table is needed per step.
    pub fn step_groups(&self) -> Vec<usize> {
        let mut clips = self.frames;
        self.steps
            .iter()
            .map(|s| {
                let g = clips / s.clips;
                clips = s.clips;
                g
            })
            .collect()
    }

    pub fn is_identity(&self) -> bool {
        self.img_r == 0
            && (self.start_clip.is_none() || (self.steps.is_empty() && (self.keep_intra >= 1.0 || !self.tail_intra)))
    }
}

impl fmt::Display for MergeSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.frames)?;
        for s in &self.steps {
            write!(f, "@{}:{}", s.layer, s.clips)?;
        }
        write!(f, " r={} Rc={} Ri={}", self.img_r, self.keep_cross, self.keep_intra)?;
        if let Some(start) = self.start_clip {
            if self.steps.first().map(|s| s.layer) != Some(start) {
                write!(f, " start={start}")?;
            }
        }
        if !self.tail_intra {
            write!(f, " tail=off")?;
        }
        if !self.gap_intra {
            write!(f, " gap=off")?;
        }
        Ok(())
    }
}
