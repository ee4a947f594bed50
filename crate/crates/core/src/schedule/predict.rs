use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{keep_count, LayerOp, MergeSchedule};
use crate::encoder::ModelConfig;
use crate::error::{contract, Error, Result};
use crate::tokens::ClsPolicy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Image,
    Clip,
}

/// Token counts of one layer. Per-clip counts are identical across the
/// clips of a layer because groups have equal size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCount {
    pub layer: usize,
    pub stage: Stage,
    /// Clips (frames in image layers) processed by this layer.
    pub clip_count: usize,
    /// Tokens per clip arriving at the layer, after any fusion.
    pub tokens_in: usize,
    /// Tokens per clip entering attention.
    pub tokens_after_cross: usize,
    /// Tokens per clip entering the FFN and leaving the layer.
    pub tokens_after_intra: usize,
    /// Largest token count entering any single attention call.
    pub attention_capacity: usize,
    pub total_tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenCountReport {
    pub schedule: String,
    pub frames: usize,
    pub tokens_per_frame: usize,
    pub input_tokens: usize,
    pub layers: Vec<LayerCount>,
    pub final_clips: usize,
    pub final_tokens_per_clip: usize,
    pub final_token_count: usize,
    pub final_fraction: f64,
}

/// Exact per-layer token counts for `sched` on `cfg`.
///
/// Fails when a merge would need more pairs than the alternating partition
/// can supply, or would leave no token besides the protected CLS tokens.
pub fn predict_token_counts(cfg: &ModelConfig, sched: &MergeSchedule) -> Result<TokenCountReport> {
    if cfg.frames != sched.frames {
        return contract(
            "predict_token_counts",
            format!("schedule has {} frames, config has {}", sched.frames, cfg.frames),
        );
    }
    let ops = sched.layer_ops(cfg.num_layers)?;
    let policy = cfg.merge.cls_policy;
    let n = cfg.tokens_per_frame();
    let mut clips = sched.frames;
    // CLS tokens per clip; frames never lose theirs under `Protect`.
    let mut cls = 1usize;
    let mut per_clip = n;
    let mut layers = Vec::with_capacity(ops.len());

    for (i, op) in ops.iter().enumerate() {
        let layer = i + 1;
        let stage;
        let tokens_in;
        let after_cross;
        let after_intra;
        match *op {
            LayerOp::Image { merge } => {
                stage = Stage::Image;
                tokens_in = per_clip;
                after_cross = per_clip;
                check_merge(layer, per_clip, cls, merge, policy)?;
                after_intra = per_clip - merge;
            }
            LayerOp::Clip { group, cross, intra } => {
                stage = Stage::Clip;
                clips /= group;
                cls *= group;
                tokens_in = per_clip * group;
                after_cross = if cross {
                    let kept = keep_count(tokens_in, sched.keep_cross);
                    check_merge(layer, tokens_in, cls, tokens_in - kept, policy)?;
                    kept
                } else {
                    tokens_in
                };
                after_intra = if intra {
                    let kept = keep_count(after_cross, sched.keep_intra);
                    check_merge(layer, after_cross, cls, after_cross - kept, policy)?;
                    kept
                } else {
                    after_cross
                };
            }
        }
        per_clip = after_intra;
        if policy == ClsPolicy::Participate {
            cls = 0;
        }
        layers.push(LayerCount {
            layer,
            stage,
            clip_count: clips,
            tokens_in,
            tokens_after_cross: after_cross,
            tokens_after_intra: after_intra,
            attention_capacity: after_cross,
            total_tokens: clips * after_intra,
        });
    }

    let input_tokens = sched.frames * n;
    let final_token_count = clips * per_clip;
    Ok(TokenCountReport {
        schedule: sched.to_string(),
        frames: sched.frames,
        tokens_per_frame: n,
        input_tokens,
        layers,
        final_clips: clips,
        final_tokens_per_clip: per_clip,
        final_token_count,
        final_fraction: final_token_count as f64 / input_tokens as f64,
    })
}

/// Whether `merges` pairs can be drawn from `tokens` tokens of which up to
/// `cls` are protected.
///
/// CLS tokens may sit on either side of the alternating partition, so the
/// bound assumes the worst case for both sides.
pub(crate) fn check_merge(layer: usize, tokens: usize, cls: usize, merges: usize, policy: ClsPolicy) -> Result<()> {
    if merges == 0 {
        return Ok(());
    }
    let protected = if policy == ClsPolicy::Protect { cls } else { 0 };
    let a_side = tokens.div_ceil(2).saturating_sub(protected);
    let b_side = (tokens / 2).saturating_sub(protected);
    if merges > a_side || b_side == 0 {
        return Err(Error::Infeasible {
            layer,
            msg: format!(
                "cannot merge {merges} of {tokens} tokens ({protected} protected): \
                 at most {} eligible pairs",
                if b_side == 0 { 0 } else { a_side }
            ),
        });
    }
    if tokens - merges <= protected {
        return Err(Error::Infeasible {
            layer,
            msg: format!("{} tokens left for {protected} protected CLS tokens", tokens - merges),
        });
    }
    Ok(())
}

impl TokenCountReport {
    pub fn layer(&self, layer: usize) -> Option<&LayerCount> {
        self.layers.get(layer.checked_sub(1)?)
    }

    pub fn max_attention_capacity(&self) -> usize {
        self.layers.iter().map(|l| l.attention_capacity).max().unwrap_or(self.tokens_per_frame)
    }

    /// `clips x tokens (pct%)`, as in the token column of a results table.
    pub fn final_summary(&self) -> String {
        format!("{} x {} ({:.0}%)", self.final_clips, self.final_tokens_per_clip, 100.0 * self.final_fraction)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "schedule: {}", self.schedule);
        let _ = writeln!(out, "input:    {} x {} ({} tokens)", self.frames, self.tokens_per_frame, self.input_tokens);
        let _ = writeln!(
            out,
            "{:>5}  {:<5}  {:>5}  {:>8}  {:>8}  {:>8}  {:>8}",
            "layer", "stage", "clips", "in/clip", "attn", "out/clip", "total"
        );
        for l in &self.layers {
            let stage = match l.stage {
                Stage::Image => "image",
                Stage::Clip => "clip",
            };
            let _ = writeln!(
                out,
                "{:>5}  {:<5}  {:>5}  {:>8}  {:>8}  {:>8}  {:>8}",
                l.layer, stage, l.clip_count, l.tokens_in, l.attention_capacity, l.tokens_after_intra, l.total_tokens
            );
        }
        let _ = writeln!(out, "# Tokens: {}", self.final_summary());
        out
    }
}
