use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoder::ModelConfig;
use crate::error::Result;
use crate::schedule::{parse_schedule_with, predict_token_counts, MergeSchedule, ScheduleDefaults, TokenCountReport};

/// Multiply-accumulate counts of one layer, summed over its frames or
/// clips.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub layer: usize,
    pub units: usize,
    pub attn_tokens: usize,
    pub ffn_tokens: usize,
    /// Q, K, V and output projections: `4 n D^2`.
    pub attn_proj: u64,
    /// Scores and aggregation: `2 n^2 D`.
    pub attn_scores: u64,
    /// Two FFN matrices: `2 n D ffn_dim`.
    pub ffn: u64,
}

impl LayerFlops {
    pub fn total(&self) -> u64 {
        self.attn_proj + self.attn_scores + self.ffn
    }
}

/// Video-backbone cost. One MAC counts as one FLOP; norms, softmax,
/// biases, activations and merge similarity are excluded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub schedule: String,
    pub layers: Vec<LayerFlops>,
    pub patch_embed: u64,
    pub total_macs: u64,
    pub gflops: f64,
    pub baseline_gflops: f64,
    pub fraction: f64,
    pub tokens: TokenCountReport,
}

fn layer_costs(cfg: &ModelConfig, report: &TokenCountReport) -> (Vec<LayerFlops>, u64) {
    let d = cfg.width as u64;
    let ffn_dim = cfg.ffn_dim as u64;
    let layers: Vec<LayerFlops> = report
        .layers
        .iter()
        .map(|l| {
            let units = l.clip_count as u64;
            let na = l.tokens_after_cross as u64;
            let nf = l.tokens_after_intra as u64;
            LayerFlops {
                layer: l.layer,
                units: l.clip_count,
                attn_tokens: l.tokens_after_cross,
                ffn_tokens: l.tokens_after_intra,
                attn_proj: units * 4 * na * d * d,
                attn_scores: units * 2 * na * na * d,
                ffn: units * 2 * nf * d * ffn_dim,
            }
        })
        .collect();
    let patch = (cfg.frames * cfg.patches_per_frame() * cfg.patch_dim) as u64 * d;
    (layers, patch)
}

fn total_macs(cfg: &ModelConfig, report: &TokenCountReport) -> u64 {
    let (layers, patch) = layer_costs(cfg, report);
    patch + layers.iter().map(LayerFlops::total).sum::<u64>()
}

/// GFLOPs of `sched` and of the no-merge baseline on the same frames.
///
/// A pure function of the shapes: weights and inputs play no part.
pub fn estimate_flops(cfg: &ModelConfig, sched: &MergeSchedule) -> Result<FlopsReport> {
    let tokens = predict_token_counts(cfg, sched)?;
    let (layers, patch_embed) = layer_costs(cfg, &tokens);
    let total = patch_embed + layers.iter().map(LayerFlops::total).sum::<u64>();
    let base = predict_token_counts(cfg, &MergeSchedule::identity(sched.frames))?;
    let base_total = total_macs(cfg, &base);
    Ok(FlopsReport {
        schedule: sched.to_string(),
        layers,
        patch_embed,
        total_macs: total,
        gflops: total as f64 / 1e9,
        baseline_gflops: base_total as f64 / 1e9,
        fraction: total as f64 / base_total as f64,
        tokens,
    })
}

impl FlopsReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "schedule: {}", self.schedule);
        let _ = writeln!(
            out,
            "{:>5}  {:>5}  {:>6}  {:>6}  {:>12}  {:>12}  {:>12}  {:>12}",
            "layer", "units", "n_attn", "n_ffn", "attn_proj", "attn_scores", "ffn", "total"
        );
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{:>5}  {:>5}  {:>6}  {:>6}  {:>12}  {:>12}  {:>12}  {:>12}",
                l.layer,
                l.units,
                l.attn_tokens,
                l.ffn_tokens,
                l.attn_proj,
                l.attn_scores,
                l.ffn,
                l.total()
            );
        }
        let _ = writeln!(out, "patch embedding: {}", self.patch_embed);
        let _ = writeln!(out, "GFLOPs: {:.1} ({:.0}%)", self.gflops, 100.0 * self.fraction);
        let _ = writeln!(out, "# Tokens: {}", self.tokens.final_summary());
        let _ = writeln!(out, "note: 1 MAC = 1 FLOP; norms, softmax, biases, GELU and matching excluded");
        out
    }
}

/// A named schedule variant for the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub group: String,
    pub schedule: String,
    pub gflops: f64,
    pub fraction: f64,
    pub final_tokens: String,
    pub max_attention_capacity: usize,
}

/// Progressive (A0), holistic (A1), partial (A2) and early-start (A3)
/// fusion variants on 12 frames.
pub const ABLATION_SCHEDULES: [(&str, &str); 8] = [
    ("A0", "12@9:6@10:3@11:1"),
    ("A1", "12@9:4@10:1"),
    ("A1", "12@9:1"),
    ("A2", "12@9:6@10:3"),
    ("A2", "12@9:4"),
    ("A3", "12@7:6@9:3@11:1"),
    ("A3", "12@4:6@7:3@10:1"),
    ("A3", "12@1:6@5:3@9:1"),
];

/// Evaluates every ablation schedule with the given merge ratios.
pub fn ablation_table(cfg: &ModelConfig, defaults: ScheduleDefaults) -> Result<Vec<AblationRow>> {
    ABLATION_SCHEDULES
        .iter()
        .map(|(group, text)| {
            let sched = parse_schedule_with(text, defaults)?;
            let rep = estimate_flops(cfg, &sched)?;
            Ok(AblationRow {
                group: group.to_string(),
                schedule: text.to_string(),
                gflops: rep.gflops,
                fraction: rep.fraction,
                final_tokens: rep.tokens.final_summary(),
                max_attention_capacity: rep.tokens.max_attention_capacity(),
            })
        })
        .collect()
}

pub fn ablation_to_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<5}  {:<20}  {:>7}  {:>6}  {:>14}  {:>9}",
        "group", "schedule", "GFLOPs", "frac", "# Tokens", "attn cap"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<5}  {:<20}  {:>7.1}  {:>5.0}%  {:>14}  {:>9}",
            r.group,
            r.schedule,
            r.gflops,
            100.0 * r.fraction,
            r.final_tokens,
            r.max_attention_capacity
        );
    }
    out
}
