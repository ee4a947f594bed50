use rayon::prelude::*;

use super::block::{unit_backward, unit_forward, BlockSettings, IntraRule, UnitCache, UnitPlans};
use super::weights::{ClipPositionalEmbeddings, EncoderWeights, LoraParams, Trainable};
use super::Pooling;
use crate::error::{contract, Result};
use crate::numerics::{layer_norm_backward, layer_norm_with_stats, matmul, matmul_a_bt, LayerNormStats, Mat, Scalar};
use crate::schedule::{predict_token_counts, LayerCount, LayerOp, MergeSchedule, Stage};
use crate::tokens::TokenSet;

/// Raw patches of one video: one `(tokens_per_frame - 1) x patch_dim`
/// matrix per frame, rows in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoInput<T = f32> {
    pub frames: Vec<Mat<T>>,
}

impl<T: Scalar> VideoInput<T> {
    pub fn cast<U: Scalar>(&self) -> VideoInput<U> {
        VideoInput { frames: self.frames.iter().map(|f| f.cast()).collect() }
    }
}

/// Execution switches that never change the result.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Run the units of each layer on the rayon pool.
    pub parallel: bool,
    /// Reuse merge plans from an earlier pass instead of matching.
    pub replay: Option<&'a [Vec<UnitPlans>]>,
}

#[derive(Clone, Debug)]
pub struct VideoOutput<T = f32> {
    pub embedding: Vec<T>,
    /// Observed token counts, in the predictor's layout.
    pub trace: Vec<LayerCount>,
    /// CLS tokens alive after each layer.
    pub cls_tokens: Vec<usize>,
    /// Merge plans per layer and unit, replayable.
    pub plans: Vec<Vec<UnitPlans>>,
    pub final_tokens: Vec<TokenSet<T>>,
}

/// Activations kept for [`video_backward`].
pub(crate) struct VideoCache<T> {
    layers: Vec<LayerCache<T>>,
    final_ln: Vec<LayerNormStats<T>>,
    /// Pooling weight of every final token, per unit.
    pool_weights: Vec<Vec<f64>>,
}

struct LayerCache<T> {
    units: Vec<UnitCache<T>>,
    group: usize,
    cpe_step: Option<usize>,
}

/// Adds the CLS embedding and positional embeddings to projected patches.
pub fn embed_frames<T: Scalar>(w: &EncoderWeights<T>, video: &VideoInput<T>) -> Result<Vec<TokenSet<T>>> {
    let cfg = &w.config;
    if video.frames.len() != cfg.frames {
        return contract("encode_video", format!("{} frames, config expects {}", video.frames.len(), cfg.frames));
    }
    let cls = Mat::from_vec(1, cfg.width, w.cls_embed.clone())?;
    video
        .frames
        .iter()
        .enumerate()
        .map(|(f, patches)| {
            if patches.shape() != (cfg.patches_per_frame(), cfg.patch_dim) {
                return contract(
                    "encode_video",
                    format!(
                        "frame {f} is {:?}, expected ({}, {})",
                        patches.shape(),
                        cfg.patches_per_frame(),
                        cfg.patch_dim
                    ),
                );
            }
            let mut x = Mat::vstack(&[&cls, &matmul(patches, &w.patch_proj)?])?;
            x.add_assign(&w.pos_embed)?;
            Ok(TokenSet::from_frame(x, f as u32))
        })
        .collect()
}

/// Encodes a video under `sched`.
///
/// The schedule is checked against the token-count predictor first, so
/// an infeasible schedule fails before any compute.
pub fn encode_video<T: Scalar>(
    w: &EncoderWeights<T>,
    lora: Option<&LoraParams<T>>,
    cpe: Option<&ClipPositionalEmbeddings<T>>,
    sched: &MergeSchedule,
    video: &VideoInput<T>,
    opts: &ForwardOptions<'_>,
) -> Result<VideoOutput<T>> {
    forward(w, lora, cpe, sched, video, opts, false).map(|(o, _)| o)
}

#[allow(clippy::type_complexity)]
pub(crate) fn forward<T: Scalar>(
    w: &EncoderWeights<T>,
    lora: Option<&LoraParams<T>>,
    cpe: Option<&ClipPositionalEmbeddings<T>>,
    sched: &MergeSchedule,
    video: &VideoInput<T>,
    opts: &ForwardOptions<'_>,
    keep_cache: bool,
) -> Result<(VideoOutput<T>, Option<VideoCache<T>>)> {
    let cfg = &w.config;
    predict_token_counts(cfg, sched)?;
    let ops = sched.layer_ops(cfg.num_layers)?;
    if let Some(c) = cpe {
        c.validate_for(sched, cfg.width)?;
    }
    if let Some(replay) = opts.replay {
        if replay.len() != ops.len() {
            return contract("replay", format!("{} recorded layers for {} layers", replay.len(), ops.len()));
        }
    }
    let mut settings = BlockSettings::vision(cfg);
    if let Some(l) = lora {
        settings.lora_alpha = l.alpha;
        if l.vision.len() != cfg.num_layers {
            return contract("encode_video", "adapter layer count does not match the backbone");
        }
    }

    let mut units = embed_frames(w, video)?;
    let mut trace = Vec::with_capacity(ops.len());
    let mut cls_tokens = Vec::with_capacity(ops.len());
    let mut plans = Vec::with_capacity(ops.len());
    let mut caches = Vec::new();
    let mut step = 0;
    for (li, op) in ops.iter().enumerate() {
        let (group, cpe_step, cross_keep, intra, stage) = match *op {
            LayerOp::Image { merge } => (1, None, None, IntraRule::Count(merge), Stage::Image),
            LayerOp::Clip { group, cross, intra } => {
                let s = (group > 1).then(|| {
                    step += 1;
                    step - 1
                });
                let rule = if intra { IntraRule::Keep(sched.keep_intra) } else { IntraRule::None };
                (group, s, cross.then_some(sched.keep_cross), rule, Stage::Clip)
            }
        };
        let table = cpe_step.and_then(|s| cpe.map(|c| &c.steps[s]));
        let tokens_in = units[0].len() * group;
        let mut jobs: Vec<Vec<TokenSet<T>>> = Vec::with_capacity(units.len() / group);
        let mut it = units.into_iter();
        loop {
            let chunk: Vec<_> = it.by_ref().take(group).collect();
            if chunk.is_empty() {
                break;
            }
            jobs.push(chunk);
        }
        let lw = &w.vision.layers[li];
        let ll = lora.map(|l| &l.vision[li]);
        let layer_replay = opts.replay.map(|r| &r[li]);
        if let Some(r) = layer_replay {
            if r.len() != jobs.len() {
                return contract("replay", format!("layer {}: {} recorded units for {}", li + 1, r.len(), jobs.len()));
            }
        }
        let run = |(u, members): (usize, Vec<TokenSet<T>>)| {
            let replay = layer_replay.map(|r| &r[u]);
            let mut out = unit_forward(members, table, cross_keep, intra, lw, ll, &settings, replay, keep_cache)?;
            if group > 1 {
                out.tokens.relabel_clip(u as u32);
            }
            Ok(out)
        };
        let outs: Vec<_> = if opts.parallel {
            jobs.into_par_iter().enumerate().map(run).collect::<Result<_>>()?
        } else {
            jobs.into_iter().enumerate().map(run).collect::<Result<_>>()?
        };

        let first = &outs[0];
        trace.push(LayerCount {
            layer: li + 1,
            stage,
            clip_count: outs.len(),
            tokens_in,
            tokens_after_cross: first.attn_tokens,
            tokens_after_intra: first.tokens.len(),
            attention_capacity: outs.iter().map(|o| o.attn_tokens).max().unwrap_or(0),
            total_tokens: outs.iter().map(|o| o.tokens.len()).sum(),
        });
        cls_tokens.push(outs.iter().map(|o| o.tokens.cls_count()).sum());
        let mut layer_plans = Vec::with_capacity(outs.len());
        let mut layer_caches = Vec::with_capacity(outs.len());
        units = Vec::with_capacity(outs.len());
        for o in outs {
            layer_plans.push(o.plans);
            if let Some(c) = o.cache {
                layer_caches.push(c);
            }
            units.push(o.tokens);
        }
        plans.push(layer_plans);
        if keep_cache {
            caches.push(LayerCache { units: layer_caches, group, cpe_step });
        }
    }

    // Pooling after the final norm.
    let tower = &w.vision;
    let mut pool_weights = Vec::with_capacity(units.len());
    let mut final_ln = Vec::with_capacity(units.len());
    let mut pooled = vec![0.0f64; cfg.width];
    let denom: f64 = match cfg.merge.pooling {
        Pooling::ClsMean => units.iter().map(|u| u.cls_count() as f64).sum(),
        Pooling::SizeWeightedAll => units.iter().map(|u| u.total_size() as f64).sum(),
    };
    if denom <= 0.0 {
        return contract("encode_video", "no tokens to pool");
    }
    for u in &units {
        let (y, stats) = layer_norm_with_stats(u.features(), &tower.ln_post_gamma, &tower.ln_post_beta, cfg.ln_eps)?;
        let weights: Vec<f64> = match cfg.merge.pooling {
            Pooling::ClsMean => u.is_cls().iter().map(|&c| if c { 1.0 / denom } else { 0.0 }).collect(),
            Pooling::SizeWeightedAll => u.sizes().iter().map(|&s| s as f64 / denom).collect(),
        };
        for (i, &wt) in weights.iter().enumerate() {
            if wt != 0.0 {
                for (p, &v) in pooled.iter_mut().zip(y.row(i)) {
                    *p += wt * v.as_f64();
                }
            }
        }
        pool_weights.push(weights);
        final_ln.push(stats);
    }
    let pooled = Mat::from_vec(1, cfg.width, pooled.into_iter().map(T::from_f64).collect())?;
    let embedding = matmul(&pooled, &tower.proj)?.into_data();

    let output = VideoOutput { embedding, trace, cls_tokens, plans, final_tokens: units };
    let cache = keep_cache.then_some(VideoCache { layers: caches, final_ln, pool_weights });
    Ok((output, cache))
}

/// Accumulates into `grads` the gradient of a scalar whose derivative
/// with respect to the video embedding is `d_emb`.
pub(crate) fn video_backward<T: Scalar>(
    w: &EncoderWeights<T>,
    params: &Trainable<T>,
    cache: &VideoCache<T>,
    d_emb: &[T],
    grads: &mut Trainable<T>,
) -> Result<()> {
    let cfg = &w.config;
    let tower = &w.vision;
    let mut settings = BlockSettings::vision(cfg);
    settings.lora_alpha = params.lora.alpha;
    let d_emb = Mat::from_vec(1, cfg.embed_dim, d_emb.to_vec())?;
    let d_pooled = matmul_a_bt(&d_emb, &tower.proj)?;

    let mut d_units: Vec<Mat<T>> = Vec::with_capacity(cache.final_ln.len());
    for (stats, weights) in cache.final_ln.iter().zip(&cache.pool_weights) {
        let mut dy = Mat::zeros(weights.len(), cfg.width);
        for (i, &wt) in weights.iter().enumerate() {
            if wt != 0.0 {
                let wt = T::from_f64(wt);
                for (o, &g) in dy.row_mut(i).iter_mut().zip(d_pooled.row(0)) {
                    *o = wt * g;
                }
            }
        }
        d_units.push(layer_norm_backward(&dy, &tower.ln_post_gamma, stats));
    }

    for (li, layer) in cache.layers.iter().enumerate().rev() {
        let lw = &tower.layers[li];
        let ll = &params.lora.vision[li];
        let mut next = Vec::with_capacity(d_units.len() * layer.group);
        for (u, (d, uc)) in d_units.iter().zip(&layer.units).enumerate() {
            let _ = u;
            let lg = &mut grads.lora.vision[li];
            let cg = layer.cpe_step.map(|s| &mut grads.cpe.steps[s]);
            next.extend(unit_backward(d, uc, lw, Some(ll), &settings, Some(lg), cg)?);
        }
        d_units = next;
    }
    Ok(())
}
