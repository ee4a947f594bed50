//! Pre-norm transformer layers with optional token merging, plus their
//! backward passes with respect to the input tokens, the LoRA adapters
//! and the clip positional embeddings.
//!
//! Merge plans are chosen in the forward pass and treated as constants by
//! the backward pass: gradients flow through the weighted averaging only.

use serde::{Deserialize, Serialize};

use super::weights::{LayerLora, LayerWeights, LoraAdapter};
use super::{MatchSource, MergeOptions, ModelConfig};
use crate::error::{contract, Result};
use crate::numerics::{
    gelu, gelu_grad, layer_norm_backward, layer_norm_with_stats, matmul, matmul_a_bt, matmul_at_b, softmax_in_place,
    LayerNormStats, Mat, Scalar,
};
use crate::schedule::keep_count;
use crate::tokens::{apply_merge, bipartite_soft_match_by, MergePlan, MergeWeights, TokenSet};

/// Per-call settings shared by every layer of a tower.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockSettings {
    pub heads: usize,
    pub proportional: bool,
    pub causal: bool,
    pub ln_eps: f64,
    /// LoRA scaling; ignored when no adapters are passed.
    pub lora_alpha: f64,
    pub merge: MergeOptions,
}

impl BlockSettings {
    pub fn vision(cfg: &ModelConfig) -> Self {
        Self {
            heads: cfg.heads,
            proportional: cfg.proportional_attention,
            causal: false,
            ln_eps: cfg.ln_eps,
            lora_alpha: cfg.lora_alpha,
            merge: cfg.merge,
        }
    }

    /// Causal, all sizes are 1 so proportional attention is moot.
    pub fn text(cfg: &ModelConfig) -> Self {
        Self { causal: true, proportional: false, ..Self::vision(cfg) }
    }
}

/// Merge plans chosen by one unit (frame or fused clip) in one layer.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitPlans {
    pub cross: MergePlan,
    pub intra: MergePlan,
}

/// Intra-merge rule between attention and FFN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum IntraRule {
    None,
    /// Remove exactly this many tokens (image-level layers).
    Count(usize),
    /// Keep `ceil(n * ratio)` tokens (clip-level layers).
    Keep(f64),
}

#[derive(Clone, Debug)]
pub(crate) struct AttnCache<T> {
    h: Mat<T>,
    ln: LayerNormStats<T>,
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    /// `h · down` for the q, k and v adapters.
    lora_h: [Option<Mat<T>>; 3],
    probs: Vec<Mat<T>>,
}

#[derive(Clone, Debug)]
pub(crate) struct FfnCache<T> {
    ln: LayerNormStats<T>,
    u: Mat<T>,
}

#[derive(Clone, Debug)]
pub(crate) struct UnitCache<T> {
    member_rows: Vec<usize>,
    cross: Option<MergeWeights>,
    attn: AttnCache<T>,
    intra: Option<MergeWeights>,
    ffn: FfnCache<T>,
}

/// Everything a unit forward produces.
pub(crate) struct UnitOutput<T> {
    pub tokens: TokenSet<T>,
    pub plans: UnitPlans,
    /// Tokens entering attention.
    pub attn_tokens: usize,
    pub cache: Option<UnitCache<T>>,
}

fn project<T: Scalar>(
    h: &Mat<T>,
    w: &Mat<T>,
    b: &[T],
    lora: Option<&LoraAdapter<T>>,
    alpha: f64,
) -> Result<(Mat<T>, Option<Mat<T>>)> {
    let mut y = matmul(h, w)?;
    y.add_row_vector(b)?;
    let Some(a) = lora else { return Ok((y, None)) };
    let hd = matmul(h, &a.down)?;
    y.axpy(T::from_f64(alpha), &matmul(&hd, &a.up)?)?;
    Ok((y, Some(hd)))
}

fn attention_forward<T: Scalar>(
    x: &Mat<T>,
    sizes: &[u32],
    lw: &LayerWeights<T>,
    lora: Option<&LayerLora<T>>,
    s: &BlockSettings,
) -> Result<(Mat<T>, AttnCache<T>)> {
    let n = x.rows();
    let width = x.cols();
    if n == 0 {
        return contract("attention", "empty token set");
    }
    if !width.is_multiple_of(s.heads) {
        return contract("attention", format!("width {width} not divisible by {} heads", s.heads));
    }
    let (h, ln) = layer_norm_with_stats(x, &lw.ln1_gamma, &lw.ln1_beta, s.ln_eps)?;
    let (q, hq) = project(&h, &lw.wq, &lw.bq, lora.map(|l| &l.q), s.lora_alpha)?;
    let (k, hk) = project(&h, &lw.wk, &lw.bk, lora.map(|l| &l.k), s.lora_alpha)?;
    let (v, hv) = project(&h, &lw.wv, &lw.bv, lora.map(|l| &l.v), s.lora_alpha)?;

    let d = width / s.heads;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let bias: Vec<T> =
        sizes.iter().map(|&sz| if s.proportional { T::from_f64((sz as f64).ln()) } else { T::zero() }).collect();
    let mut o = Mat::zeros(n, width);
    let mut probs = Vec::with_capacity(s.heads);
    for hd in 0..s.heads {
        let (c0, c1) = (hd * d, (hd + 1) * d);
        let qh = q.slice_cols(c0, c1);
        let kh = k.slice_cols(c0, c1);
        let vh = v.slice_cols(c0, c1);
        let mut p = matmul_a_bt(&qh, &kh)?;
        for i in 0..n {
            let row = p.row_mut(i);
            for (j, l) in row.iter_mut().enumerate() {
                *l = if s.causal && j > i { T::neg_infinity() } else { *l * scale + bias[j] };
            }
            softmax_in_place(row);
        }
        o.set_cols(c0, &matmul(&p, &vh)?);
        probs.push(p);
    }
    let mut out = matmul(&o, &lw.wo)?;
    out.add_row_vector(&lw.bo)?;
    Ok((out, AttnCache { h, ln, q, k, v, lora_h: [hq, hk, hv], probs }))
}

/// Gradient of the attention branch output with respect to its input
/// (excluding the residual path). Adapter gradients are accumulated into
/// `lora_grad`.
fn attention_backward<T: Scalar>(
    d_out: &Mat<T>,
    c: &AttnCache<T>,
    lw: &LayerWeights<T>,
    lora: Option<&LayerLora<T>>,
    s: &BlockSettings,
    lora_grad: Option<&mut LayerLora<T>>,
) -> Result<Mat<T>> {
    let (n, width) = d_out.shape();
    let d = width / s.heads;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let d_o = matmul_a_bt(d_out, &lw.wo)?;
    let mut dq = Mat::zeros(n, width);
    let mut dk = Mat::zeros(n, width);
    let mut dv = Mat::zeros(n, width);
    for hd in 0..s.heads {
        let (c0, c1) = (hd * d, (hd + 1) * d);
        let p = &c.probs[hd];
        let doh = d_o.slice_cols(c0, c1);
        let vh = c.v.slice_cols(c0, c1);
        let qh = c.q.slice_cols(c0, c1);
        let kh = c.k.slice_cols(c0, c1);
        dv.set_cols(c0, &matmul_at_b(p, &doh)?);
        let mut dl = matmul_a_bt(&doh, &vh)?;
        for i in 0..n {
            let pr = p.row(i);
            let dr = dl.row_mut(i);
            let dot = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<T>();
            for (g, &pv) in dr.iter_mut().zip(pr) {
                *g = pv * (*g - dot) * scale;
            }
        }
        dq.set_cols(c0, &matmul(&dl, &kh)?);
        dk.set_cols(c0, &matmul_at_b(&dl, &qh)?);
    }

    let mut dh = matmul_a_bt(&dq, &lw.wq)?;
    dh.add_assign(&matmul_a_bt(&dk, &lw.wk)?)?;
    dh.add_assign(&matmul_a_bt(&dv, &lw.wv)?)?;
    if let Some(l) = lora {
        let alpha = T::from_f64(s.lora_alpha);
        let mut grads = lora_grad;
        for (idx, (a, dy)) in [(&l.q, &dq), (&l.k, &dk), (&l.v, &dv)].into_iter().enumerate() {
            // y += alpha * (h · down) · up
            let dy_up = matmul_a_bt(dy, &a.up)?;
            dh.axpy(alpha, &matmul_a_bt(&dy_up, &a.down)?)?;
            if let Some(g) = grads.as_deref_mut() {
                let ga = &mut g.adapters_mut()[idx];
                let hd = c.lora_h[idx].as_ref().expect("adapter forward cached");
                ga.up.axpy(alpha, &matmul_at_b(hd, dy)?)?;
                ga.down.axpy(alpha, &matmul_at_b(&c.h, &dy_up)?)?;
            }
        }
    }
    Ok(layer_norm_backward(&dh, &lw.ln1_gamma, &c.ln))
}

fn ffn_forward<T: Scalar>(x: &Mat<T>, lw: &LayerWeights<T>, eps: f64) -> Result<(Mat<T>, FfnCache<T>)> {
    let (h, ln) = layer_norm_with_stats(x, &lw.ln2_gamma, &lw.ln2_beta, eps)?;
    let mut u = matmul(&h, &lw.w1)?;
    u.add_row_vector(&lw.b1)?;
    let g = gelu(&u);
    let mut f = matmul(&g, &lw.w2)?;
    f.add_row_vector(&lw.b2)?;
    Ok((f, FfnCache { ln, u }))
}

fn ffn_backward<T: Scalar>(d_f: &Mat<T>, c: &FfnCache<T>, lw: &LayerWeights<T>) -> Result<Mat<T>> {
    let dg = matmul_a_bt(d_f, &lw.w2)?;
    let gg = gelu_grad(&c.u);
    let du = Mat::from_vec(dg.rows(), dg.cols(), dg.data().iter().zip(gg.data()).map(|(&a, &b)| a * b).collect())?;
    let dh = matmul_a_bt(&du, &lw.w1)?;
    Ok(layer_norm_backward(&dh, &lw.ln2_gamma, &c.ln))
}

fn key_metric<T: Scalar>(
    x: &Mat<T>,
    lw: &LayerWeights<T>,
    lora: Option<&LayerLora<T>>,
    s: &BlockSettings,
) -> Result<Mat<T>> {
    let (h, _) = layer_norm_with_stats(x, &lw.ln1_gamma, &lw.ln1_beta, s.ln_eps)?;
    project(&h, &lw.wk, &lw.bk, lora.map(|l| &l.k), s.lora_alpha).map(|(k, _)| k)
}

/// Chooses (or replays) a plan and applies it.
fn merge_step<T: Scalar>(
    ts: &TokenSet<T>,
    metric: &Mat<T>,
    merges: usize,
    replay: Option<&MergePlan>,
    s: &BlockSettings,
) -> Result<(TokenSet<T>, MergePlan)> {
    let plan = match replay {
        Some(p) => {
            if p.len() != merges {
                return contract("replay", format!("recorded plan has {} merges, layer needs {merges}", p.len()));
            }
            p.clone()
        }
        None => bipartite_soft_match_by(ts, metric, merges, s.merge.cls_policy)?,
    };
    let merged = apply_merge(ts, &plan, s.merge.mode)?;
    Ok((merged, plan))
}

/// One layer applied to one unit.
///
/// `members` are concatenated in order; when `cpe` is given its row `j`
/// is first added to every token of member `j`. A cross-clip merge keeps
/// `ceil(total * keep)` tokens when `cross_keep` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn unit_forward<T: Scalar>(
    members: Vec<TokenSet<T>>,
    cpe: Option<&Mat<T>>,
    cross_keep: Option<f64>,
    intra: IntraRule,
    lw: &LayerWeights<T>,
    lora: Option<&LayerLora<T>>,
    s: &BlockSettings,
    replay: Option<&UnitPlans>,
    keep_cache: bool,
) -> Result<UnitOutput<T>> {
    if members.is_empty() {
        return contract("clipme_block", "no clips");
    }
    let member_rows: Vec<usize> = members.iter().map(|m| m.len()).collect();
    let mut members = members;
    if let Some(table) = cpe {
        if table.rows() != members.len() || table.cols() != members[0].width() {
            return contract(
                "clipme_block",
                format!("positional table {:?} for {} clips", table.shape(), members.len()),
            );
        }
        for (j, m) in members.iter_mut().enumerate() {
            m.features_mut().add_row_vector(table.row(j))?;
        }
    }
    let ts = if members.len() == 1 { members.pop().expect("one member") } else { TokenSet::concat(&members)? };

    let mut plans = UnitPlans::default();
    let mut cross = None;
    let ts = match cross_keep {
        Some(keep) => {
            let merges = ts.len() - keep_count(ts.len(), keep);
            let metric = match s.merge.match_source {
                MatchSource::Features => ts.features().clone(),
                MatchSource::Keys => key_metric(ts.features(), lw, lora, s)?,
            };
            let (merged, plan) = merge_step(&ts, &metric, merges, replay.map(|r| &r.cross), s)?;
            if keep_cache {
                cross = Some(plan.weights(ts.sizes(), s.merge.mode)?);
            }
            plans.cross = plan;
            merged
        }
        None => ts,
    };

    let attn_tokens = ts.len();
    let (attn_out, attn) = attention_forward(ts.features(), ts.sizes(), lw, lora, s)?;
    let x1 = ts.features().add(&attn_out)?;
    let ts = ts.with_features(x1)?;

    let merges = match intra {
        IntraRule::None => 0,
        IntraRule::Count(r) => r,
        IntraRule::Keep(keep) => ts.len() - keep_count(ts.len(), keep),
    };
    let mut intra_w = None;
    let ts = if merges > 0 {
        let metric = match s.merge.match_source {
            MatchSource::Features => ts.features().clone(),
            MatchSource::Keys => attn.k.clone(),
        };
        let (merged, plan) = merge_step(&ts, &metric, merges, replay.map(|r| &r.intra), s)?;
        if keep_cache {
            intra_w = Some(plan.weights(ts.sizes(), s.merge.mode)?);
        }
        plans.intra = plan;
        merged
    } else {
        ts
    };

    let (f, ffn) = ffn_forward(ts.features(), lw, s.ln_eps)?;
    let x3 = ts.features().add(&f)?;
    let tokens = ts.with_features(x3)?;
    let cache = keep_cache.then_some(UnitCache { member_rows, cross, attn, intra: intra_w, ffn });
    Ok(UnitOutput { tokens, plans, attn_tokens, cache })
}

/// Backward through [`unit_forward`]: returns the gradient for every
/// member's input features and accumulates adapter and positional-table
/// gradients.
pub(crate) fn unit_backward<T: Scalar>(
    d_out: &Mat<T>,
    c: &UnitCache<T>,
    lw: &LayerWeights<T>,
    lora: Option<&LayerLora<T>>,
    s: &BlockSettings,
    lora_grad: Option<&mut LayerLora<T>>,
    cpe_grad: Option<&mut Mat<T>>,
) -> Result<Vec<Mat<T>>> {
    let mut dx2 = d_out.clone();
    dx2.add_assign(&ffn_backward(d_out, &c.ffn, lw)?)?;
    let dx1 = match &c.intra {
        Some(w) => w.backward(&dx2),
        None => dx2,
    };
    let mut dxin = dx1.clone();
    dxin.add_assign(&attention_backward(&dx1, &c.attn, lw, lora, s, lora_grad)?)?;
    let dcat = match &c.cross {
        Some(w) => w.backward(&dxin),
        None => dxin,
    };
    let mut out = Vec::with_capacity(c.member_rows.len());
    let mut at = 0;
    for &rows in &c.member_rows {
        out.push(dcat.slice_rows(at, at + rows));
        at += rows;
    }
    if let Some(g) = cpe_grad {
        for (j, dm) in out.iter().enumerate() {
            for (o, v) in g.row_mut(j).iter_mut().zip(dm.column_sums()) {
                *o += v;
            }
        }
    }
    Ok(out)
}

/// Multi-head self-attention branch of a pre-norm layer, without the
/// residual: `softmax(q k^T / sqrt(d) + log size) v`, projected.
pub fn attention<T: Scalar>(
    ts: &TokenSet<T>,
    lw: &LayerWeights<T>,
    lora: Option<&LayerLora<T>>,
    settings: &BlockSettings,
) -> Result<TokenSet<T>> {
    let (out, _) = attention_forward(ts.features(), ts.sizes(), lw, lora, settings)?;
    ts.with_features(out)
}

/// Image-level layer on a single frame: attention, remove `r` tokens by
/// bipartite soft matching, FFN.
pub fn imgme_block<T: Scalar>(
    frame: &TokenSet<T>,
    lw: &LayerWeights<T>,
    lora: Option<&LayerLora<T>>,
    r: usize,
    settings: &BlockSettings,
) -> Result<TokenSet<T>> {
    if frame.clip_ids().windows(2).any(|w| w[0] != w[1]) {
        return contract("imgme_block", "tokens from more than one frame");
    }
    if r >= frame.len() {
        return contract("imgme_block", format!("cannot remove {r} of {} tokens", frame.len()));
    }
    let out = unit_forward(vec![frame.clone()], None, None, IntraRule::Count(r), lw, lora, settings, None, false)?;
    Ok(out.tokens)
}

/// Clip-level layer: add clip positional embeddings, fuse the clips with
/// a cross-clip merge (skipped for a single clip or when `skip_cross`),
/// attention, intra-clip merge, FFN. The output carries the first clip's
/// id.
#[allow(clippy::too_many_arguments)]
pub fn clipme_block<T: Scalar>(
    clips: &[TokenSet<T>],
    lw: &LayerWeights<T>,
    lora: Option<&LayerLora<T>>,
    cpe: Option<&Mat<T>>,
    keep_cross: f64,
    keep_intra: f64,
    skip_cross: bool,
    settings: &BlockSettings,
) -> Result<TokenSet<T>> {
    let Some(first) = clips.first() else {
        return contract("clipme_block", "no clips");
    };
    if clips.iter().any(|c| c.width() != first.width()) {
        return contract("clipme_block", "clips differ in width");
    }
    let cross = (!skip_cross && clips.len() > 1).then_some(keep_cross);
    let id = first.clip_ids().first().copied().unwrap_or(0);
    let out = unit_forward(clips.to_vec(), cpe, cross, IntraRule::Keep(keep_intra), lw, lora, settings, None, false)?;
    let mut tokens = out.tokens;
    tokens.relabel_clip(id);
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderWeights, LoraParams, Preset};
    use crate::numerics::{max_relative_diff, Rng};

    fn frame(n: usize, d: usize, seed: u64) -> TokenSet<f64> {
        TokenSet::from_frame(Mat::randn(n, d, 1.0, &mut Rng::new(seed)), 0)
    }

    fn micro() -> (EncoderWeights<f64>, BlockSettings) {
        let cfg = Preset::Micro.config();
        (EncoderWeights::init(&cfg, 11).unwrap(), BlockSettings::vision(&cfg))
    }

    #[test]
    fn zero_up_lora_matches_plain_attention() {
        let (w, s) = micro();
        let cfg = Preset::Micro.config();
        let lora = LoraParams::<f64>::init(&cfg, 3);
        let ts = frame(5, 16, 1);
        let a = attention(&ts, &w.vision.layers[0], None, &s).unwrap();
        let b = attention(&ts, &w.vision.layers[0], Some(&lora.vision[0]), &s).unwrap();
        assert_eq!(a.features(), b.features());
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (w, s) = micro();
        let lw = &w.vision.layers[0];
        let ts = frame(1, 16, 2);
        let out = attention(&ts, lw, None, &s).unwrap();
        let (h, _) = layer_norm_with_stats(ts.features(), &lw.ln1_gamma, &lw.ln1_beta, s.ln_eps).unwrap();
        let (v, _) = project(&h, &lw.wv, &lw.bv, None, 1.0).unwrap();
        let mut expect = matmul(&v, &lw.wo).unwrap();
        expect.add_row_vector(&lw.bo).unwrap();
        assert!(max_relative_diff(out.features().data(), expect.data()) < 1e-12);
    }

    #[test]
    fn proportional_is_inert_for_unit_sizes() {
        let (w, s) = micro();
        let ts = frame(5, 16, 3).cast::<f32>();
        let w = w.cast::<f32>();
        let off = BlockSettings { proportional: false, ..s };
        let a = attention(&ts, &w.vision.layers[1], None, &s).unwrap();
        let b = attention(&ts, &w.vision.layers[1], None, &off).unwrap();
        for (x, y) in a.features().data().iter().zip(b.features().data()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn imgme_removes_r_tokens_and_r0_is_plain() {
        let (w, s) = micro();
        let lw = &w.vision.layers[0];
        let ts = frame(5, 16, 4);
        assert_eq!(imgme_block(&ts, lw, None, 2, &s).unwrap().len(), 3);
        let plain = imgme_block(&ts, lw, None, 0, &s).unwrap();
        let (a, _) = attention_forward(ts.features(), ts.sizes(), lw, None, &s).unwrap();
        let x1 = ts.features().add(&a).unwrap();
        let (f, _) = ffn_forward(&x1, lw, s.ln_eps).unwrap();
        assert_eq!(plain.features(), &x1.add(&f).unwrap());
        assert!(imgme_block(&ts, lw, None, 5, &s).is_err());
    }

    #[test]
    fn clipme_counts_and_single_clip() {
        let (w, s) = micro();
        let lw = &w.vision.layers[1];
        let a = frame(34, 16, 5);
        let mut b = frame(34, 16, 6);
        b.relabel_clip(1);
        let out =
            unit_forward(vec![a.clone(), b.clone()], None, Some(0.7), IntraRule::Keep(0.9), lw, None, &s, None, false)
                .unwrap();
        assert_eq!(out.attn_tokens, 48);
        assert_eq!(out.tokens.len(), 44);
        let fused = clipme_block(&[a.clone(), b], lw, None, None, 0.7, 0.9, false, &s).unwrap();
        assert!(fused.clip_ids().iter().all(|&c| c == 0));
        // one clip, R_I = 1: a plain layer
        let single = clipme_block(std::slice::from_ref(&a), lw, None, None, 0.7, 1.0, false, &s).unwrap();
        assert_eq!(single.features(), imgme_block(&a, lw, None, 0, &s).unwrap().features());
        let cpe = Mat::zeros(3, 16);
        assert!(clipme_block(&[a.clone(), a], lw, None, Some(&cpe), 0.7, 0.9, false, &s).is_err());
    }

    #[test]
    fn token_sum_conserved_through_merge_substep() {
        let (w, s) = micro();
        let lw = &w.vision.layers[0];
        let ts = frame(9, 16, 7);
        let (a, _) = attention_forward(ts.features(), ts.sizes(), lw, None, &s).unwrap();
        let x1 = ts.with_features(ts.features().add(&a).unwrap()).unwrap();
        let plan = bipartite_soft_match_by(&x1, x1.features(), 3, s.merge.cls_policy).unwrap();
        let merged = apply_merge(&x1, &plan, s.merge.mode).unwrap();
        assert_eq!(merged.total_size(), 9);
        let before = x1.weighted_feature_sum();
        let after = merged.weighted_feature_sum();
        assert!(max_relative_diff(&after, &before) < 1e-12);
    }

    /// Scalar objective `Σ c ⊙ output` and its gradient checked by central
    /// differences on inputs, LoRA and positional tables.
    #[test]
    fn unit_backward_matches_finite_differences() {
        let cfg = Preset::Micro.config();
        let w = EncoderWeights::<f64>::init(&cfg, 21).unwrap();
        let lw = &w.vision.layers[1];
        let lora = LoraParams::<f64>::random(&cfg, 22, 0.2);
        let ll = &lora.vision[1];
        let mut rng = Rng::new(23);
        let s = BlockSettings::vision(&cfg);
        let m0 = TokenSet::from_frame(Mat::<f64>::randn(5, 16, 1.0, &mut rng), 0);
        let mut m1 = TokenSet::from_frame(Mat::<f64>::randn(5, 16, 1.0, &mut rng), 1);
        m1.relabel_clip(1);
        let cpe = Mat::<f64>::randn(2, 16, 0.3, &mut rng);

        let run = |m0: &TokenSet<f64>, ll: &LayerLora<f64>, cpe: &Mat<f64>, replay: Option<&UnitPlans>| {
            unit_forward(
                vec![m0.clone(), m1.clone()],
                Some(cpe),
                Some(0.7),
                IntraRule::Keep(0.8),
                lw,
                Some(ll),
                &s,
                replay,
                true,
            )
            .unwrap()
        };
        let base = run(&m0, ll, &cpe, None);
        let c = Mat::<f64>::randn(base.tokens.len(), 16, 1.0, &mut rng);
        let objective =
            |o: &UnitOutput<f64>| o.tokens.features().data().iter().zip(c.data()).map(|(a, b)| a * b).sum::<f64>();

        let mut lg = ll.clone();
        lg.adapters_mut().into_iter().for_each(|a| {
            a.down = Mat::zeros(a.down.rows(), a.down.cols());
            a.up = Mat::zeros(a.up.rows(), a.up.cols());
        });
        let mut cg = Mat::zeros(2, 16);
        let dx =
            unit_backward(&c, base.cache.as_ref().unwrap(), lw, Some(ll), &s, Some(&mut lg), Some(&mut cg)).unwrap();

        let eps = 1e-6;
        let fd = |f: &dyn Fn(f64) -> f64| (f(eps) - f(-eps)) / (2.0 * eps);
        // input token (1, 3)
        let g = fd(&|e| {
            let mut f = m0.features().clone();
            f.set(1, 3, f.get(1, 3) + e);
            objective(&run(&m0.with_features(f).unwrap(), ll, &cpe, Some(&base.plans)))
        });
        assert!((g - dx[0].get(1, 3)).abs() < 1e-6 * g.abs().max(1.0), "{g} vs {}", dx[0].get(1, 3));
        // LoRA down and up of the value adapter
        for (which, r, col) in [(0usize, 2usize, 1usize), (1, 1, 4)] {
            let g = fd(&|e| {
                let mut l2 = ll.clone();
                let m = if which == 0 { &mut l2.v.down } else { &mut l2.v.up };
                m.set(r, col, m.get(r, col) + e);
                objective(&run(&m0, &l2, &cpe, Some(&base.plans)))
            });
            let a = if which == 0 { lg.v.down.get(r, col) } else { lg.v.up.get(r, col) };
            assert!((g - a).abs() < 1e-6 * g.abs().max(1.0), "lora {which}: {g} vs {a}");
        }
        // query adapter
        let g = fd(&|e| {
            let mut l2 = ll.clone();
            l2.q.up.set(0, 7, l2.q.up.get(0, 7) + e);
            objective(&run(&m0, &l2, &cpe, Some(&base.plans)))
        });
        assert!((g - lg.q.up.get(0, 7)).abs() < 1e-6 * g.abs().max(1.0));
        // positional table
        let g = fd(&|e| {
            let mut c2 = cpe.clone();
            c2.set(1, 9, c2.get(1, 9) + e);
            objective(&run(&m0, ll, &c2, Some(&base.plans)))
        });
        assert!((g - cg.get(1, 9)).abs() < 1e-6 * g.abs().max(1.0));
    }

    #[test]
    fn causal_mask_ignores_future_tokens() {
        let (w, s) = micro();
        let s = BlockSettings { causal: true, ..s };
        let lw = &w.text.layers[0];
        let full = frame(5, 16, 8);
        let prefix = full.with_features(full.features().slice_rows(0, 5)).unwrap();
        let mut changed = full.features().clone();
        changed.set(4, 0, 9.0);
        let a = attention(&prefix, lw, None, &s).unwrap();
        let b = attention(&full.with_features(changed).unwrap(), lw, None, &s).unwrap();
        assert_eq!(a.features().slice_rows(0, 4), b.features().slice_rows(0, 4));
    }
}
