use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{contrastive_loss, loss_grad, SimilarityMatrix};
use crate::encoder::{
    text_backward, text_forward, video_backward, video_forward, EncoderWeights, ForwardOptions, Trainable, UnitPlans,
    VideoInput,
};
use crate::error::{contract, Result};
use crate::numerics::Scalar;
use crate::schedule::{predict_token_counts, MergeSchedule};

/// Paired texts (token ids) and videos; pair `i` is `(texts[i], videos[i])`.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a, T = f32> {
    pub texts: &'a [Vec<u32>],
    pub videos: &'a [VideoInput<T>],
}

impl<T> Batch<'_, T> {
    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// Backpropagation with merge selections held fixed.
    Analytic,
    /// Central differences with the given step, replaying the merge
    /// selections of the unperturbed pass.
    FiniteDifference { step: f64 },
}

#[derive(Clone, Debug)]
pub struct GradOutput<T = f32> {
    pub loss: f64,
    pub similarity: SimilarityMatrix,
    pub grads: Trainable<T>,
}

/// Largest configuration the finite-difference mode accepts.
pub const FD_MAX_WIDTH: usize = 32;
pub const FD_MAX_LAYERS: usize = 4;
pub const FD_MAX_TOKENS: usize = 20;
pub const FD_MAX_BATCH: usize = 8;

fn fd_guard<T>(w: &EncoderWeights<T>, sched: &MergeSchedule, batch: &Batch<'_, T>) -> Result<()> {
    let c = &w.config;
    let capacity = predict_token_counts(c, sched)?.max_attention_capacity();
    let longest_text = batch.texts.iter().map(Vec::len).max().unwrap_or(0);
    let ok = c.width <= FD_MAX_WIDTH
        && c.num_layers <= FD_MAX_LAYERS
        && c.text_layers <= FD_MAX_LAYERS
        && c.tokens_per_frame() <= FD_MAX_TOKENS
        && capacity <= FD_MAX_TOKENS
        && longest_text <= FD_MAX_TOKENS
        && batch.len() <= FD_MAX_BATCH;
    if ok {
        Ok(())
    } else {
        contract(
            "param_grad",
            format!(
                "finite differences need width <= {FD_MAX_WIDTH}, layers <= {FD_MAX_LAYERS}, \
                 tokens <= {FD_MAX_TOKENS} and batch <= {FD_MAX_BATCH}"
            ),
        )
    }
}

fn check_batch<T>(batch: &Batch<'_, T>) -> Result<()> {
    if batch.texts.len() != batch.videos.len() {
        return contract("param_grad", format!("{} texts for {} videos", batch.texts.len(), batch.videos.len()));
    }
    if batch.len() < 2 {
        return contract("param_grad", "batch must hold at least two pairs");
    }
    Ok(())
}

/// Text embeddings, video embeddings and the merge plans of every video.
pub(crate) type Embedded<T> = (Vec<Vec<T>>, Vec<Vec<T>>, Vec<Vec<Vec<UnitPlans>>>);

/// Embeds every pair under `params`; `replay` fixes the video merge plans.
pub(crate) fn embed_batch<T: Scalar>(
    w: &EncoderWeights<T>,
    params: &Trainable<T>,
    sched: &MergeSchedule,
    batch: &Batch<'_, T>,
    replay: Option<&[Vec<Vec<UnitPlans>>]>,
    parallel: bool,
) -> Result<Embedded<T>> {
    let video = |(j, v): (usize, &VideoInput<T>)| {
        let opts = ForwardOptions { parallel: false, replay: replay.map(|r| r[j].as_slice()) };
        video_forward(w, Some(&params.lora), Some(&params.cpe), sched, v, &opts, false).map(|(o, _)| o)
    };
    let outs: Vec<_> = if parallel {
        batch.videos.par_iter().enumerate().map(video).collect::<Result<_>>()?
    } else {
        batch.videos.iter().enumerate().map(video).collect::<Result<_>>()?
    };
    let texts = batch
        .texts
        .iter()
        .map(|ids| text_forward(w, Some(&params.lora), ids, false).map(|(e, _)| e))
        .collect::<Result<_>>()?;
    let (videos, plans) = outs.into_iter().map(|o| (o.embedding, o.plans)).unzip();
    Ok((texts, videos, plans))
}

/// `d cos(a, b) / d a` scaled by `g`, accumulated into `out`.
fn add_cosine_grad(out: &mut [f64], a: &[f64], a_norm: f64, b: &[f64], b_norm: f64, cos: f64, g: f64) {
    for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
        *o += g * (y / (a_norm * b_norm) - cos * x / (a_norm * a_norm));
    }
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn analytic<T: Scalar>(
    w: &EncoderWeights<T>,
    params: &Trainable<T>,
    sched: &MergeSchedule,
    batch: &Batch<'_, T>,
    temperature: f64,
    parallel: bool,
) -> Result<GradOutput<T>> {
    let video = |v: &VideoInput<T>| {
        video_forward(w, Some(&params.lora), Some(&params.cpe), sched, v, &ForwardOptions::default(), true)
    };
    let vids: Vec<_> = if parallel {
        batch.videos.par_iter().map(video).collect::<Result<_>>()?
    } else {
        batch.videos.iter().map(video).collect::<Result<_>>()?
    };
    let txts: Vec<_> =
        batch.texts.iter().map(|ids| text_forward(w, Some(&params.lora), ids, true)).collect::<Result<_>>()?;

    let t: Vec<Vec<f64>> = txts.iter().map(|(e, _)| to_f64(e)).collect();
    let v: Vec<Vec<f64>> = vids.iter().map(|(o, _)| to_f64(&o.embedding)).collect();
    let sim = SimilarityMatrix::from_embeddings(&t, &v, temperature)?;
    let loss = contrastive_loss(&sim)?.loss;
    let g = loss_grad(&sim)?;

    let n = batch.len();
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let tn: Vec<f64> = t.iter().map(|x| norm(x)).collect();
    let vn: Vec<f64> = v.iter().map(|x| norm(x)).collect();
    let mut dt = vec![vec![0.0; t[0].len()]; n];
    let mut dv = vec![vec![0.0; v[0].len()]; n];
    for i in 0..n {
        for j in 0..n {
            let (gij, s) = (g[i * n + j], sim.get(i, j));
            add_cosine_grad(&mut dt[i], &t[i], tn[i], &v[j], vn[j], s, gij);
            add_cosine_grad(&mut dv[j], &v[j], vn[j], &t[i], tn[i], s, gij);
        }
    }
    let cast = |x: &[f64]| x.iter().map(|&a| T::from_f64(a)).collect::<Vec<T>>();

    // Per-example gradients summed in index order, whatever the schedule
    // of the worker threads.
    let zero = params.zeros_like();
    let per_video = |(j, (_, cache)): (usize, &(_, Option<_>))| -> Result<Trainable<T>> {
        let mut gr = zero.clone();
        video_backward(w, params, cache.as_ref().expect("cache kept"), &cast(&dv[j]), &mut gr)?;
        Ok(gr)
    };
    let video_grads: Vec<Trainable<T>> = if parallel {
        vids.par_iter().enumerate().map(per_video).collect::<Result<_>>()?
    } else {
        vids.iter().enumerate().map(per_video).collect::<Result<_>>()?
    };
    let mut total = zero.to_flat();
    for gr in &video_grads {
        for (a, b) in total.iter_mut().zip(gr.to_flat()) {
            *a += b;
        }
    }
    let mut text_grads = zero.clone();
    for (i, (_, cache)) in txts.iter().enumerate() {
        text_backward(w, params, cache.as_ref().expect("cache kept"), &cast(&dt[i]), &mut text_grads)?;
    }
    for (a, b) in total.iter_mut().zip(text_grads.to_flat()) {
        *a += b;
    }
    let mut grads = zero;
    grads.set_flat(&total)?;
    Ok(GradOutput { loss, similarity: sim, grads })
}

fn finite_difference<T: Scalar>(
    w: &EncoderWeights<T>,
    params: &Trainable<T>,
    sched: &MergeSchedule,
    batch: &Batch<'_, T>,
    temperature: f64,
    step: f64,
) -> Result<GradOutput<T>> {
    fd_guard(w, sched, batch)?;
    if step.is_nan() || step <= 0.0 {
        return contract("param_grad", "finite-difference step must be positive");
    }
    let (t, v, plans) = embed_batch(w, params, sched, batch, None, false)?;
    let sim = SimilarityMatrix::from_embeddings(&t, &v, temperature)?;
    let loss = contrastive_loss(&sim)?.loss;
    let loss_at = |p: &Trainable<T>| -> Result<f64> {
        let (t, v, _) = embed_batch(w, p, sched, batch, Some(&plans), false)?;
        Ok(contrastive_loss(&SimilarityMatrix::from_embeddings(&t, &v, temperature)?)?.loss)
    };
    let flat = params.to_flat();
    let mut probe = params.clone();
    let mut grad = Vec::with_capacity(flat.len());
    let mut x = flat.clone();
    for k in 0..flat.len() {
        let x0 = flat[k].as_f64();
        x[k] = T::from_f64(x0 + step);
        probe.set_flat(&x)?;
        let plus = loss_at(&probe)?;
        x[k] = T::from_f64(x0 - step);
        probe.set_flat(&x)?;
        let minus = loss_at(&probe)?;
        x[k] = flat[k];
        grad.push(T::from_f64((plus - minus) / (2.0 * step)));
    }
    let mut grads = params.zeros_like();
    grads.set_flat(&grad)?;
    Ok(GradOutput { loss, similarity: sim, grads })
}

/// Gradient of the symmetric contrastive loss with respect to every
/// trainable scalar (LoRA adapters of both towers and the clip
/// positional tables). The backbone stays frozen.
///
/// Merge selections are constants in both modes: gradients flow through
/// the weighted averaging but not through the discrete matching. The
/// finite-difference mode refuses anything larger than a micro model.
pub fn param_grad<T: Scalar>(
    w: &EncoderWeights<T>,
    params: &Trainable<T>,
    sched: &MergeSchedule,
    batch: &Batch<'_, T>,
    temperature: f64,
    mode: GradMode,
) -> Result<GradOutput<T>> {
    check_batch(batch)?;
    match mode {
        GradMode::Analytic => analytic(w, params, sched, batch, temperature, false),
        GradMode::FiniteDifference { step } => finite_difference(w, params, sched, batch, temperature, step),
    }
}

/// Analytic gradient with per-example passes on the rayon pool. The
/// result is bit-identical to the sequential one.
pub fn param_grad_parallel<T: Scalar>(
    w: &EncoderWeights<T>,
    params: &Trainable<T>,
    sched: &MergeSchedule,
    batch: &Batch<'_, T>,
    temperature: f64,
) -> Result<GradOutput<T>> {
    check_batch(batch)?;
    analytic(w, params, sched, batch, temperature, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{ClipPositionalEmbeddings, LoraParams, Preset};
    use crate::numerics::{max_relative_diff, Mat, Rng};
    use crate::schedule::parse_schedule;

    fn micro_batch(seed: u64, b: usize) -> (EncoderWeights<f64>, Vec<Vec<u32>>, Vec<VideoInput<f64>>) {
        let cfg = Preset::Micro.config();
        let w = EncoderWeights::<f64>::init(&cfg, seed).unwrap();
        let mut rng = Rng::fork(seed, 50);
        let texts = (0..b)
            .map(|_| {
                let n = 1 + rng.below(cfg.text_max_len - 2);
                let mut ids = vec![1];
                ids.extend((0..n).map(|_| 3 + rng.below(cfg.text_vocab_size - 3) as u32));
                ids.push(2);
                ids
            })
            .collect();
        let videos = (0..b)
            .map(|_| VideoInput {
                frames: (0..cfg.frames)
                    .map(|_| Mat::randn(cfg.patches_per_frame(), cfg.patch_dim, 1.0, &mut rng))
                    .collect(),
            })
            .collect();
        (w, texts, videos)
    }

    fn random_params(cfg: &crate::encoder::ModelConfig, sched: &MergeSchedule, seed: u64) -> Trainable<f64> {
        Trainable {
            lora: LoraParams::random(cfg, seed, 0.2),
            cpe: ClipPositionalEmbeddings::random(sched, cfg.width, 0.2, seed + 1),
        }
    }

    #[test]
    fn analytic_matches_finite_differences_micro() {
        let sched = parse_schedule(Preset::Micro.default_schedule()).unwrap();
        for seed in 0..3 {
            let (w, texts, videos) = micro_batch(seed, 4);
            let params = random_params(&w.config, &sched, seed + 10);
            let batch = Batch { texts: &texts, videos: &videos };
            let a = param_grad(&w, &params, &sched, &batch, 0.5, GradMode::Analytic).unwrap();
            let f = param_grad(&w, &params, &sched, &batch, 0.5, GradMode::FiniteDifference { step: 1e-5 }).unwrap();
            assert_eq!(a.loss, f.loss);
            let (ga, gf) = (a.grads.to_flat(), f.grads.to_flat());
            let rel = max_relative_diff(&ga, &gf);
            assert!(rel < 1e-3, "seed {seed}: {rel}");
            let r = a.grads.cpe_range();
            assert!(max_relative_diff(&ga[r.clone()], &gf[r]) < 1e-3);
        }
    }

    #[test]
    fn zero_up_projection_gradients() {
        let sched = parse_schedule(Preset::Micro.default_schedule()).unwrap();
        let (w, texts, videos) = micro_batch(4, 3);
        let params = Trainable::<f64>::init(&w.config, &sched, 2);
        let batch = Batch { texts: &texts, videos: &videos };
        let g = param_grad(&w, &params, &sched, &batch, 0.05, GradMode::Analytic).unwrap().grads;
        let f = param_grad(&w, &params, &sched, &batch, 0.05, GradMode::FiniteDifference { step: 1e-5 }).unwrap().grads;
        for (la, lf) in g.lora.vision.iter().chain(&g.lora.text).zip(f.lora.vision.iter().chain(&f.lora.text)) {
            for (a, b) in la.adapters().into_iter().zip(lf.adapters()) {
                // With up = 0 the down projection cannot influence the loss.
                assert!(a.down.data().iter().all(|&x| x == 0.0));
                assert!(b.down.max_abs() < 1e-9);
            }
        }
        let ups: f64 = g.lora.vision.iter().flat_map(|l| l.adapters()).map(|a| a.up.max_abs()).fold(0.0, f64::max);
        assert!(ups > 0.0);
        assert!(max_relative_diff(&g.to_flat(), &f.to_flat()) < 1e-3);
    }

    #[test]
    fn cpe_gradient_zero_without_clip_steps() {
        let sched = parse_schedule("4").unwrap();
        let (w, texts, videos) = micro_batch(5, 3);
        let params = random_params(&w.config, &sched, 1);
        assert_eq!(params.cpe.param_count(), 0);
        let g = param_grad(&w, &params, &sched, &Batch { texts: &texts, videos: &videos }, 0.05, GradMode::Analytic)
            .unwrap();
        assert!(g.grads.to_flat()[g.grads.cpe_range()].is_empty());

        // A fusing step adds its table, so the gradient is live.
        let sched = parse_schedule("4@2:1").unwrap();
        let params = random_params(&w.config, &sched, 1);
        let g = param_grad(&w, &params, &sched, &Batch { texts: &texts, videos: &videos }, 0.05, GradMode::Analytic)
            .unwrap();
        assert!(g.grads.to_flat()[g.grads.cpe_range()].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn duplicated_pair_gets_equal_treatment() {
        let sched = parse_schedule(Preset::Micro.default_schedule()).unwrap();
        let (w, mut texts, mut videos) = micro_batch(6, 3);
        texts.push(texts[0].clone());
        videos.push(videos[0].clone());
        let params = random_params(&w.config, &sched, 3);
        let out = param_grad(&w, &params, &sched, &Batch { texts: &texts, videos: &videos }, 0.05, GradMode::Analytic)
            .unwrap();
        let s = &out.similarity;
        assert_eq!(s.get(0, 0), s.get(3, 3));
        assert_eq!(s.get(0, 3), s.get(3, 0));
        assert!(out.grads.to_flat().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn parallel_is_bit_identical() {
        let sched = parse_schedule(Preset::Micro.default_schedule()).unwrap();
        let (w, texts, videos) = micro_batch(7, 6);
        let params = random_params(&w.config, &sched, 4);
        let batch = Batch { texts: &texts, videos: &videos };
        let a = param_grad(&w, &params, &sched, &batch, 0.05, GradMode::Analytic).unwrap();
        let b = param_grad_parallel(&w, &params, &sched, &batch, 0.05).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.grads, b.grads);
    }

    #[test]
    fn finite_differences_refuse_large_models() {
        let cfg = Preset::Toy.config();
        let sched = parse_schedule(Preset::Toy.default_schedule()).unwrap();
        let w = EncoderWeights::<f64>::init(&cfg, 0).unwrap();
        let params = Trainable::<f64>::init(&cfg, &sched, 0);
        let mut rng = Rng::new(1);
        let videos: Vec<VideoInput<f64>> = (0..2)
            .map(|_| VideoInput {
                frames: (0..cfg.frames)
                    .map(|_| Mat::randn(cfg.patches_per_frame(), cfg.patch_dim, 1.0, &mut rng))
                    .collect(),
            })
            .collect();
        let texts = vec![vec![1, 5, 2], vec![1, 6, 2]];
        let batch = Batch { texts: &texts, videos: &videos };
        assert!(param_grad(&w, &params, &sched, &batch, 0.05, GradMode::FiniteDifference { step: 1e-5 }).is_err());
    }
}
