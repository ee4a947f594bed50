use serde::{Deserialize, Serialize};

use super::grad::{embed_batch, param_grad, param_grad_parallel, Batch, GradMode};
use super::{contrastive_loss, retrieval_metrics, Direction, RetrievalMetrics, SimilarityMatrix, DEFAULT_TEMPERATURE};
use crate::encoder::{EncoderWeights, Trainable};
use crate::error::{contract, Error, Result};
use crate::schedule::MergeSchedule;
use crate::synthgen::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub temperature: f64,
    /// Seeds the adapter initialisation.
    pub seed: u64,
    /// Per-example passes on the rayon pool; results are unchanged.
    pub parallel: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 0.03,
            momentum: 0.9,
            temperature: DEFAULT_TEMPERATURE,
            seed: 0,
            parallel: false,
        }
    }
}

/// One line of the training log, measured before the step's update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub loss: f64,
    #[serde(rename = "R@1")]
    pub r1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<TrainLogEntry>,
    pub initial_loss: f64,
    /// Loss on the training pairs after the last update.
    pub final_loss: f64,
    pub final_metrics: RetrievalMetrics,
    pub params: Trainable<f32>,
}

/// Evaluates loss and text-to-video metrics of `params` on every pair.
pub fn evaluate(
    w: &EncoderWeights<f32>,
    params: &Trainable<f32>,
    sched: &MergeSchedule,
    data: &Dataset,
    temperature: f64,
) -> Result<(f64, RetrievalMetrics)> {
    let (texts, videos) = (data.texts(), data.videos());
    let batch = Batch { texts: &texts, videos: &videos };
    let (t, v, _) = embed_batch(w, params, sched, &batch, None, false)?;
    let sim = SimilarityMatrix::from_embeddings(&t, &v, temperature)?;
    Ok((contrastive_loss(&sim)?.loss, retrieval_metrics(&sim, Direction::TextToVideo)))
}

/// Full-batch momentum SGD over the adapters and clip positional tables;
/// the backbone `w` is only read. Deterministic for a given seed.
pub fn train_toy(
    w: &EncoderWeights<f32>,
    data: &Dataset,
    sched: &MergeSchedule,
    settings: &TrainSettings,
) -> Result<TrainOutcome> {
    if data.pairs.len() < 2 {
        return contract("train_toy", "need at least two pairs");
    }
    if !settings.learning_rate.is_finite() || settings.learning_rate < 0.0 || !(0.0..1.0).contains(&settings.momentum) {
        return contract("train_toy", "learning rate must be finite and non-negative, momentum in [0, 1)");
    }
    let (texts, videos) = (data.texts(), data.videos());
    let batch = Batch { texts: &texts, videos: &videos };
    let mut params = Trainable::<f32>::init(&w.config, sched, settings.seed);
    let mut flat: Vec<f64> = params.to_flat().iter().map(|&x| x as f64).collect();
    let mut velocity = vec![0.0f64; flat.len()];
    let mut log = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let out = if settings.parallel {
            param_grad_parallel(w, &params, sched, &batch, settings.temperature)?
        } else {
            param_grad(w, &params, sched, &batch, settings.temperature, GradMode::Analytic)?
        };
        let grad = out.grads.to_flat();
        if !out.loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                step,
                msg: format!("loss {} or a gradient entry is not finite", out.loss),
            });
        }
        log.push(TrainLogEntry {
            step,
            loss: out.loss,
            r1: retrieval_metrics(&out.similarity, Direction::TextToVideo).r1,
        });
        for ((x, v), &g) in flat.iter_mut().zip(&mut velocity).zip(&grad) {
            *v = settings.momentum * *v + g as f64;
            *x -= settings.learning_rate * *v;
        }
        let cast: Vec<f32> = flat.iter().map(|&x| x as f32).collect();
        if cast.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence { step, msg: "update overflowed the parameters".into() });
        }
        params.set_flat(&cast)?;
    }
    let (final_loss, final_metrics) = evaluate(w, &params, sched, data, settings.temperature)?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence { step: settings.steps, msg: "final loss is not finite".into() });
    }
    let initial_loss = match log.first() {
        Some(e) => e.loss,
        None => final_loss,
    };
    Ok(TrainOutcome { log, initial_loss, final_loss, final_metrics, params })
}
