use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::Scalar;

/// Default softmax temperature of the contrastive loss.
pub const DEFAULT_TEMPERATURE: f64 = 0.05;

/// Square text-by-video score matrix; row `i` is text `i`, column `j`
/// is video `j`, and pair `(i, i)` is the true match.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    size: usize,
    values: Vec<f64>,
    temperature: f64,
}

/// Symmetric loss and its two directional halves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveLoss {
    pub loss: f64,
    pub text_to_video: f64,
    pub video_to_text: f64,
}

fn norm<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}

impl SimilarityMatrix {
    /// Row-major `size x size` values.
    pub fn new(size: usize, values: Vec<f64>, temperature: f64) -> Result<Self> {
        if size == 0 || values.len() != size * size {
            return contract("SimilarityMatrix", format!("{} values for a {size} x {size} matrix", values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return contract("SimilarityMatrix", "non-finite score");
        }
        Ok(Self { size, values, temperature })
    }

    /// Cosine similarity of every text embedding with every video
    /// embedding.
    pub fn from_embeddings<T: Scalar>(texts: &[Vec<T>], videos: &[Vec<T>], temperature: f64) -> Result<Self> {
        if texts.len() != videos.len() {
            return contract("SimilarityMatrix", format!("{} texts for {} videos", texts.len(), videos.len()));
        }
        let tn: Vec<f64> = texts.iter().map(|t| norm(t)).collect();
        let vn: Vec<f64> = videos.iter().map(|v| norm(v)).collect();
        if tn.iter().chain(&vn).any(|&n| n == 0.0 || !n.is_finite()) {
            return contract("SimilarityMatrix", "zero or non-finite embedding");
        }
        let mut values = Vec::with_capacity(texts.len() * videos.len());
        for (t, &a) in texts.iter().zip(&tn) {
            for (v, &b) in videos.iter().zip(&vn) {
                if t.len() != v.len() {
                    return contract("SimilarityMatrix", "embedding widths differ");
                }
                let dot: f64 = t.iter().zip(v).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
                values.push((dot / (a * b)).clamp(-1.0, 1.0));
            }
        }
        Self::new(texts.len(), values, temperature)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, text: usize, video: usize) -> f64 {
        self.values[text * self.size + video]
    }

    pub fn with_temperature(&self, temperature: f64) -> Self {
        Self { temperature, ..self.clone() }
    }

    /// Reorders texts and videos by the same permutation:
    /// `out[i][j] = self[perm[i]][perm[j]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.size;
        let values = (0..n * n).map(|k| self.get(perm[k / n], perm[k % n])).collect();
        Self { size: n, values, temperature: self.temperature }
    }

    fn check(&self) -> Result<()> {
        if self.size < 2 {
            return contract("contrastive_loss", "batch must hold at least two pairs");
        }
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return contract("contrastive_loss", format!("temperature must be positive, got {}", self.temperature));
        }
        Ok(())
    }

    /// Row softmax of `s / tau` (text to video) and column softmax (video
    /// to text), both stored row-major.
    fn softmaxes(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.size;
        let tau = self.temperature;
        let mut p = vec![0.0; n * n];
        let mut q = vec![0.0; n * n];
        for i in 0..n {
            let max = (0..n).map(|j| self.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..n).map(|j| ((self.get(i, j) - max) / tau).exp()).sum();
            for j in 0..n {
                p[i * n + j] = ((self.get(i, j) - max) / tau).exp() / z;
            }
        }
        for j in 0..n {
            let max = (0..n).map(|i| self.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..n).map(|i| ((self.get(i, j) - max) / tau).exp()).sum();
            for i in 0..n {
                q[i * n + j] = ((self.get(i, j) - max) / tau).exp() / z;
            }
        }
        (p, q)
    }
}

fn log_softmax_at(scores: impl Iterator<Item = f64> + Clone, target: f64, tau: f64) -> f64 {
    let max = scores.clone().fold(f64::NEG_INFINITY, f64::max);
    let lse = scores.map(|s| ((s - max) / tau).exp()).sum::<f64>().ln();
    (target - max) / tau - lse
}

/// Symmetric InfoNCE: mean of the text-to-video and video-to-text
/// cross-entropies of the diagonal, each stabilised by subtracting the
/// row (column) maximum.
pub fn contrastive_loss(sim: &SimilarityMatrix) -> Result<ContrastiveLoss> {
    sim.check()?;
    let n = sim.size;
    let tau = sim.temperature;
    let t2v =
        -(0..n).map(|i| log_softmax_at((0..n).map(|j| sim.get(i, j)), sim.get(i, i), tau)).sum::<f64>() / n as f64;
    let v2t =
        -(0..n).map(|j| log_softmax_at((0..n).map(|i| sim.get(i, j)), sim.get(j, j), tau)).sum::<f64>() / n as f64;
    Ok(ContrastiveLoss { loss: 0.5 * (t2v + v2t), text_to_video: t2v, video_to_text: v2t })
}

/// `dL/ds`, row-major: `((P - I) + (Q - I)) / (2 B tau)` where `P` is the
/// row softmax and `Q` the column softmax of `s / tau`.
pub fn loss_grad(sim: &SimilarityMatrix) -> Result<Vec<f64>> {
    sim.check()?;
    let n = sim.size;
    let (p, q) = sim.softmaxes();
    let scale = 1.0 / (2.0 * n as f64 * sim.temperature);
    Ok((0..n * n)
        .map(|k| {
            let diag = if k / n == k % n { 2.0 } else { 0.0 };
            scale * (p[k] + q[k] - diag)
        })
        .collect())
}
