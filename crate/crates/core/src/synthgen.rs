//! Synthetic paired text and video data with controllable temporal
//! redundancy.
//!
//! Every video shows `subject_count` subjects drawn from a global pool of
//! latent concepts. Subject `s` occupies a contiguous block of patch
//! positions whose base pattern leans towards the concept vector, and frame
//! `i` of patch `p` is `unit(sqrt(rho) * base[p] + sqrt(1 - rho) * noise[i][p])`.
//! The paired text names the subjects, so matching pairs are learnable.

use serde::{Deserialize, Serialize};

use crate::encoder::{ModelConfig, Tokenizer, VideoInput};
use crate::error::{contract, Result};
use crate::numerics::{Mat, Rng};

/// Weight of the per-video jitter added to a concept vector when building
/// a base pattern.
const BASE_JITTER: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_pairs: usize,
    pub frames: usize,
    /// Tokens per frame including the CLS slot; `tokens_per_frame - 1`
    /// patches are generated.
    pub tokens_per_frame: usize,
    /// Patch feature width.
    pub width: usize,
    /// Fraction of a frame's token energy shared with the video's base
    /// pattern, in `[0, 1]`.
    pub redundancy: f64,
    pub subject_count: usize,
    /// Number of latent concepts; text id of concept `c` is `3 + c`.
    pub concept_pool: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// Shapes taken from `cfg`; two subjects per video, concept pool
    /// bounded by the text vocabulary.
    pub fn for_config(cfg: &ModelConfig, num_pairs: usize, redundancy: f64, seed: u64) -> Self {
        Self {
            num_pairs,
            frames: cfg.frames,
            tokens_per_frame: cfg.tokens_per_frame(),
            width: cfg.patch_dim,
            redundancy,
            subject_count: 2.min(cfg.patches_per_frame()),
            concept_pool: 16.min(cfg.text_vocab_size - Tokenizer::FIRST_WORD as usize),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.redundancy) {
            return contract("SynthSpec", format!("redundancy {} outside [0, 1]", self.redundancy));
        }
        let patches = self.tokens_per_frame.saturating_sub(1);
        if self.frames == 0 || patches == 0 || self.width == 0 {
            return contract("SynthSpec", "frames, patches and width must be positive");
        }
        if self.subject_count == 0 || self.subject_count > patches {
            return contract("SynthSpec", format!("{} subjects for {patches} patches", self.subject_count));
        }
        if self.subject_count > self.concept_pool {
            return contract("SynthSpec", "concept pool smaller than the subject count");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub pair_id: usize,
    /// Concept index of each subject, in patch-block order.
    pub subjects: Vec<usize>,
    /// `BOS, 3 + subject..., EOS`.
    pub text: Vec<u32>,
    pub video: VideoInput<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub pairs: Vec<SynthPair>,
}

impl Dataset {
    pub fn texts(&self) -> Vec<Vec<u32>> {
        self.pairs.iter().map(|p| p.text.clone()).collect()
    }

    pub fn videos(&self) -> Vec<VideoInput<f32>> {
        self.pairs.iter().map(|p| p.video.clone()).collect()
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v
    } else {
        v.into_iter().map(|x| x / n).collect()
    }
}

/// Patch `p` belongs to subject `p * subjects / patches`.
pub fn subject_of_patch(p: usize, patches: usize, subjects: usize) -> usize {
    p * subjects / patches
}

/// Deterministic per seed; each pair draws from its own stream, so pairs
/// do not depend on `num_pairs`.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let d = spec.width;
    let patches = spec.tokens_per_frame - 1;
    let mut concept_rng = Rng::fork(spec.seed, 0);
    let concepts: Vec<Vec<f64>> = (0..spec.concept_pool).map(|_| concept_rng.unit_vector(d)).collect();
    let (a, b) = (spec.redundancy.sqrt(), (1.0 - spec.redundancy).sqrt());
    let pairs = (0..spec.num_pairs)
        .map(|pair_id| {
            let mut rng = Rng::fork(spec.seed, 1 + pair_id as u64);
            let mut pool: Vec<usize> = (0..spec.concept_pool).collect();
            rng.shuffle(&mut pool);
            let subjects = pool[..spec.subject_count].to_vec();
            let base: Vec<Vec<f64>> = (0..patches)
                .map(|p| {
                    let c = &concepts[subjects[subject_of_patch(p, patches, spec.subject_count)]];
                    let jitter = rng.unit_vector(d);
                    unit(c.iter().zip(&jitter).map(|(x, j)| x + BASE_JITTER * j).collect())
                })
                .collect();
            let frames = (0..spec.frames)
                .map(|_| {
                    let mut m = Mat::zeros(patches, d);
                    for (p, bp) in base.iter().enumerate() {
                        let noise = rng.unit_vector(d);
                        let tok = unit(bp.iter().zip(&noise).map(|(x, n)| a * x + b * n).collect());
                        for (o, v) in m.row_mut(p).iter_mut().zip(tok) {
                            *o = v as f32;
                        }
                    }
                    m
                })
                .collect();
            let mut text = vec![Tokenizer::BOS];
            text.extend(subjects.iter().map(|&s| Tokenizer::FIRST_WORD + s as u32));
            text.push(Tokenizer::EOS);
            SynthPair { pair_id, subjects, text, video: VideoInput { frames } }
        })
        .collect();
    Ok(Dataset { spec: spec.clone(), pairs })
}

/// Mean cosine similarity between the same patch position in different
/// frames, averaged over every video.
pub fn mean_inter_frame_cosine(data: &Dataset) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for pair in &data.pairs {
        let frames = &pair.video.frames;
        for f in 1..frames.len() {
            for p in 0..frames[f].rows() {
                let (x, y) = (frames[f - 1].row(p), frames[f].row(p));
                let dot: f64 = x.iter().zip(y).map(|(a, b)| *a as f64 * *b as f64).sum();
                let nx: f64 = x.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
                let ny: f64 = y.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
                sum += dot / (nx * ny);
                count += 1;
            }
        }
    }
    sum / count.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Preset;
    use crate::tokens::{apply_merge, bipartite_soft_match, ClsPolicy, MergeMode, TokenSet};

    fn spec(rho: f64, seed: u64) -> SynthSpec {
        SynthSpec {
            num_pairs: 8,
            frames: 6,
            tokens_per_frame: 17,
            width: 48,
            redundancy: rho,
            subject_count: 3,
            concept_pool: 10,
            seed,
        }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(generate(&spec(0.6, 3)).unwrap(), generate(&spec(0.6, 3)).unwrap());
        assert_ne!(generate(&spec(0.6, 3)).unwrap(), generate(&spec(0.6, 4)).unwrap());
    }

    #[test]
    fn full_redundancy_repeats_frames() {
        let data = generate(&spec(1.0, 1)).unwrap();
        for p in &data.pairs {
            assert!(p.video.frames.iter().all(|f| f == &p.video.frames[0]));
        }
    }

    #[test]
    fn zero_redundancy_is_uncorrelated() {
        let mut s = spec(0.0, 2);
        s.num_pairs = 4;
        let data = generate(&s).unwrap();
        // 4 videos x 5 frame gaps x 16 patches = 320 pairs per seed
        let mut all = Vec::new();
        for seed in 0..4 {
            s.seed = seed;
            all.push(mean_inter_frame_cosine(&generate(&s).unwrap()));
        }
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        assert!(mean.abs() < 0.05, "{mean}");
        assert!(mean_inter_frame_cosine(&data).abs() < 0.05);
    }

    #[test]
    fn similarity_grows_with_redundancy() {
        let c: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0]
            .iter()
            .map(|&r| mean_inter_frame_cosine(&generate(&spec(r, 5)).unwrap()))
            .collect();
        assert!(c.windows(2).all(|w| w[0] < w[1]), "{c:?}");
        assert!((c[4] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn text_names_the_subjects() {
        let data = generate(&spec(0.5, 7)).unwrap();
        for p in &data.pairs {
            assert_eq!(p.text.len(), 5);
            assert_eq!(p.text[1..4].iter().map(|&t| (t - 3) as usize).collect::<Vec<_>>(), p.subjects);
            assert_eq!(p.video.frames.len(), 6);
            assert_eq!(p.video.frames[0].shape(), (16, 48));
        }
    }

    #[test]
    fn micro_spec_fits_micro_text_length() {
        let cfg = Preset::Micro.config();
        let data = generate(&SynthSpec::for_config(&cfg, 32, 0.8, 0)).unwrap();
        assert!(data.pairs.iter().all(|p| p.text.len() <= cfg.text_max_len));
        assert!(data.pairs.iter().all(|p| p.text.iter().all(|&t| (t as usize) < cfg.text_vocab_size)));
    }

    #[test]
    fn duplicate_frames_merge_losslessly() {
        let data = generate(&spec(1.0, 9)).unwrap();
        let video = &data.pairs[0].video;
        // Frames as token sets, a zero CLS row first (17 tokens per frame,
        // odd, so each token's twin lands in the other partition).
        let sets: Vec<TokenSet<f32>> = video
            .frames
            .iter()
            .enumerate()
            .map(|(f, m)| {
                let cls = Mat::zeros(1, m.cols());
                TokenSet::from_frame(Mat::vstack(&[&cls, m]).unwrap(), f as u32)
            })
            .collect();
        for group in [2usize, 3] {
            let clip = TokenSet::concat(&sets[..group]).unwrap();
            let originals: Vec<&[f32]> = (0..clip.len()).map(|i| clip.features().row(i)).collect();
            for keep in [0.5, 0.6, 0.7, 0.8, 0.9, 1.0] {
                // One matching round can merge at most the eligible A side.
                let eligible = (0..clip.len()).step_by(2).filter(|&i| !clip.is_cls()[i]).count();
                let merges = (clip.len() - crate::schedule::keep_count(clip.len(), keep)).min(eligible);
                let plan = bipartite_soft_match(&clip, merges, ClsPolicy::Protect).unwrap();
                let merged = apply_merge(&clip, &plan, MergeMode::SizeWeighted).unwrap();
                for i in 0..merged.len() {
                    let row = merged.features().row(i);
                    assert!(
                        originals.iter().any(|o| o.iter().zip(row).all(|(a, b)| (a - b).abs() <= 1e-6)),
                        "group {group} keep {keep}"
                    );
                }
            }
        }
    }
}
