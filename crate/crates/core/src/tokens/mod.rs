//! Token sets and the bipartite soft matching merge primitive.
//!
//! A [`TokenSet`] carries, next to its feature rows, the bookkeeping that
//! merging needs: how many original tokens each row stands for, which clip
//! it belongs to, which original `(frame, patch)` positions it covers, and
//! whether it is a frame's CLS token. Patch index `0` is the CLS position;
//! grid patches are numbered `1..N` in row-major order.

mod matching;
mod merge_map;

pub use matching::{
    alternating_partition, apply_merge, bipartite_soft_match, bipartite_soft_match_by, ClsPolicy, MergeMode, MergePlan,
    MergeWeights,
};
pub use merge_map::{MergeMap, MergeMapToken};

use crate::error::{contract, Result};
use crate::numerics::{Mat, Scalar};

/// An original token position: `(frame_index, patch_index)`.
pub type Origin = (u32, u32);

/// Variable-length collection of token features plus merge bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet<T = f32> {
    features: Mat<T>,
    sizes: Vec<u32>,
    clip_id: Vec<u32>,
    origins: Vec<Vec<Origin>>,
    is_cls: Vec<bool>,
}

impl<T: Scalar> TokenSet<T> {
    /// Builds a token set from parts, checking lengths and that every
    /// size is positive.
    pub fn new(
        features: Mat<T>,
        sizes: Vec<u32>,
        clip_id: Vec<u32>,
        origins: Vec<Vec<Origin>>,
        is_cls: Vec<bool>,
    ) -> Result<Self> {
        let t = features.rows();
        if sizes.len() != t || clip_id.len() != t || origins.len() != t || is_cls.len() != t {
            return contract("TokenSet::new", "per-token vectors must match the feature rows");
        }
        if sizes.contains(&0) {
            return contract("TokenSet::new", "token sizes must be positive");
        }
        Ok(Self { features, sizes, clip_id, origins, is_cls })
    }

    /// Tokens of one freshly embedded frame: row 0 is the CLS token, row
    /// `p` is grid patch `p`. Every token has size 1 and clip id `frame`.
    pub fn from_frame(features: Mat<T>, frame: u32) -> Self {
        let t = features.rows();
        Self {
            sizes: vec![1; t],
            clip_id: vec![frame; t],
            origins: (0..t as u32).map(|p| vec![(frame, p)]).collect(),
            is_cls: (0..t).map(|p| p == 0).collect(),
            features,
        }
    }

    /// Concatenates sets in order.
    pub fn concat(sets: &[Self]) -> Result<Self> {
        if sets.is_empty() {
            return contract("TokenSet::concat", "no token sets");
        }
        let feats: Vec<&Mat<T>> = sets.iter().map(|s| &s.features).collect();
        let features = Mat::vstack(&feats)?;
        Ok(Self {
            features,
            sizes: sets.iter().flat_map(|s| s.sizes.iter().copied()).collect(),
            clip_id: sets.iter().flat_map(|s| s.clip_id.iter().copied()).collect(),
            origins: sets.iter().flat_map(|s| s.origins.iter().cloned()).collect(),
            is_cls: sets.iter().flat_map(|s| s.is_cls.iter().copied()).collect(),
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Mat<T> {
        &self.features
    }

    pub fn sizes(&self) -> &[u32] {
        &self.sizes
    }

    pub fn clip_ids(&self) -> &[u32] {
        &self.clip_id
    }

    pub fn origins(&self) -> &[Vec<Origin>] {
        &self.origins
    }

    pub fn is_cls(&self) -> &[bool] {
        &self.is_cls
    }

    pub fn cls_count(&self) -> usize {
        self.is_cls.iter().filter(|&&c| c).count()
    }

    pub fn total_size(&self) -> u64 {
        self.sizes.iter().map(|&s| s as u64).sum()
    }

    /// Same bookkeeping, new features of the same shape.
    pub fn with_features(&self, features: Mat<T>) -> Result<Self> {
        if features.rows() != self.len() {
            return contract("TokenSet::with_features", format!("{} rows for {} tokens", features.rows(), self.len()));
        }
        Ok(Self { features, ..self.clone() })
    }

    pub(crate) fn features_mut(&mut self) -> &mut Mat<T> {
        &mut self.features
    }

    /// Assigns every token to clip `id`.
    pub fn relabel_clip(&mut self, id: u32) {
        self.clip_id.iter_mut().for_each(|c| *c = id);
    }

    /// `Σ size_i * feature_i` accumulated in `f64`.
    pub fn weighted_feature_sum(&self) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.width()];
        for (i, &s) in self.sizes.iter().enumerate() {
            for (a, &v) in acc.iter_mut().zip(self.features.row(i)) {
                *a += s as f64 * v.as_f64();
            }
        }
        acc
    }

    pub fn cast<U: Scalar>(&self) -> TokenSet<U> {
        TokenSet {
            features: self.features.cast(),
            sizes: self.sizes.clone(),
            clip_id: self.clip_id.clone(),
            origins: self.origins.clone(),
            is_cls: self.is_cls.clone(),
        }
    }
}
