use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::TokenSet;
use crate::numerics::Scalar;

/// Which original patches each surviving token covers.
///
/// Serialised as JSON for external plotting. Patch indices in `origins`
/// are 0-based positions in the `grid x grid` patch grid (row-major); CLS
/// positions are reported separately in `cls_frames`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeMap {
    pub frames: u32,
    pub grid: u32,
    pub tokens: Vec<MergeMapToken>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeMapToken {
    /// Index of the token in the concatenated final token list.
    pub token: usize,
    pub clip: u32,
    pub size: u32,
    /// `[frame, patch]` pairs.
    pub origins: Vec<[u32; 2]>,
    /// Frames whose CLS token was folded into this token.
    pub cls_frames: Vec<u32>,
}

impl MergeMap {
    pub fn from_token_sets<T: Scalar>(sets: &[TokenSet<T>], frames: u32, grid: u32) -> Self {
        let mut tokens = Vec::new();
        for ts in sets {
            for i in 0..ts.len() {
                let mut origins = Vec::new();
                let mut cls_frames = Vec::new();
                for &(f, p) in &ts.origins()[i] {
                    if p == 0 {
                        cls_frames.push(f);
                    } else {
                        origins.push([f, p - 1]);
                    }
                }
                tokens.push(MergeMapToken {
                    token: tokens.len(),
                    clip: ts.clip_ids()[i],
                    size: ts.sizes()[i],
                    origins,
                    cls_frames,
                });
            }
        }
        Self { frames, grid, tokens }
    }

    /// True when every `(frame, patch)` of the grid appears exactly once.
    pub fn is_exact_partition(&self) -> bool {
        let mut seen = BTreeSet::new();
        for t in &self.tokens {
            for o in &t.origins {
                if o[0] >= self.frames || o[1] >= self.grid * self.grid || !seen.insert(*o) {
                    return false;
                }
            }
        }
        seen.len() == (self.frames * self.grid * self.grid) as usize
    }
}
