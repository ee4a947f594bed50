use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::TokenSet;
use crate::error::{contract, Result};
use crate::numerics::{Mat, Scalar};

/// How CLS tokens take part in matching.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsPolicy {
    /// CLS tokens are never sources nor destinations.
    #[default]
    Protect,
    /// CLS tokens are matched like any other token.
    Participate,
}

/// How a destination and its sources are averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    /// Mean weighted by token size; conserves `Σ size * feature`.
    #[default]
    SizeWeighted,
    /// Unweighted mean, kept for ablations.
    Plain,
}

/// A set of `(source, destination)` merges over one token set.
///
/// Sources are distinct and no source is also a destination, so applying
/// the plan removes exactly `len()` tokens. Pairs are stored sorted by
/// source index.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergePlan {
    pairs: Vec<(usize, usize)>,
}

impl MergePlan {
    pub fn new(mut pairs: Vec<(usize, usize)>) -> Result<Self> {
        pairs.sort_unstable();
        let sources: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
        if sources.len() != pairs.len() {
            return contract("MergePlan::new", "duplicate source index");
        }
        if let Some(&(s, d)) = pairs.iter().find(|(_, d)| sources.contains(d)) {
            return contract("MergePlan::new", format!("destination {d} of source {s} is also a source"));
        }
        Ok(Self { pairs })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Checks that every index addresses a token of a set of length `len`.
    pub fn validate_for(&self, len: usize) -> Result<()> {
        match self.pairs.iter().find(|&&(s, d)| s >= len || d >= len) {
            Some(&(s, d)) => contract("apply_merge", format!("pair ({s} -> {d}) out of range for {len} tokens")),
            None => Ok(()),
        }
    }

    /// Linear averaging weights realised by this plan.
    pub fn weights(&self, sizes: &[u32], mode: MergeMode) -> Result<MergeWeights> {
        self.validate_for(sizes.len())?;
        let n = sizes.len();
        let mut is_source = vec![false; n];
        let mut sources_of: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(s, d) in &self.pairs {
            is_source[s] = true;
            sources_of[d].push(s);
        }
        let mut groups = Vec::with_capacity(n - self.pairs.len());
        for d in (0..n).filter(|&i| !is_source[i]) {
            let members: Vec<usize> = std::iter::once(d).chain(sources_of[d].iter().copied()).collect();
            let group = match mode {
                MergeMode::SizeWeighted => {
                    let total: f64 = members.iter().map(|&i| sizes[i] as f64).sum();
                    members.iter().map(|&i| (i, sizes[i] as f64 / total)).collect()
                }
                MergeMode::Plain => {
                    let w = 1.0 / members.len() as f64;
                    members.iter().map(|&i| (i, w)).collect()
                }
            };
            groups.push(group);
        }
        Ok(MergeWeights { inputs: n, groups })
    }
}

/// Output token `k` equals `Σ w * x[i]` over `groups[k]`.
///
/// Every input index appears in exactly one group, so the backward pass
/// is a scatter.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeWeights {
    inputs: usize,
    groups: Vec<Vec<(usize, f64)>>,
}

impl MergeWeights {
    pub fn identity(n: usize) -> Self {
        Self { inputs: n, groups: (0..n).map(|i| vec![(i, 1.0)]).collect() }
    }

    pub fn groups(&self) -> &[Vec<(usize, f64)>] {
        &self.groups
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.groups.len()
    }

    /// Forward averaging; sums are accumulated in `f64` in group order.
    pub fn apply<T: Scalar>(&self, x: &Mat<T>) -> Mat<T> {
        let d = x.cols();
        let mut out = Mat::zeros(self.groups.len(), d);
        let mut acc = vec![0.0f64; d];
        for (k, group) in self.groups.iter().enumerate() {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for &(i, w) in group {
                for (a, &v) in acc.iter_mut().zip(x.row(i)) {
                    *a += w * v.as_f64();
                }
            }
            for (o, &a) in out.row_mut(k).iter_mut().zip(&acc) {
                *o = T::from_f64(a);
            }
        }
        out
    }

    /// Transpose of [`apply`](Self::apply): routes output gradients back
    /// to every merged input.
    pub fn backward<T: Scalar>(&self, dy: &Mat<T>) -> Mat<T> {
        let mut dx = Mat::zeros(self.inputs, dy.cols());
        for (k, group) in self.groups.iter().enumerate() {
            for &(i, w) in group {
                let w = T::from_f64(w);
                for (o, &g) in dx.row_mut(i).iter_mut().zip(dy.row(k)) {
                    *o += w * g;
                }
            }
        }
        dx
    }
}

/// Splits token positions into set A (even positions) and set B (odd
/// positions) in the current concatenation order.
pub fn alternating_partition<T: Scalar>(ts: &TokenSet<T>) -> Result<(Vec<usize>, Vec<usize>)> {
    if ts.len() < 2 {
        return contract("alternating_partition", format!("need at least 2 tokens, got {}", ts.len()));
    }
    let a = (0..ts.len()).step_by(2).collect();
    let b = (1..ts.len()).step_by(2).collect();
    Ok((a, b))
}

/// Bipartite soft matching on the token features themselves.
pub fn bipartite_soft_match<T: Scalar>(ts: &TokenSet<T>, merge_count: usize, cls: ClsPolicy) -> Result<MergePlan> {
    bipartite_soft_match_by(ts, ts.features(), merge_count, cls)
}

/// Bipartite soft matching with similarity measured on `metric` (one row
/// per token, e.g. attention keys).
///
/// Every eligible A-token is paired with its most cosine-similar eligible
/// B-token (lower B index on ties); the `merge_count` pairs with the
/// highest similarity are kept (lower A index on ties). A zero metric row
/// has similarity 0 to everything.
pub fn bipartite_soft_match_by<T: Scalar>(
    ts: &TokenSet<T>,
    metric: &Mat<T>,
    merge_count: usize,
    cls: ClsPolicy,
) -> Result<MergePlan> {
    if merge_count == 0 {
        return Ok(MergePlan::empty());
    }
    if metric.rows() != ts.len() {
        return contract("bipartite_soft_match", format!("{} metric rows for {} tokens", metric.rows(), ts.len()));
    }
    let (set_a, set_b) = alternating_partition(ts)?;
    let eligible = |i: &usize| cls == ClsPolicy::Participate || !ts.is_cls()[*i];
    let set_a: Vec<usize> = set_a.into_iter().filter(eligible).collect();
    let set_b: Vec<usize> = set_b.into_iter().filter(eligible).collect();
    if merge_count > set_a.len() || set_b.is_empty() {
        return contract(
            "bipartite_soft_match",
            format!(
                "merge_count {merge_count} exceeds {} eligible A-tokens ({} eligible B-tokens)",
                set_a.len(),
                set_b.len()
            ),
        );
    }

    let unit = normalized_rows(metric);
    let d = metric.cols();
    let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(set_a.len());
    for &a in &set_a {
        let ra = &unit[a * d..(a + 1) * d];
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for &b in &set_b {
            let rb = &unit[b * d..(b + 1) * d];
            let s: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            if s > best.0 {
                best = (s, b);
            }
        }
        candidates.push((best.0, a, best.1));
    }
    candidates.sort_by(|x, y| match y.0.total_cmp(&x.0) {
        Ordering::Equal => x.1.cmp(&y.1),
        o => o,
    });
    MergePlan::new(candidates.into_iter().take(merge_count).map(|(_, a, b)| (a, b)).collect())
}

fn normalized_rows<T: Scalar>(m: &Mat<T>) -> Vec<f64> {
    let d = m.cols();
    let mut out = Vec::with_capacity(m.rows() * d);
    for r in 0..m.rows() {
        let row = m.row(r);
        let norm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
        out.extend(row.iter().map(|v| v.as_f64() * inv));
    }
    out
}

/// Applies a merge plan: each destination becomes the (size-weighted)
/// mean of itself and its sources, accumulates their sizes and origins,
/// keeps its own clip id, and the sources are dropped. Surviving tokens
/// keep their relative order.
pub fn apply_merge<T: Scalar>(ts: &TokenSet<T>, plan: &MergePlan, mode: MergeMode) -> Result<TokenSet<T>> {
    if plan.is_empty() {
        return Ok(ts.clone());
    }
    let weights = plan.weights(ts.sizes(), mode)?;
    let features = weights.apply(ts.features());
    let mut sizes = Vec::with_capacity(weights.outputs());
    let mut clip_id = Vec::with_capacity(weights.outputs());
    let mut origins = Vec::with_capacity(weights.outputs());
    let mut is_cls = Vec::with_capacity(weights.outputs());
    for group in weights.groups() {
        let dest = group[0].0;
        sizes.push(group.iter().map(|&(i, _)| ts.sizes()[i]).sum());
        clip_id.push(ts.clip_ids()[dest]);
        let mut o: Vec<_> = group.iter().flat_map(|&(i, _)| ts.origins()[i].iter().copied()).collect();
        o.sort_unstable();
        origins.push(o);
        is_cls.push(group.iter().any(|&(i, _)| ts.is_cls()[i]));
    }
    TokenSet::new(features, sizes, clip_id, origins, is_cls)
}
