use serde::{Deserialize, Serialize};

use super::SimilarityMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    TextToVideo,
    VideoToText,
}

/// Recall percentages and mean 1-based rank of the true match.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    #[serde(rename = "R@1")]
    pub r1: f64,
    #[serde(rename = "R@5")]
    pub r5: f64,
    #[serde(rename = "R@10")]
    pub r10: f64,
    #[serde(rename = "R-Sum")]
    pub r_sum: f64,
    #[serde(rename = "MnR")]
    pub mean_rank: f64,
}

/// 1-based rank of the true match for every query. A candidate with an
/// equal score outranks the true match only if its index is lower.
pub fn match_ranks(sim: &SimilarityMatrix, direction: Direction) -> Vec<usize> {
    let n = sim.size();
    let score = |query: usize, cand: usize| match direction {
        Direction::TextToVideo => sim.get(query, cand),
        Direction::VideoToText => sim.get(cand, query),
    };
    (0..n)
        .map(|q| {
            let target = score(q, q);
            1 + (0..n).filter(|&c| score(q, c) > target || (score(q, c) == target && c < q)).count()
        })
        .collect()
}

pub fn metrics_from_ranks(ranks: &[usize]) -> RetrievalMetrics {
    let n = ranks.len().max(1) as f64;
    let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    let (r1, r5, r10) = (recall(1), recall(5), recall(10));
    RetrievalMetrics { r1, r5, r10, r_sum: r1 + r5 + r10, mean_rank: ranks.iter().sum::<usize>() as f64 / n }
}

pub fn retrieval_metrics(sim: &SimilarityMatrix, direction: Direction) -> RetrievalMetrics {
    metrics_from_ranks(&match_ranks(sim, direction))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn matrix(n: usize, f: impl Fn(usize, usize) -> f64) -> SimilarityMatrix {
        SimilarityMatrix::new(n, (0..n * n).map(|k| f(k / n, k % n)).collect(), 0.05).unwrap()
    }

    /// Stable descending sort keeps the earlier index first among equals.
    fn oracle_ranks(sim: &SimilarityMatrix, direction: Direction) -> Vec<usize> {
        let n = sim.size();
        (0..n)
            .map(|q| {
                let scores: Vec<f64> = (0..n)
                    .map(|c| match direction {
                        Direction::TextToVideo => sim.get(q, c),
                        Direction::VideoToText => sim.get(c, q),
                    })
                    .collect();
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
                1 + order.iter().position(|&c| c == q).unwrap()
            })
            .collect()
    }

    #[test]
    fn diagonal_dominant_is_perfect() {
        let m = retrieval_metrics(&matrix(6, |i, j| if i == j { 1.0 } else { 0.1 * j as f64 }), Direction::TextToVideo);
        assert_eq!((m.r1, m.r5, m.r10, m.mean_rank), (100.0, 100.0, 100.0, 1.0));
        assert_eq!(m.r_sum, 300.0);
    }

    #[test]
    fn worst_case_ranks_last() {
        let sim = matrix(10, |i, j| if i == j { -1.0 } else { 0.5 });
        let ranks = match_ranks(&sim, Direction::TextToVideo);
        assert!(ranks.iter().all(|&r| r == 10));
        let m = metrics_from_ranks(&ranks);
        assert_eq!((m.r1, m.r5, m.r10, m.mean_rank), (0.0, 0.0, 100.0, 10.0));
    }

    #[test]
    fn ties_favour_earlier_index() {
        let sim = matrix(3, |_, _| 0.5);
        assert_eq!(match_ranks(&sim, Direction::TextToVideo), vec![1, 2, 3]);
    }

    #[test]
    fn ranks_match_sort_oracle() {
        let mut rng = Rng::new(8);
        for trial in 0..500 {
            let n = 1 + rng.below(12);
            // Coarse values make ties common.
            let coarse = trial % 2 == 0;
            let sim = matrix(n, |_, _| 0.0);
            let values = (0..n * n).map(|_| if coarse { rng.below(4) as f64 / 4.0 } else { rng.uniform() }).collect();
            let sim = SimilarityMatrix::new(n, values, sim.temperature()).unwrap();
            for dir in [Direction::TextToVideo, Direction::VideoToText] {
                let ranks = match_ranks(&sim, dir);
                assert_eq!(ranks, oracle_ranks(&sim, dir));
                let m = metrics_from_ranks(&ranks);
                assert!(m.r1 <= m.r5 && m.r5 <= m.r10 && m.r10 <= 100.0 && m.mean_rank >= 1.0);
            }
        }
    }
}
