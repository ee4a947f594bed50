use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_video, EncoderWeights, ForwardOptions, ModelConfig, VideoInput};
use crate::error::{contract, Result};
use crate::numerics::{Mat, Rng};
use crate::schedule::MergeSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSettings {
    pub batch: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Encode the videos of a batch on the rayon pool.
    pub parallel: bool,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self { batch: 4, repeats: 5, warmup: 1, seed: 0, parallel: false }
    }
}

/// Wall-clock statistics of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputStats {
    /// Seconds per batch, one per repeat, in run order.
    pub wall_seconds: Vec<f64>,
    pub median_seconds: f64,
    pub videos_per_second_mean: f64,
    pub videos_per_second_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schedule: String,
    pub settings: BenchSettings,
    pub baseline: ThroughputStats,
    pub scheduled: ThroughputStats,
    /// Ratio of median batch times, baseline over scheduled.
    pub speedup: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

impl ThroughputStats {
    pub fn from_samples(wall_seconds: Vec<f64>, batch: usize) -> Self {
        let rates: Vec<f64> = wall_seconds.iter().map(|s| batch as f64 / s).collect();
        let n = rates.len() as f64;
        let mean = rates.iter().sum::<f64>() / n;
        let var = if rates.len() > 1 { rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self {
            median_seconds: median(&wall_seconds),
            wall_seconds,
            videos_per_second_mean: mean,
            videos_per_second_std: var.sqrt(),
        }
    }
}

fn random_batch(cfg: &ModelConfig, batch: usize, seed: u64) -> Vec<VideoInput<f32>> {
    (0..batch)
        .map(|b| {
            let mut rng = Rng::fork(seed, 100 + b as u64);
            VideoInput {
                frames: (0..cfg.frames)
                    .map(|_| Mat::randn(cfg.patches_per_frame(), cfg.patch_dim, 1.0, &mut rng))
                    .collect(),
            }
        })
        .collect()
}

fn run_batch(
    w: &EncoderWeights<f32>,
    sched: &MergeSchedule,
    videos: &[VideoInput<f32>],
    parallel: bool,
) -> Result<f64> {
    let opts = ForwardOptions::default();
    let start = Instant::now();
    if parallel {
        videos.par_iter().map(|v| encode_video(w, None, None, sched, v, &opts).map(|_| ())).collect::<Result<()>>()?;
    } else {
        for v in videos {
            encode_video(w, None, None, sched, v, &opts)?;
        }
    }
    Ok(start.elapsed().as_secs_f64())
}

/// Times `sched` against the identity schedule on random weights and
/// inputs. Runs alternate between the two configurations so that slow
/// drift affects both equally; warm-up runs are discarded.
pub fn bench_forward(cfg: &ModelConfig, sched: &MergeSchedule, settings: &BenchSettings) -> Result<BenchReport> {
    if settings.repeats < 3 {
        return contract("bench_forward", format!("repeats must be at least 3, got {}", settings.repeats));
    }
    if settings.batch == 0 {
        return contract("bench_forward", "batch must be positive");
    }
    let w = EncoderWeights::<f32>::init(cfg, settings.seed)?;
    let videos = random_batch(cfg, settings.batch, settings.seed);
    let identity = MergeSchedule::identity(sched.frames);
    for _ in 0..settings.warmup {
        run_batch(&w, &identity, &videos, settings.parallel)?;
        run_batch(&w, sched, &videos, settings.parallel)?;
    }
    let mut base = Vec::with_capacity(settings.repeats);
    let mut merged = Vec::with_capacity(settings.repeats);
    for _ in 0..settings.repeats {
        base.push(run_batch(&w, &identity, &videos, settings.parallel)?);
        merged.push(run_batch(&w, sched, &videos, settings.parallel)?);
    }
    let baseline = ThroughputStats::from_samples(base, settings.batch);
    let scheduled = ThroughputStats::from_samples(merged, settings.batch);
    Ok(BenchReport {
        schedule: sched.to_string(),
        settings: settings.clone(),
        speedup: baseline.median_seconds / scheduled.median_seconds,
        baseline,
        scheduled,
    })
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        format!(
            "schedule: {}\nbatch {} x {} repeats (wall clock)\n{:<10} {:>12} {:>16}\n{:<10} {:>12.4} {:>9.2} ± {:<6.2}\n{:<10} {:>12.4} {:>9.2} ± {:<6.2}\nspeedup: {:.2}x\n",
            self.schedule,
            self.settings.batch,
            self.settings.repeats,
            "config",
            "median s",
            "videos/s",
            "identity",
            self.baseline.median_seconds,
            self.baseline.videos_per_second_mean,
            self.baseline.videos_per_second_std,
            "merged",
            self.scheduled.median_seconds,
            self.scheduled.videos_per_second_mean,
            self.scheduled.videos_per_second_std,
            self.speedup
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Preset;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn stats_are_consistent() {
        let s = ThroughputStats::from_samples(vec![1.0, 2.0, 4.0], 4);
        assert_eq!(s.median_seconds, 2.0);
        assert!((s.videos_per_second_mean - (4.0 + 2.0 + 1.0) / 3.0).abs() < 1e-12);
        assert!(s.videos_per_second_std > 0.0);
    }

    #[test]
    fn too_few_repeats_rejected() {
        let cfg = Preset::Micro.config();
        let sched = MergeSchedule::identity(cfg.frames);
        let settings = BenchSettings { repeats: 1, ..Default::default() };
        assert!(bench_forward(&cfg, &sched, &settings).is_err());
    }

    #[test]
    fn micro_bench_runs() {
        let cfg = Preset::Micro.config();
        let sched = crate::schedule::parse_schedule(Preset::Micro.default_schedule()).unwrap();
        let settings = BenchSettings { batch: 2, repeats: 3, warmup: 0, ..Default::default() };
        let rep = bench_forward(&cfg, &sched, &settings).unwrap();
        assert_eq!(rep.baseline.wall_seconds.len(), 3);
        assert!(rep.speedup.is_finite() && rep.speedup > 0.0);
    }
}
