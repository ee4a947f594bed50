//! Complexity accounting: MAC-based GFLOPs estimates and wall-clock
//! throughput measurement of the video encoder.

mod bench;
mod flops;

pub use bench::{bench_forward, median, BenchReport, BenchSettings, ThroughputStats};
pub use flops::{
    ablation_table, ablation_to_table, estimate_flops, AblationRow, FlopsReport, LayerFlops, ABLATION_SCHEDULES,
};
