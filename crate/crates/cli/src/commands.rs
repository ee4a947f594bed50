use std::fmt::Write as _;
use std::time::Instant;

use serde_json::{json, Value};
use tempme::accounting::{ablation_table, ablation_to_table, bench_forward, estimate_flops, BenchSettings};
use tempme::container::{
    dataset_to_container, trainable_to_container, weights_from_container, weights_to_container, Container,
};
use tempme::encoder::{encode_video, EncoderWeights, ForwardOptions, ModelConfig, Preset};
use tempme::retrieval::{train_toy, TrainSettings};
use tempme::schedule::{parse_schedule_with, predict_token_counts, MergeSchedule};
use tempme::synthgen::{generate, mean_inter_frame_cosine, SynthSpec};
use tempme::tokens::MergeMap;

use crate::output::{write_file, CliError, Report};
use crate::{AblateArgs, BenchArgs, ExportArgs, ForwardArgs, ModelArgs, SynthArgs, TrainArgs};

/// Width used for live b32/b16 passes unless told otherwise.
const NARROW_WIDTH: usize = 64;
const NARROW_HEADS: usize = 4;

fn preset(name: &str) -> Result<Preset, CliError> {
    Preset::parse(name)
        .ok_or_else(|| CliError::Usage(format!("unknown preset {name:?}; expected b32, b16, toy or micro")))
}

fn schedule(text: &str, p: Preset) -> Result<MergeSchedule, CliError> {
    parse_schedule_with(text, p.schedule_defaults()).map_err(|e| match e {
        tempme::Error::Parse { column, msg } => CliError::Schedule { text: text.to_string(), column, msg },
        other => other.into(),
    })
}

/// Preset config with the frame count and schedule resolved.
fn model(a: &ModelArgs, default: Preset) -> Result<(Preset, ModelConfig, MergeSchedule), CliError> {
    let p = match &a.preset {
        Some(name) => preset(name)?,
        None => default,
    };
    let sched = schedule(a.schedule.as_deref().unwrap_or(p.default_schedule()), p)?;
    let frames = a.frames.unwrap_or(sched.frames);
    if frames != sched.frames {
        return Err(CliError::Usage(format!("--frames {frames} but the schedule has {} frames", sched.frames)));
    }
    let cfg = p.config().with_frames(frames);
    cfg.validate()?;
    Ok((p, cfg, sched))
}

pub fn tokens(a: &ModelArgs) -> Result<Report, CliError> {
    let (p, cfg, sched) = model(a, Preset::B32)?;
    let rep = predict_token_counts(&cfg, &sched)?;
    let mut json = serde_json::to_value(&rep)?;
    json["command"] = json!("tokens");
    json["preset"] = json!(p.name());
    json["max_attention_capacity"] = json!(rep.max_attention_capacity());
    Ok(Report { table: format!("preset: {}\n{}", p.name(), rep.to_table()), json })
}

pub fn flops(a: &ModelArgs) -> Result<Report, CliError> {
    let (p, cfg, sched) = model(a, Preset::B32)?;
    let rep = estimate_flops(&cfg, &sched)?;
    let json = json!({
        "command": "flops",
        "preset": p.name(),
        "schedule": rep.schedule,
        "frames": cfg.frames,
        "gflops": rep.gflops,
        "baseline_gflops": rep.baseline_gflops,
        "fraction": rep.fraction,
        "total_macs": rep.total_macs,
        "patch_embed_macs": rep.patch_embed,
        "final_tokens": rep.tokens.final_summary(),
        "layers": rep.layers,
    });
    let mut table = format!("preset: {}\n{}", p.name(), rep.to_table());
    let _ = writeln!(table, "baseline GFLOPs: {:.1}", rep.baseline_gflops);
    Ok(Report { json, table })
}

pub fn ablate(a: &AblateArgs) -> Result<Report, CliError> {
    let p = preset(&a.preset)?;
    let rows = ablation_table(&p.config(), p.schedule_defaults())?;
    let d = p.schedule_defaults();
    let ratios = format!("r={} Rc={} Ri={}", d.img_r, d.keep_cross, d.keep_intra);
    let json = json!({ "command": "ablate", "preset": p.name(), "ratios": ratios, "rows": rows });
    let table = format!("preset: {} ({ratios})\n{}", p.name(), ablation_to_table(&rows));
    Ok(Report { json, table })
}

fn live_config(
    p: Preset,
    cfg: ModelConfig,
    width: Option<usize>,
    heads: Option<usize>,
    full: bool,
) -> (ModelConfig, bool) {
    let big = matches!(p, Preset::B32 | Preset::B16);
    match (width, full) {
        (Some(w), _) => (cfg.narrowed(w, heads.unwrap_or(NARROW_HEADS)), true),
        (None, false) if big => (cfg.narrowed(NARROW_WIDTH, heads.unwrap_or(NARROW_HEADS)), true),
        _ => (cfg, false),
    }
}

pub fn forward(a: &ForwardArgs) -> Result<Report, CliError> {
    let (p, cfg, sched) = model(&a.model, Preset::B32)?;
    let (w, narrowed) = match &a.weights {
        Some(path) => {
            let w = weights_from_container(&Container::load(crate::output::resolve(path))?)?;
            if w.config.frames != cfg.frames || w.config.tokens_per_frame() != cfg.tokens_per_frame() {
                return Err(CliError::Usage("weight file geometry differs from the preset".into()));
            }
            let narrowed = w.config.width != cfg.width;
            (w, narrowed)
        }
        None => {
            let (cfg, narrowed) = live_config(p, cfg, a.width, a.heads, a.full_width);
            (EncoderWeights::<f32>::init(&cfg, a.seed)?, narrowed)
        }
    };
    let cfg = w.config.clone();
    let data = generate(&SynthSpec::for_config(&cfg, 1, a.redundancy, a.seed))?;
    let predicted = predict_token_counts(&cfg, &sched)?;
    let start = Instant::now();
    let out = encode_video(
        &w,
        None,
        None,
        &sched,
        &data.pairs[0].video,
        &ForwardOptions { parallel: a.parallel, replay: None },
    )?;
    let wall = start.elapsed().as_secs_f64();
    let matches = out.trace == predicted.layers;
    let norm = out.embedding.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let total: usize = out.final_tokens.iter().map(|t| t.len()).sum();

    let mut merge_map_path = None;
    let mut partition_exact = None;
    if let Some(path) = &a.export_merge_map {
        let map = MergeMap::from_token_sets(&out.final_tokens, cfg.frames as u32, cfg.patch_grid as u32);
        partition_exact = Some(map.is_exact_partition());
        let written = write_file(path, (serde_json::to_string_pretty(&map)? + "\n").as_bytes())?;
        merge_map_path = Some(written.display().to_string());
    }

    let json = json!({
        "command": "forward",
        "preset": p.name(),
        "schedule": sched.to_string(),
        "seed": a.seed,
        "redundancy": a.redundancy,
        "model": { "width": cfg.width, "heads": cfg.heads, "layers": cfg.num_layers, "frames": cfg.frames, "narrowed": narrowed },
        "layers": out.trace,
        "matches_predictor": matches,
        "final_tokens": predicted.final_summary(),
        "final_token_count": total,
        "embedding_norm": norm,
        "merge_map": merge_map_path,
        "merge_map_partition_exact": partition_exact,
        "timing": { "wall_seconds": wall },
    });

    let mut table = String::new();
    let _ = writeln!(table, "preset: {} (width {}{})", p.name(), cfg.width, if narrowed { ", narrowed" } else { "" });
    let live = tempme::schedule::TokenCountReport { layers: out.trace.clone(), ..predicted.clone() };
    table.push_str(&live.to_table());
    let _ = writeln!(table, "matches predictor: {}", if matches { "yes" } else { "NO" });
    let _ = writeln!(table, "embedding norm: {norm:.6}");
    if let Some(path) = &merge_map_path {
        let _ = writeln!(table, "merge map: {path} (exact partition: {})", partition_exact.unwrap_or(false));
    }
    let _ = writeln!(table, "wall time (s, not deterministic): {wall:.4}");
    if !matches {
        return Err(CliError::Lib(tempme::Error::Contract {
            op: "forward",
            msg: format!("live trace differs from the predictor\n{table}"),
        }));
    }
    Ok(Report { json, table })
}

pub fn train(a: &TrainArgs) -> Result<Report, CliError> {
    let (p, cfg, sched) = model(&a.model, Preset::Micro)?;
    if matches!(p, Preset::B32 | Preset::B16) {
        return Err(CliError::Usage("training runs on the toy or micro presets".into()));
    }
    let w = EncoderWeights::<f32>::init(&cfg, a.seed)?;
    let data = generate(&SynthSpec::for_config(&cfg, a.pairs, a.redundancy, a.seed))?;
    let d = TrainSettings::default();
    let settings = TrainSettings {
        steps: a.steps,
        learning_rate: a.lr.unwrap_or(d.learning_rate),
        momentum: a.momentum.unwrap_or(d.momentum),
        temperature: a.temperature.unwrap_or(d.temperature),
        seed: a.seed,
        parallel: a.parallel,
    };
    let before = w.clone();
    let out = train_toy(&w, &data, &sched, &settings)?;
    let frozen = w == before;

    let mut log_path = None;
    if let Some(path) = &a.log {
        let mut text = String::new();
        for e in &out.log {
            text.push_str(&serde_json::to_string(e)?);
            text.push('\n');
        }
        log_path = Some(write_file(path, text.as_bytes())?.display().to_string());
    }
    let mut save_path = None;
    if let Some(path) = &a.save {
        let bytes = trainable_to_container(&out.params, &cfg, &sched).to_bytes()?;
        save_path = Some(write_file(path, &bytes)?.display().to_string());
    }
    let ratio = out.final_loss / out.initial_loss;
    let chance = 100.0 / a.pairs as f64;
    let json = json!({
        "command": "train",
        "preset": p.name(),
        "schedule": sched.to_string(),
        "pairs": a.pairs,
        "steps": a.steps,
        "seed": a.seed,
        "settings": settings,
        "initial_loss": out.initial_loss,
        "final_loss": out.final_loss,
        "loss_ratio": ratio,
        "final_metrics": out.final_metrics,
        "chance_r1": chance,
        "backbone_unchanged": frozen,
        "log": log_path,
        "saved": save_path,
    });
    let m = out.final_metrics;
    let mut table = String::new();
    let _ = writeln!(table, "preset: {}  schedule: {}", p.name(), sched);
    let _ = writeln!(
        table,
        "pairs {}  steps {}  lr {}  momentum {}  tau {}",
        a.pairs, a.steps, settings.learning_rate, settings.momentum, settings.temperature
    );
    let _ = writeln!(table, "loss: {:.4} -> {:.4} (ratio {:.3})", out.initial_loss, out.final_loss, ratio);
    let _ = writeln!(
        table,
        "train R@1 {:.1}  R@5 {:.1}  R@10 {:.1}  MnR {:.2}  (chance R@1 {:.1})",
        m.r1, m.r5, m.r10, m.mean_rank, chance
    );
    let _ = writeln!(table, "backbone unchanged: {}", if frozen { "yes" } else { "NO" });
    Ok(Report { json, table })
}

pub fn bench(a: &BenchArgs) -> Result<Report, CliError> {
    let (p, cfg, sched) = model(&a.model, Preset::Toy)?;
    let (cfg, narrowed) = live_config(p, cfg, None, None, false);
    let settings =
        BenchSettings { batch: a.batch, repeats: a.repeats, warmup: a.warmup, seed: a.seed, parallel: a.parallel };
    let rep = bench_forward(&cfg, &sched, &settings)?;
    let predicted = estimate_flops(&cfg, &sched)?;
    let mut json = serde_json::to_value(&rep)?;
    json["command"] = json!("bench");
    json["preset"] = json!(p.name());
    json["narrowed"] = json!(narrowed);
    json["predicted_flops_fraction"] = json!(predicted.fraction);
    json["timing_note"] = json!("all timing fields are wall-clock measurements and vary between runs");
    let table = format!(
        "preset: {}{}\n{}predicted FLOPs fraction: {:.2}\n",
        p.name(),
        if narrowed { " (narrowed)" } else { "" },
        rep.to_table(),
        predicted.fraction
    );
    Ok(Report { json, table })
}

pub fn synth(a: &SynthArgs) -> Result<Report, CliError> {
    let p = preset(&a.preset)?;
    let (cfg, _) = live_config(p, p.config(), None, None, false);
    let spec = SynthSpec::for_config(&cfg, a.pairs, a.redundancy, a.seed);
    let data = generate(&spec)?;
    let c = dataset_to_container(&data);
    let bytes = c.to_bytes()?;
    let path = write_file(&a.out, &bytes)?;
    let cos = mean_inter_frame_cosine(&data);
    let json: Value = json!({
        "command": "synth",
        "preset": p.name(),
        "spec": spec,
        "path": path.display().to_string(),
        "bytes": bytes.len(),
        "mean_inter_frame_cosine": cos,
    });
    let table = format!(
        "wrote {} pairs ({} frames, {} patches of width {}) to {} ({} bytes)\nmean inter-frame cosine: {cos:.4}\n",
        a.pairs,
        spec.frames,
        spec.tokens_per_frame - 1,
        spec.width,
        path.display(),
        bytes.len()
    );
    Ok(Report { json, table })
}

pub fn export_weights(a: &ExportArgs) -> Result<Report, CliError> {
    let p = preset(&a.preset)?;
    let (cfg, narrowed) = live_config(p, p.config(), a.width, a.heads, false);
    let w = EncoderWeights::<f32>::init(&cfg, a.seed)?;
    let bytes = weights_to_container(&w)?.to_bytes()?;
    let path = write_file(&a.out, &bytes)?;
    let json = json!({
        "command": "export-weights",
        "preset": p.name(),
        "seed": a.seed,
        "narrowed": narrowed,
        "width": cfg.width,
        "parameters": w.param_count(),
        "path": path.display().to_string(),
        "bytes": bytes.len(),
    });
    let table = format!(
        "wrote {} parameters (width {}) to {} ({} bytes)\n",
        w.param_count(),
        cfg.width,
        path.display(),
        bytes.len()
    );
    Ok(Report { json, table })
}
