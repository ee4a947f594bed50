//! Training, benchmarking, data export, output paths and determinism.

mod common;

use common::{assert_schema, bin, json, run, stderr, strip_timing};
use serde_json::Value;
use tempme::container::{dataset_from_container, trainable_from_container, weights_from_container, Container};
use tempme::encoder::{EncoderWeights, Preset};
use tempme::synthgen::{generate, SynthSpec};

#[test]
fn seeded_training_run_meets_its_targets() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("train.jsonl");
    let save = dir.path().join("adapters.bin");
    let r = json(&[
        "train",
        "--preset",
        "micro",
        "--pairs",
        "32",
        "--steps",
        "200",
        "--seed",
        "7",
        "--log",
        log.to_str().unwrap(),
        "--save",
        save.to_str().unwrap(),
    ]);
    assert_schema("train", &r);
    let ratio = r["loss_ratio"].as_f64().unwrap();
    assert!(ratio <= 0.5, "loss ratio {ratio}");
    let r1 = r["final_metrics"]["R@1"].as_f64().unwrap();
    assert!(r1 >= 4.0 * r["chance_r1"].as_f64().unwrap(), "R@1 {r1}");
    assert_eq!(r["backbone_unchanged"], true);

    let lines: Vec<Value> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).expect("log line is JSON"))
        .collect();
    assert_eq!(lines.len(), 200);
    for (i, l) in lines.iter().enumerate() {
        assert_schema("train_log_line", l);
        assert_eq!(l["step"], i);
    }
    assert_eq!(lines[0]["loss"], r["initial_loss"]);

    let (params, cfg, sched) = trainable_from_container(&Container::load(&save).unwrap()).unwrap();
    assert_eq!(cfg, Preset::Micro.config());
    assert_eq!(sched.to_string(), r["schedule"].as_str().unwrap());
    assert!(!params.lora.is_zero_delta());
}

#[test]
fn training_refuses_large_presets_and_reports_divergence() {
    let o = run(&["train", "--preset", "b32", "--steps", "1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = run(&["train", "--pairs", "4", "--steps", "50", "--lr", "1e300", "--momentum", "0"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverge"), "{}", stderr(&o));
}

#[test]
fn bench_report_and_repeat_floor() {
    let r = json(&["bench", "--preset", "micro", "--repeats", "3", "--batch", "2"]);
    assert_schema("bench", &r);
    assert_eq!(r["scheduled"]["wall_seconds"].as_array().unwrap().len(), 3);
    assert!(r["speedup"].as_f64().unwrap() > 0.0);
    let o = run(&["bench", "--repeats", "1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn synth_and_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.bin");
    let r = json(&[
        "synth",
        "--preset",
        "micro",
        "--pairs",
        "6",
        "--redundancy",
        "0.4",
        "--seed",
        "3",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_schema("synth", &r);
    let loaded = dataset_from_container(&Container::load(&data).unwrap()).unwrap();
    let fresh = generate(&SynthSpec::for_config(&Preset::Micro.config(), 6, 0.4, 3)).unwrap();
    assert_eq!(loaded.spec, fresh.spec);
    for (a, b) in loaded.pairs.iter().zip(&fresh.pairs) {
        assert_eq!((a.pair_id, &a.subjects, &a.text, &a.video), (b.pair_id, &b.subjects, &b.text, &b.video));
    }
    assert_eq!(r["bytes"].as_u64().unwrap(), std::fs::metadata(&data).unwrap().len());

    let weights = dir.path().join("w.bin");
    let r = json(&["export-weights", "--preset", "toy", "--seed", "5", "--out", weights.to_str().unwrap()]);
    assert_schema("export_weights", &r);
    let loaded = weights_from_container(&Container::load(&weights).unwrap()).unwrap();
    assert_eq!(loaded, EncoderWeights::<f32>::init(&Preset::Toy.config(), 5).unwrap());
    assert_eq!(r["parameters"].as_u64().unwrap() as usize, loaded.param_count());
}

#[test]
fn relative_paths_resolve_against_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .env("TEMPME_OUTPUT_DIR", dir.path())
        .args(["--format", "json", "--output", "reports/tokens.json", "tokens"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
    let written: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("reports/tokens.json")).unwrap()).unwrap();
    assert_eq!(written["final_token_count"], 97);

    let o = bin()
        .env("TEMPME_OUTPUT_DIR", dir.path())
        .args(["synth", "--preset", "micro", "--pairs", "2", "--out", "d.bin"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("d.bin").exists());

    // Absolute paths ignore the directory.
    let abs = dir.path().join("abs.txt");
    let o = bin()
        .env("TEMPME_OUTPUT_DIR", "/nonexistent")
        .args(["--output", abs.to_str().unwrap(), "flops"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_to_string(abs).unwrap().contains("GFLOPs"));
}

#[test]
fn unwritable_output_exits_three() {
    let o = run(&["--output", "/dev/null/report.txt", "tokens"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn repeated_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["tokens", "--preset", "b16"],
        vec!["flops"],
        vec!["ablate"],
        vec!["forward", "--preset", "toy", "--seed", "4"],
        vec!["train", "--pairs", "8", "--steps", "15", "--seed", "2"],
        vec!["bench", "--preset", "micro", "--repeats", "3"],
    ];
    for args in &cases {
        let a = strip_timing(json(args));
        let b = strip_timing(json(args));
        assert_eq!(a, b, "{args:?}");
        if matches!(args[0], "forward" | "train" | "bench") {
            let mut par = args.clone();
            par.push("--parallel");
            let c = strip_timing(json(&par));
            let strip_flag = |mut v: Value| {
                if let Some(s) = v.get_mut("settings").and_then(|s| s.as_object_mut()) {
                    s.remove("parallel");
                }
                v
            };
            assert_eq!(strip_flag(a), strip_flag(c), "{args:?} --parallel");
        }
    }

    for (name, args) in [
        ("synth", vec!["synth", "--pairs", "4", "--seed", "9"]),
        ("export", vec!["export-weights", "--preset", "micro", "--seed", "9"]),
    ] {
        let paths: Vec<_> = (0..2).map(|i| dir.path().join(format!("{name}{i}.bin"))).collect();
        for p in &paths {
            let mut full = args.clone();
            full.extend(["--out", p.to_str().unwrap()]);
            assert!(run(&full).status.success());
        }
        assert_eq!(std::fs::read(&paths[0]).unwrap(), std::fs::read(&paths[1]).unwrap(), "{name}");
    }
}
