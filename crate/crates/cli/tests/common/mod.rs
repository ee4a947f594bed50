#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tempme"));
    c.env_remove("TEMPME_OUTPUT_DIR");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Runs with `--format json`, asserts exit 0 and parses stdout.
pub fn json(args: &[&str]) -> Value {
    let mut full = vec!["--format", "json"];
    full.extend_from_slice(args);
    let o = run(&full);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

pub fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas")
}

/// Panics with every violation when `doc` does not match the named schema.
pub fn assert_schema(name: &str, doc: &Value) {
    let path = schema_dir().join(format!("{name}.schema.json"));
    let schema: Value =
        serde_json::from_str(&std::fs::read_to_string(&path).expect("schema file")).expect("schema JSON");
    let v = jsonschema::validator_for(&schema).expect("schema compiles");
    let errors: Vec<String> = v.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{name} schema violations: {errors:#?}");
}

/// Removes the fields that legitimately vary between runs.
pub fn strip_timing(mut v: Value) -> Value {
    match &mut v {
        Value::Object(m) => {
            for key in ["timing", "baseline", "scheduled", "speedup", "path", "log", "saved", "merge_map"] {
                m.remove(key);
            }
            for val in m.values_mut() {
                *val = strip_timing(val.take());
            }
        }
        Value::Array(a) => {
            for val in a.iter_mut() {
                *val = strip_timing(val.take());
            }
        }
        _ => {}
    }
    v
}
