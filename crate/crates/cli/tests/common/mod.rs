#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub fn tpllm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpllm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("TPLLM_DATA_DIR")
        .output()
        .expect("tpllm runs")
}

/// Runs `tpllm` and panics with its stderr on a nonzero exit.
pub fn tpllm_ok(args: &[&str]) -> Output {
    let out = tpllm(args);
    assert!(
        out.status.success(),
        "tpllm {args:?} exited with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn schema_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(format!("{name}.schema.json"))
}

pub fn read_json(path: &Path) -> Value {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Validation errors of `instance` against the named shipped schema.
pub fn schema_errors(name: &str, instance: &Value) -> Vec<String> {
    let schema = read_json(&schema_path(name));
    let validator = jsonschema::validator_for(&schema).unwrap_or_else(|e| panic!("schema {name}: {e}"));
    validator.iter_errors(instance).map(|e| format!("{} at {}", e, e.instance_path)).collect()
}

pub fn assert_valid(name: &str, path: &Path) -> Value {
    let v = read_json(path);
    let errors = schema_errors(name, &v);
    assert!(errors.is_empty(), "{} fails {name} schema: {errors:?}", path.display());
    v
}

/// Writes the synthetic fixture into `dir` and returns (series, edges).
pub fn fixture(dir: &Path, nodes: usize, steps: usize) -> (String, String) {
    let d = dir.to_str().unwrap();
    tpllm_ok(&["prepare", "--synthetic", "--nodes", &nodes.to_string(), "--steps", &steps.to_string(), "--out", d]);
    (
        dir.join("series.csv").to_str().unwrap().to_owned(),
        dir.join("edges.csv").to_str().unwrap().to_owned(),
    )
}
