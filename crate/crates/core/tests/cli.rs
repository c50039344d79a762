use std::path::{Path, PathBuf};
use std::process::Command;

use dynlite::cli::{run_cli, EXIT_COMPILE, EXIT_MISMATCH, EXIT_OK, EXIT_RUNTIME};
use dynlite::graphir::fixtures::shape_of_matmul;
use dynlite::graphir::save_graph;
use dynlite::quantfp4::QuantizedWeight;
use serde_json::Value;
use tempfile::TempDir;

fn cli(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("dynlite").chain(args.iter().copied());
    let code = run_cli(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn json(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|e| panic!("not JSON ({e}): {text}"))
}

struct Model {
    _dir: TempDir,
    graph: PathBuf,
    weights: PathBuf,
}

impl Model {
    fn paths(&self) -> (&str, &str) {
        (self.graph.to_str().unwrap(), self.weights.to_str().unwrap())
    }
}

fn toy(extra: &[&str]) -> Model {
    let dir = TempDir::new().unwrap();
    let graph = dir.path().join("toy.json");
    let weights = dir.path().join("toy.lgw");
    let mut args = vec!["build-toy-model", "--graph", graph.to_str().unwrap(), "--weights", weights.to_str().unwrap()];
    args.extend_from_slice(extra);
    let (code, out, _) = cli(&args);
    assert_eq!(code, EXIT_OK);
    assert!(json(&out)["nodes"].as_u64().unwrap() > 0);
    Model { _dir: dir, graph, weights }
}

fn run_report(m: &Model, extra: &[&str]) -> Value {
    let (g, w) = m.paths();
    let mut args = vec!["run", "--graph", g, "--weights", w, "--prompt", "5,9,14,2,77,3,1,60"];
    args.extend_from_slice(extra);
    let (code, out, err) = cli(&args);
    assert_eq!(code, EXIT_OK, "{err}");
    json(&out)
}

#[test]
fn infer_shapes_on_toy_decoder() {
    let m = toy(&[]);
    let (g, w) = m.paths();
    let (code, out, _) = cli(&["infer-shapes", g, "--weights", w]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("l0.past_kv : f32 [sumN - N, 1, 8, 16] class=T"));
    let summary = json(out.lines().last().unwrap());
    assert_eq!(summary["shape_ops_retained"], 0);
    assert_eq!(summary["sync_points"], 1);
    assert!(summary["fused_nodes"].as_u64().unwrap() > 0);

    let dest = m.graph.with_extension("shapes.json");
    let (code, _, _) = cli(&["infer-shapes", g, "--out", dest.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    let v = json(&std::fs::read_to_string(&dest).unwrap());
    assert_eq!(v["summary"]["shape_ops_retained"], 0);
    assert!(v["tensors"].as_array().unwrap().len() > 100);
}

#[test]
fn infer_shapes_reports_two_syncs_for_data_dependent_shape() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("adv.json");
    std::fs::write(&path, save_graph(&shape_of_matmul().0)).unwrap();
    let (code, out, _) = cli(&["infer-shapes", path.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(json(out.lines().last().unwrap())["sync_points"], 2);
}

#[test]
fn malformed_graph_exits_with_compile_code() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, br#"{"symbols": [], "nodes": 3}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dynlite")).args(["infer-shapes", path.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_COMPILE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema error"));
}

#[test]
fn plan_memory_report_schema() {
    let m = toy(&[]);
    let (g, w) = m.paths();
    let (code, out, _) = cli(&["plan-memory", g, "--weights", w]);
    assert_eq!(code, EXIT_OK);
    let v = json(&out);
    let block = &v["blocks"][0];
    assert!(block["id"].is_u64() && block["size_expr"].is_string() && block["max_bytes"].is_u64());
    assert!(v["assignments"].as_object().unwrap().values().all(Value::is_u64));
    assert!(v["peak_bytes"].as_u64().unwrap() < v["naive_bytes"].as_u64().unwrap());
    assert!(v["savings_ratio"].as_f64().unwrap() > 0.0);
}

#[test]
fn quantize_writes_lgq1_files_and_table() {
    let m = toy(&["--hidden", "256", "--heads", "4", "--head-dim", "64"]);
    let dir = TempDir::new().unwrap();
    let (code, out, _) = cli(&["quantize", m.paths().1, "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    let v = json(&out);
    let rows = v["tensors"].as_array().unwrap();
    assert!(rows.iter().all(|r| r["ratio"].is_f64() && r["mae_fp4"].is_f64() && r["mae_int4"].is_f64()));
    let mean = v["mean_ratio"].as_f64().unwrap();
    assert!((0.93..=0.98).contains(&mean), "mean ratio {mean}");
    let files = v["files"].as_array().unwrap();
    assert_eq!(files.len(), rows.len());
    let bytes = std::fs::read(Path::new(files[1].as_str().unwrap())).unwrap();
    assert_eq!(&bytes[..4], b"LGQ1");
    assert_eq!(QuantizedWeight::from_bytes(&bytes).unwrap().to_bytes(), bytes);
}

#[test]
fn quantize_f32_is_pass_through_and_short_groups_are_flagged() {
    let m = toy(&[]);
    let dir = TempDir::new().unwrap();
    let (code, out, _) = cli(&["quantize", m.paths().1, "--scheme", "f32", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    assert!(json(&out)["files"].as_array().unwrap().is_empty());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    let (_, out, _) = cli(&["quantize", m.paths().1, "--group-size", "48"]);
    let v = json(&out);
    let q = v["tensors"].as_array().unwrap().iter().find(|r| r["name"] == "l0.q_proj.weight").unwrap().clone();
    assert_eq!(q["short_group"], true);
}

#[test]
fn mae_report_on_synthetic_weights() {
    let (code, out, _) = cli(&["mae-report", "--k", "1024", "--trials", "3"]);
    assert_eq!(code, EXIT_OK);
    let v = json(&out);
    assert_eq!(v["tensors"].as_array().unwrap().len(), 3);
    assert!(v["mean_ratio"].as_f64().unwrap() < 1.0);
}

#[test]
fn compare_reports_identical_tokens() {
    let m = toy(&[]);
    let (g, w) = m.paths();
    let out = Command::new(env!("CARGO_BIN_EXE_dynlite"))
        .args(["compare", "--graph", g, "--weights", w, "--prompt", "3,1,4,1,5", "--max-new-tokens", "32"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_OK));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("tokens identical: true; kv_copy_bytes saved: "), "{stderr}");
    let v = json(&String::from_utf8_lossy(&out.stdout));
    assert_eq!(v["tokens_identical"], true);
    assert!(v["kv_copy_bytes_saved"].as_u64().unwrap() > 0);
    assert_eq!(v["optimized"]["tokens"], v["naive_oracle"]["tokens"]);
    assert_eq!(v["optimized"]["tokens"].as_array().unwrap().len(), 32);
    assert_eq!(v["optimized"]["report"]["counters"]["kv_copy_bytes"], 0);
}

#[test]
fn capacity_overflow_exits_with_runtime_code() {
    let m = toy(&["--max-seq", "16"]);
    let (g, w) = m.paths();
    let prompt: Vec<String> = (0..14).map(|i| i.to_string()).collect();
    let prompt = prompt.join(",");
    let out = Command::new(env!("CARGO_BIN_EXE_dynlite"))
        .args(["run", "--graph", g, "--weights", w, "--prompt", &prompt, "--max-new-tokens", "4"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_RUNTIME));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot hold 17"));
    // Raising the limit at run time makes it fit.
    let (code, _, _) = cli(&["run", "--graph", g, "--weights", w, "--prompt", &prompt, "--max-new-tokens", "4", "--max-seq", "64"]);
    assert_eq!(code, EXIT_OK);
}

#[test]
fn padding_changes_counters_not_tokens() {
    let m = toy(&[]);
    let a = run_report(&m, &["--pad", "64", "--max-new-tokens", "64"]);
    let b = run_report(&m, &["--pad", "128", "--max-new-tokens", "64"]);
    assert_eq!(a["tokens"], b["tokens"]);
    let ups = |v: &Value| v["report"]["counters"]["shape_updates"].as_u64().unwrap();
    assert_ne!(ups(&a), ups(&b));
    let c = &a["report"]["counters"];
    assert_eq!(c["shape_ops_executed"], 0);
    assert_eq!(c["allocations"], 0);
    assert_eq!(c["sync_points"], a["report"]["steps"]);
}

#[test]
fn run_modes_and_report_schema() {
    let m = toy(&[]);
    let fast = run_report(&m, &["--time"]);
    let slow = run_report(&m, &["--mode", "naive-oracle"]);
    assert_eq!(fast["tokens"], slow["tokens"]);
    for key in ["steps", "prefill_tokens", "tokens_per_step_ms", "counters"] {
        assert!(fast["report"].get(key).is_some(), "{key}");
    }
    assert!(fast["timing_ms"]["generate"].is_f64());
    assert_eq!(slow["config"]["mode"], "naive-oracle");
    assert_eq!(fast["report"]["prefill_tokens"], 8);
    let q = run_report(&m, &["--scheme", "e0m4", "--group-size", "32"]);
    assert_eq!(q["tokens"].as_array().unwrap().len(), 32);
}

#[test]
fn prompt_file_is_accepted() {
    let m = toy(&[]);
    let path = m.graph.with_extension("prompt");
    std::fs::write(&path, "5 9, 14\n2 77 3 1 60\n").unwrap();
    let (g, w) = m.paths();
    let (code, out, _) = cli(&["run", "--graph", g, "--weights", w, "--prompt-file", path.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(json(&out)["tokens"], run_report(&m, &[])["tokens"]);
}

#[test]
fn exit_codes_and_missing_inputs() {
    assert_eq!([EXIT_OK, EXIT_COMPILE, EXIT_RUNTIME, EXIT_MISMATCH], [0, 2, 3, 4]);
    let (code, _, err) = cli(&["run", "--graph", "/nonexistent.json", "--weights", "/nonexistent.lgw", "--prompt", "1"]);
    assert_eq!(code, EXIT_COMPILE, "{err}");
}
