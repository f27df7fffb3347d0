// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const BIN: &str = env!("CARGO_BIN_EXE_moelab");

fn moelab(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().expect("spawn moelab")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = moelab(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// A small dataset with a shallow and a deep model, shared across tests.
fn fixture() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        ok(&dir, &["gen-data", "--seed", "2", "--relations", "2", "--subjects", "6", "--out", "data"]);
        ok(&dir, &["plant", "--data", "data", "--plan", "shallow", "--seed", "2", "--out", "shallow"]);
        ok(&dir, &["plant", "--data", "data", "--plan", "deep", "--seed", "2", "--out", "deep"]);
        dir
    })
}

fn read_json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn gen_data_is_deterministic_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--seed", "9", "--relations", "5", "--subjects", "20", "--out", "a"]);
    ok(d, &["gen-data", "--seed", "9", "--relations", "5", "--subjects", "20", "--out", "b"]);
    for f in ["prompts.jsonl", "tokenizer.json", "relations.json", "manifest.json"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap());
    }
    let lines = std::fs::read_to_string(d.join("a/prompts.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 100);
    ok(d, &["gen-data", "--subjects", "0", "--out", "empty"]);
    assert_eq!(std::fs::read_to_string(d.join("empty/prompts.jsonl")).unwrap(), "");
}

#[test]
fn capacity_and_usage_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&moelab(d, &["gen-data", "--relations", "13", "--out", "x"])), 3);
    assert_eq!(code(&moelab(d, &["gen-data", "--relations", "many", "--out", "x"])), 2);
    assert_eq!(code(&moelab(d, &[])), 2);
    let out = moelab(d, &["plant", "--data", "missing", "--out", "m"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
}

#[test]
fn plant_presets_follow_their_contract() {
    let d = fixture();
    let deep = read_json(d.join("deep/manifest.json"));
    assert_eq!(deep["config"]["model"]["has_shared_expert"], true);
    let plan = read_json(d.join("deep/plan.json"));
    assert!(plan["relations"][0]["redundancy"].is_object());
    let shallow = read_json(d.join("shallow/manifest.json"));
    assert_eq!(shallow["config"]["model"]["has_shared_expert"], false);
    assert!(shallow.get("duration_ms").is_none());
    for m in ["deep", "shallow"] {
        ok(d, &["eval", "--model", &format!("{m}/model.moem"), "--data", "data", "--out", &format!("ev-{m}")]);
        let r = read_json(d.join(format!("ev-{m}/eval.json")));
        assert_eq!((r["mrr"].as_f64(), r["hit_at_10"].as_f64()), (Some(1.0), Some(1.0)));
    }
}

#[test]
fn eval_interventions_and_errors() {
    let d = fixture();
    ok(d, &["eval", "--model", "deep/model.moem", "--data", "data", "--mode", "top_zero", "--out", "ev0"]);
    assert!(read_json(d.join("ev0/eval.json"))["mrr"].as_f64().unwrap() < 0.5);
    let out = moelab(d, &["eval", "--model", "deep/model.moem", "--data", "data", "--block", "2:77", "--out", "evx"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("2:77"));
    let mut args = vec!["eval", "--model", "shallow/model.moem", "--data", "data", "--out", "eve"];
    let blocks: Vec<String> = (0..16).map(|j| format!("1:{j}")).collect();
    for b in &blocks {
        args.push("--block");
        args.push(b);
    }
    assert_eq!(code(&moelab(d, &args)), 4);
    let out = moelab(d, &["eval", "--model", "deep/model.moem", "--data", "data", "--mode", "sideways", "--out", "evm"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn attribute_and_ablate_outputs() {
    let d = fixture();
    ok(d, &["attribute", "--model", "deep/model.moem", "--data", "data", "--relation", "capital", "--topk", "30", "--out", "at"]);
    let csv = std::fs::read_to_string(d.join("at/attribution.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "relation,layer,site,expert,neuron,mean_score,rank");
    assert_eq!(csv.lines().count(), 31);
    ok(d, &["attribute", "--model", "deep/model.moem", "--data", "data", "--relation", "capital", "--topk", "0", "--out", "at0"]);
    assert_eq!(std::fs::read_to_string(d.join("at0/attribution.csv")).unwrap().lines().count(), 1);
    let out = moelab(d, &["attribute", "--model", "deep/model.moem", "--data", "data", "--relation", "nope", "--out", "atx"]);
    assert_eq!(code(&out), 2);
    ok(d, &["ablate", "--model", "deep/model.moem", "--data", "data", "--relation", "capital", "--topk", "30", "--out", "ab"]);
    assert_eq!(std::fs::read_to_string(d.join("ab/sweep.csv")).unwrap().lines().count(), 5);
    ok(d, &["ablate", "--model", "deep/model.moem", "--data", "data", "--relation", "capital", "--sizes", "", "--topk", "30", "--out", "ab0"]);
    let rows = std::fs::read_to_string(d.join("ab0/sweep.csv")).unwrap();
    assert_eq!(rows.lines().collect::<Vec<_>>(), vec!["relation,n_blocked,hit_at_10,mrr", "capital,0,1,1"]);
}

#[test]
fn causal_bundle() {
    let d = fixture();
    let plan = read_json(d.join("deep/plan.json"));
    let slot = &plan["relations"][0]["refinement"];
    let expert = format!("{}:{}", slot["layer"], slot["expert"]);
    let d_model = read_json(d.join("deep/manifest.json"))["config"]["model"]["d_model"].as_u64().unwrap() as usize;
    let probe: Vec<f64> = (0..d_model).map(|i| ((i % 7) as f64 - 3.0) * 0.25).collect();
    std::fs::write(d.join("probe.json"), serde_json::to_vec(&probe).unwrap()).unwrap();
    ok(
        d,
        &[
            "causal", "--model", "deep/model.moem", "--data", "data", "--head", "0:0", "--expert", &expert,
            "--relation", "capital", "--ig-steps", "1", "--linear-probe", "probe.json", "--out", "ca1",
        ],
    );
    let b = read_json(d.join("ca1/causal.json"));
    assert!(b["linear_probe"]["max_abs_error"].as_f64().unwrap() < 1e-12);
    ok(
        d,
        &["causal", "--model", "deep/model.moem", "--data", "data", "--head", "0:0", "--expert", &expert, "--relation", "capital", "--out", "ca"],
    );
    let b = read_json(d.join("ca/causal.json"));
    assert!(b["forcing"]["recovery_ratio"].as_f64().unwrap() >= 0.8);
    assert!(b["integrated_gradients"]["max_relative_gap"].as_f64().unwrap() <= 0.01);
    let out = moelab(d, &["causal", "--model", "deep/model.moem", "--data", "data", "--head", "0:9", "--expert", &expert, "--out", "cx"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn report_is_idempotent_and_checks_inputs() {
    let d = fixture();
    let args = ["report", "--inputs", "deep/model.moem", "shallow/model.moem", "--data", "data", "--out"];
    let mut a = args.to_vec();
    a.push("rep");
    ok(d, &a);
    let first: Vec<Vec<u8>> = ["table1.csv", "deep-model/curve.csv", "deep-model/correlation.csv", "deep-model/stages.json", "manifest.json"]
        .iter()
        .map(|f| std::fs::read(d.join("rep").join(f)).unwrap())
        .collect();
    ok(d, &a);
    let second: Vec<Vec<u8>> = ["table1.csv", "deep-model/curve.csv", "deep-model/correlation.csv", "deep-model/stages.json", "manifest.json"]
        .iter()
        .map(|f| std::fs::read(d.join("rep").join(f)).unwrap())
        .collect();
    assert_eq!(first, second);
    let table = String::from_utf8(first[0].clone()).unwrap();
    assert_eq!(
        table.lines().next().unwrap(),
        "model,hit_at_10,mrr,total_ffn_gain,total_attn_gain,peak_layer,peak_relative_pct,layer_efficiency"
    );
    let curve = String::from_utf8(first[1].clone()).unwrap();
    assert_eq!(curve.lines().next().unwrap(), "layer,ffn_gain,attn_gain,cumulative");
    let corr = String::from_utf8(first[2].clone()).unwrap();
    assert_eq!(corr.lines().next().unwrap(), "head_layer,head,expert_layer,expert,r,p,n");
    let out = moelab(d, &["report", "--inputs", "gone.moem", "--data", "data", "--out", "rep2"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("gone.moem"));
}

#[test]
fn version_help_json_and_timing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let v = ok(d, &["--version"]);
    assert!(String::from_utf8_lossy(&v.stdout).contains(env!("CARGO_PKG_VERSION")));
    let h = ok(d, &["--help-json"]);
    let j: serde_json::Value = serde_json::from_slice(&h.stdout).unwrap();
    let names: Vec<&str> = j["commands"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["gen-data", "plant", "eval", "attribute", "ablate", "causal", "report"]);
    ok(d, &["--timing", "gen-data", "--subjects", "2", "--out", "t"]);
    assert!(read_json(d.join("t/manifest.json"))["duration_ms"].is_u64());
}
