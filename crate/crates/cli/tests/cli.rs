use std::path::{Path, PathBuf};
use std::process::Command;

use filab_cli::{run, RunManifest};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_filab"))
}

fn filab(args: &[&str]) -> i32 {
    run(std::iter::once("filab").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{
  "model": {"n_layers": 2, "n_heads": 2, "d_model": 16, "d_head": 8, "d_mlp": 32,
            "vocab_size": 73, "max_seq": 256, "norm_kind": "rms", "pos_kind": "learned-absolute"},
  "steps": 3, "batch": 2, "warmup": 1, "log_every": 1
}"#;

/// Trains a two-layer model for three steps and returns its path.
fn tiny_model(dir: &Path) -> PathBuf {
    let cfg = dir.join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.join("tiny.filab");
    let curve = dir.join("curve.csv");
    assert_eq!(
        filab(&["train", "--config", s(&cfg), "--seed", "4", "--out", s(&out), "--curve", s(&curve)]),
        0
    );
    out
}

#[test]
fn oracle_prints_answers() {
    for (task, input, want) in [
        ("off-by-1", "4+3", "8"),
        ("off-by--2", "0+0", "-2"),
        ("base-8", "17+25", "44"),
        ("caesar-3", "z", "c"),
    ] {
        let out = bin().args(["oracle", "--task", task, "--input", input]).output().unwrap();
        assert!(out.status.success(), "{task}: {}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), want, "{task}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.jsonl");
    assert_eq!(filab(&["--help"]), 0);
    assert_eq!(filab(&["no-such-command"]), 1);
    assert_eq!(filab(&["gen-tasks", "--task", "off-by-1", "--out", s(&out)]), 1);
    assert!(!out.exists());
    assert_eq!(filab(&["gen-tasks", "--task", "off-by-x", "--seed", "1", "--out", s(&out)]), 1);
    let missing = dir.path().join("missing.filab");
    assert_eq!(
        filab(&["eval", "--model", s(&missing), "--task", "off-by-1", "--seed", "1", "--out", s(&out)]),
        2
    );
    let status = bin().args(["oracle", "--task", "off-by-1", "--input", "4+"]).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn gen_tasks_is_reproducible_and_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for p in [&a, &b] {
        let args = ["--deterministic", "gen-tasks", "--task", "off-by-1", "--n", "20", "--seed", "3", "--out", s(p)];
        assert_eq!(filab(&args), 0);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 20);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let query = v["x_cont"].as_str().unwrap().lines().last().unwrap();
        let (_, prefix) = query.split_once('=').unwrap();
        assert!(prefix.len() <= 1, "{query}");
        assert_ne!(v["y_base"], v["y_cont"]);
    }
    let m = RunManifest::load(dir.path().join("a.jsonl.manifest.json")).unwrap();
    assert_eq!(m.command, "gen-tasks");
    assert_eq!(m.seeds["seed"], 3);
    assert!(m.deterministic);
    assert_eq!(m.threads, 1);
    assert_eq!(m.outputs, vec![a.clone()]);
    assert_eq!(m.args[0], "--deterministic");
}

#[test]
fn every_analysis_command_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let model = tiny_model(d);
    let m = RunManifest::load(d.join("tiny.filab.manifest.json")).unwrap();
    assert_eq!(m.model_sha256.as_ref().map(String::len), Some(64));
    assert_eq!(m.outputs.len(), 2);
    let curve = std::fs::read_to_string(d.join("curve.csv")).unwrap();
    assert!(curve.starts_with("step,loss,lr\n"));
    assert_eq!(curve.lines().count(), 4);

    let model = s(&model);
    let path = |name: &str| d.join(name).to_str().unwrap().to_string();
    let runs: Vec<(Vec<String>, &str, &str)> = vec![
        (
            vec!["eval", "--task", "off-by-1", "--shots", "4", "--n", "5"].into_iter().map(String::from).collect(),
            "eval.json",
            "{",
        ),
        (
            vec!["patch-sweep", "--task", "off-by-1", "--shots", "4", "--pairs", "3"]
                .into_iter()
                .map(String::from)
                .collect(),
            "sweep.csv",
            "layer,head,",
        ),
        (
            vec!["path-patch", "--task", "off-by-1", "--shots", "4", "--pairs", "3", "--senders", "L0.H1"]
                .into_iter()
                .map(String::from)
                .collect(),
            "path.csv",
            "pair,r,f_patched",
        ),
        (
            vec!["fv-heatmap", "--task", "off-by-1", "--shots", "4", "--donors", "3", "--heads", "L1.H0,L0.H1"]
                .into_iter()
                .map(String::from)
                .collect(),
            "fv.csv",
            "x,y0,",
        ),
        (
            vec!["base8-table", "--n", "2", "--shots", "3"].into_iter().map(String::from).collect(),
            "b8.csv",
            "case,neither,",
        ),
        (
            vec!["logit-lens", "--prompt", "1=1\\n2="].into_iter().map(String::from).collect(),
            "lens.jsonl",
            "{",
        ),
    ];
    for (mut args, out, head) in runs {
        args.extend(["--model".into(), model.into(), "--out".into(), path(out)]);
        if args[0] != "logit-lens" {
            args.extend(["--seed".into(), "5".into()]);
        }
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        assert_eq!(filab(&argv), 0, "{args:?}");
        let text = std::fs::read_to_string(d.join(out)).unwrap();
        assert!(text.starts_with(head), "{out}: {text}");
        let m = RunManifest::load(d.join(format!("{out}.manifest.json"))).unwrap();
        assert_eq!(m.command, args[0]);
        assert!(m.model_sha256.is_some());
    }
    let lens = std::fs::read_to_string(d.join("lens.jsonl")).unwrap();
    assert_eq!(lens.lines().count(), 2 * 10);

    for mode in ["instance", "zero", "mean"] {
        let out = path(&format!("ablate-{mode}.json"));
        let args = [
            "ablate", "--model", model, "--task", "off-by-1", "--shots", "4", "--n", "4", "--bank-n", "4", "--heads",
            "L1.H1", "--mode", mode, "--seed", "6", "--out", &out,
        ];
        assert_eq!(filab(&args), 0, "{mode}");
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
        assert!(v.is_object(), "{mode}");
    }

    let circuit = d.join("c.json");
    std::fs::write(&circuit, r#"{"heads": [[0, 0], [1, 1]], "groups": {"function-induction": [[1, 1]]}}"#).unwrap();
    let out = path("circuit.json");
    let args = [
        "circuit-eval", "--model", model, "--task", "off-by-1", "--shots", "4", "--pairs", "3", "--circuit",
        s(&circuit), "--trials", "2", "--minimality-budget", "2", "--seed", "7", "--out", &out,
    ];
    assert_eq!(filab(&args), 0);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert!(v.is_object());
}
