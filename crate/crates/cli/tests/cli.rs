use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sgvl_core::ModelConfig;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn sgvl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgvl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = sgvl(args);
    assert!(
        out.status.success(),
        "sgvl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn digest(p: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(p).unwrap()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        Fixture { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn graphs(&self, n: usize, seed: u64) -> PathBuf {
        let p = self.path(&format!("graphs-{seed}.jsonl"));
        ok(&["synth-data", "--kind", "sg", "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", s(&p)]);
        p
    }

    /// Walked, cropped and densified graphs, whose components are paths.
    fn walked(&self, n: usize, seed: u64) -> PathBuf {
        let p = self.path(&format!("walked-{seed}.jsonl"));
        ok(&["preprocess", "--in", s(&self.graphs(n, seed)), "--out", s(&p), "--seed", "0"]);
        p
    }

    /// Scenes small enough for the token bank of the tiny model.
    fn small_graphs(&self, n: usize, seed: u64) -> PathBuf {
        let cfg = self.path("small.json");
        std::fs::write(&cfg, r#"{"max_objects": 3}"#).unwrap();
        let p = self.path(&format!("small-{seed}.jsonl"));
        ok(&["synth-data", "--kind", "sg", "--n", &n.to_string(), "--seed", &seed.to_string(), "--config", s(&cfg), "--out", s(&p)]);
        p
    }

    fn tiny_model(&self) -> PathBuf {
        let p = self.path("tiny.json");
        std::fs::write(&p, serde_json::to_string(&ModelConfig::tiny()).unwrap()).unwrap();
        p
    }

    fn text(&self, n: usize) -> PathBuf {
        let p = self.path("text.jsonl");
        ok(&["synth-data", "--kind", "text", "--n", &n.to_string(), "--seed", "5", "--out", s(&p)]);
        p
    }

    fn base(&self) -> PathBuf {
        let (model, text) = (self.tiny_model(), self.text(8));
        let p = self.path("base.ckpt");
        let cfg = self.path("pre.json");
        std::fs::write(&cfg, r#"{"it_per_step": 4, "lambda_gn": 0.0, "lambda_sg": 0.0, "sg_per_step": 0,
            "use_graph_text": false, "use_graph_negatives": false, "use_sg_tokens": false}"#)
        .unwrap();
        ok(&[
            "pretrain-base", "--in", s(&text), "--model", s(&model), "--config", s(&cfg), "--steps", "2", "--seed", "1",
            "--out", s(&p),
        ]);
        p
    }
}

#[test]
fn reruns_are_byte_identical() {
    let f = Fixture::new();
    let graphs = f.graphs(12, 3);
    let walked = f.walked(12, 3);
    for (cmd, input) in [("preprocess", &graphs), ("captions", &walked), ("negatives", &walked)] {
        let (a, b) = (f.path(&format!("{cmd}-a.jsonl")), f.path(&format!("{cmd}-b.jsonl")));
        for out in [&a, &b] {
            ok(&[cmd, "--in", s(input), "--out", s(out), "--seed", "1"]);
        }
        assert_eq!(digest(&a), digest(&b), "{cmd}");
        assert!(std::fs::metadata(&a).unwrap().len() > 0, "{cmd} wrote nothing");
    }
    assert_eq!(digest(&graphs), digest(&f.graphs(12, 3)));
    assert_ne!(digest(&graphs), digest(&f.graphs(12, 4)));
}

#[test]
fn captions_are_typed_records() {
    let f = Fixture::new();
    let graphs = f.walked(10, 0);
    let caps = f.path("caps.jsonl");
    ok(&["captions", "--in", s(&graphs), "--out", s(&caps), "--seed", "2"]);
    let text = std::fs::read_to_string(&caps).unwrap();
    assert!(text.lines().count() >= 1);
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_ne!(v["positive"], v["negative"]);
        assert!(v["image_id"].as_str().unwrap().starts_with("sg-"));
        assert!(v["rule"].is_string());
    }
}

#[test]
fn usage_errors_exit_two() {
    let none = sgvl(&[]);
    assert_eq!(none.status.code(), Some(2));

    let missing = sgvl(&["captions", "--in", "graphs.jsonl"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("--out"));

    let unknown = sgvl(&["inspect", "--in", "x", "--bogus", "1"]);
    assert_eq!(unknown.status.code(), Some(2));

    let not_a_number = sgvl(&["synth-data", "--n", "many", "--out", "x"]);
    assert_eq!(not_a_number.status.code(), Some(2));
}

#[test]
fn domain_errors_exit_one() {
    let f = Fixture::new();
    let missing = sgvl(&["captions", "--in", s(&f.path("absent.jsonl")), "--out", s(&f.path("o.jsonl"))]);
    assert_eq!(missing.status.code(), Some(1));

    let cfg = f.path("bad.json");
    std::fs::write(&cfg, r#"{"min_objects": 2, "max_objectz": 4}"#).unwrap();
    let bad = sgvl(&["synth-data", "--n", "2", "--config", s(&cfg), "--out", s(&f.path("o.jsonl"))]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("max_objectz"));

    let rules = f.path("rules.json");
    std::fs::write(&rules, r#"{"asymmetric_relations": 3}"#).unwrap();
    let graphs = f.graphs(2, 0);
    let bad = sgvl(&["captions", "--in", s(&graphs), "--rules", s(&rules), "--out", s(&f.path("o.jsonl"))]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("asymmetric_relations"));

    let garbage = f.path("garbage.jsonl");
    std::fs::write(&garbage, "{\"image_id\": \"a\", \"image\": \"x.png\", \"nodes\": \"no\"}\n").unwrap();
    let bad = sgvl(&["preprocess", "--in", s(&garbage), "--out", s(&f.path("o.jsonl"))]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_on_tiny_model() {
    let f = Fixture::new();
    let report = f.path("grad.json");
    let out = ok(&["gradcheck", "--model", s(&f.tiny_model()), "--tol", "1e-4", "--out", s(&report)]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(v["terms"].as_array().unwrap().len(), 5);
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(saved, v);
}

#[test]
fn inspect_round_trips_artifacts() {
    let f = Fixture::new();
    let graphs = f.graphs(6, 1);
    let caps = f.path("caps.jsonl");
    ok(&["captions", "--in", s(&f.walked(6, 1)), "--out", s(&caps)]);
    let wino = f.path("wino.jsonl");
    ok(&["synth-data", "--kind", "winoground", "--n", "4", "--out", s(&wino)]);
    let base = f.base();
    for (artifact, kind) in
        [(&graphs, "scene_graphs"), (&caps, "captions"), (&wino, "winoground"), (&f.text(3), "image_text"), (&base, "checkpoint")]
    {
        let copy = f.path("copy");
        let out = ok(&["inspect", "--in", s(artifact), "--out", s(&copy)]);
        let v: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(v["kind"], kind);
        assert_eq!(digest(artifact), digest(&copy), "{kind}");
    }
}

#[test]
fn train_and_evaluate_end_to_end() {
    let f = Fixture::new();
    let base = f.base();
    let sg = f.small_graphs(6, 2);
    let text = f.text(8);
    let cfg = f.path("ft.json");
    std::fs::write(&cfg, r#"{"it_per_step": 4, "sg_per_step": 2, "warmup_steps": 1}"#).unwrap();
    let ft = f.path("ft.ckpt");
    let log = f.path("log.jsonl");
    ok(&[
        "train", "--ckpt", s(&base), "--in", s(&text), "--sg", s(&sg), "--config", s(&cfg), "--steps", "3", "--seed", "4",
        "--out", s(&ft), "--log", s(&log),
    ]);
    let lines: Vec<Value> =
        std::fs::read_to_string(&log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert!(lines.iter().all(|l| l["l_total"].as_f64().unwrap().is_finite()));

    let again = f.path("ft2.ckpt");
    ok(&[
        "train", "--ckpt", s(&base), "--in", s(&text), "--sg", s(&sg), "--config", s(&cfg), "--steps", "3", "--seed", "4",
        "--out", s(&again),
    ]);
    assert_eq!(digest(&ft), digest(&again));

    let out = ok(&["eval-winoground", "--ckpt", s(&ft), "--n", "12", "--seed", "3"]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    let g = r["group_score"].as_f64().unwrap();
    assert!(g <= r["text_score"].as_f64().unwrap() && g <= r["image_score"].as_f64().unwrap());
    assert_eq!(r["n"], 12);

    let out = ok(&["eval-map", "--ckpt", s(&ft), "--in", s(&sg), "--iou", "0.5"]);
    let m: Value = serde_json::from_slice(&out.stdout).unwrap();
    let map = m["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));

    let no_sg = sgvl(&["eval-map", "--ckpt", s(&base), "--in", s(&sg)]);
    assert_eq!(no_sg.status.code(), Some(1));

    let bad = sgvl(&[
        "train", "--ckpt", s(&base), "--in", s(&text), "--sg", s(&sg), "--ablation", "gt,xx", "--out", s(&ft),
    ]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("ablation"));
}
