use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use tempoflow_cli::commands::{check_paired, ArmSummary, EvalReport};

const SMALL: &str = "\
corpus.dir = corpus
corpus.clips = 8
corpus.holdout = 2
codec.path = codec.bin
codec.fit_clips = 6
model.layers = 2
model.dim = 32
model.ffn_dim = 64
train.out = run
train.batch_size = 2
train.crop_frames = 32
train.log_every = 5
solver.rtol = 1e-3
solver.atol = 1e-3
generate.samples = 1
ablate.eval_clips = 2
";

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.cfg"), SMALL).unwrap();
        Workspace { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_tempoflow"))
            .current_dir(self.path())
            .args(["--config", "run.cfg"])
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Value {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        serde_json::from_slice(&out.stdout).unwrap()
    }

    fn json(&self, rel: &str) -> Value {
        serde_json::from_slice(&std::fs::read(self.path().join(rel)).unwrap()).unwrap()
    }
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("json error line");
    serde_json::from_str(line).unwrap()
}

/// Corpus, codec and a 50-step checkpoint.
fn trained() -> Workspace {
    let ws = Workspace::new();
    ws.ok(&["synth"]);
    ws.ok(&["fit-codec"]);
    ws.ok(&["train", "--steps", "50"]);
    ws
}

#[test]
fn synth_writes_one_manifest_record_per_clip() {
    let ws = Workspace::new();
    ws.ok(&["synth"]);
    let manifest = std::fs::read_to_string(ws.path().join("corpus/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 8);
    for line in manifest.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        assert!(ws.path().join("corpus").join(rec["mix_path"].as_str().unwrap()).exists());
    }
}

#[test]
fn train_generate_and_rerun_guard() {
    let ws = trained();
    assert!(ws.path().join("run/final.bin").exists());
    let log = std::fs::read_to_string(ws.path().join("run/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 51, "header plus one row per step");
    assert!(log.lines().skip(1).all(|l| l.split(',').count() == 5));

    // Identical config refuses, --force overrides.
    let again = ws.run(&["train", "--steps", "50"]);
    assert_eq!(again.status.code(), Some(1));
    assert_eq!(stderr_json(&again)["error"], "rerun_refused");
    ws.ok(&["train", "--steps", "50", "--force"]);

    let ann = "corpus/clip_00006_ann.json";
    let meta = ws.ok(&[
        "generate",
        "--set",
        &format!("generate.chords={ann}"),
        "--alpha",
        "0.25",
        "-0.5",
        "2",
        "--self-eval",
        "--out",
        "gen",
    ]);
    assert_eq!(meta["alpha"], serde_json::json!([0.25, -0.5, 2.0]));
    assert_eq!(ws.json("gen/metadata.json"), meta);
    let sample = &meta["samples"][0];
    assert!(ws.path().join("gen/sample_000.wav").exists());
    let iou = sample["self_eval"]["chord_iou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&iou));
    assert_eq!(meta["conditions"]["chords"], ann);

    // A chord track on a different grid is a shape error, not a crash.
    let bad = ws.run(&["generate", "--set", &format!("generate.chords={ann}"), "--set", "generate.frames=100", "--out", "bad"]);
    assert_eq!(bad.status.code(), Some(1));
    let err = stderr_json(&bad);
    assert_eq!(err["error"], "shape_mismatch");
    assert!(err["message"].as_str().unwrap().contains("expected T = 100"), "{err}");
}

#[test]
fn evaluate_reference_copies_score_perfectly() {
    let ws = Workspace::new();
    ws.ok(&["synth"]);
    let copies = ws.path().join("copies");
    std::fs::create_dir_all(&copies).unwrap();
    for id in ["clip_00006", "clip_00007"] {
        std::fs::copy(ws.path().join(format!("corpus/{id}_mix.wav")), copies.join(format!("{id}.wav"))).unwrap();
    }
    let out = ws.ok(&["evaluate", "--set", "evaluate.generated=copies", "--out", "eval.json"]);
    assert_eq!(ws.json("eval.json"), out);
    let report: EvalReport = serde_json::from_value(out["report"].clone()).unwrap();
    assert_eq!(report.clips.len(), 2);
    for key in ["chord_iou", "onset_f1", "chroma_cosine"] {
        let agg = report.aggregates[key].clone().unwrap();
        assert!((agg.mean - 1.0).abs() < 1e-9, "{key}: {agg:?}");
    }
    assert!(report.frechet_distance.unwrap().abs() < 1e-6);
}

#[test]
fn ablate_writes_both_arms() {
    let ws = Workspace::new();
    ws.ok(&["synth"]);
    ws.ok(&["fit-codec"]);
    let out = ws.ok(&["ablate", "loss-weighting", "--steps", "10", "--out", "abl"]);
    let table = out["table"].as_array().unwrap();
    assert_eq!(table.len(), 2);
    assert_eq!(table[0]["arm"], "uniform");
    assert_eq!(table[1]["arm"], "one_plus_t");
    for arm in ["uniform", "one_plus_t"] {
        assert!(ws.path().join(format!("abl/{arm}/train/final.bin")).exists());
        assert!(ws.path().join(format!("abl/{arm}/generated/clip_00006.wav")).exists());
        assert!(ws.path().join(format!("abl/{arm}/report.json")).exists());
    }
    let arms: Vec<ArmSummary> = serde_json::from_value(out["arms"].clone()).unwrap();
    assert_ne!(arms[0].config_digest, arms[1].config_digest);
    assert_eq!(arms[0].corpus_digest, arms[1].corpus_digest);

    let mut unpaired = arms.clone();
    unpaired[1].corpus_digest = "0".repeat(64);
    assert!(check_paired(&unpaired).is_err());
    assert!(check_paired(&arms).is_ok());
}

#[test]
fn missing_prerequisite_names_the_command() {
    let ws = Workspace::new();
    let out = ws.run(&["train"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "missing_prerequisite");
}

#[test]
fn unknown_config_key_is_rejected() {
    let ws = Workspace::new();
    let out = ws.run(&["config", "--set", "train.stepz=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "bad_format");

    std::fs::write(ws.path().join("bad.cfg"), "model.depth = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tempoflow"))
        .current_dir(ws.path())
        .args(["--config", "bad.cfg", "config"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("model.depth"));
}

#[test]
fn bad_usage_exits_two() {
    let ws = Workspace::new();
    let out = ws.run(&["generate", "--alpha", "1", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "usage");
}
