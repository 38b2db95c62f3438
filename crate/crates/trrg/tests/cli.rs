use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"{
  "d": 8, "d_llm": 8, "patch_size": 16, "queries": 2, "heads": 2, "encoder_heads": 2,
  "encoder_depth": 1, "decoder_depth": 1, "ffn_mult": 2, "batch_size": 4,
  "pretrain_epochs": 1, "finetune_epochs": 1, "max_text_len": 48
}"#;

fn trrg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trrg"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = trrg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("tiny.json"), TINY).unwrap();
        ok(&["gen-data", "--out", s(&root.join("data")), "--train", "12", "--val", "2", "--test", "4", "--seed", "3"]);
        Self { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn pretrain(&self, out: &str) -> PathBuf {
        ok(&["pretrain", "--config", s(&self.path("tiny.json")), "--data", s(&self.path("data")), "--out", s(&self.path(out)), "--epochs", "1"]);
        self.path(out).join("stage1.ckpt")
    }
}

#[test]
fn gen_data_is_reproducible_and_counts_match() {
    let f = Fixture::new();
    let again = f.path("again");
    ok(&["gen-data", "--out", s(&again), "--train", "12", "--val", "2", "--test", "4", "--seed", "3"]);
    for (split, n) in [("train", 12), ("val", 2), ("test", 4)] {
        let a = std::fs::read(f.path("data").join(format!("{split}.jsonl"))).unwrap();
        let b = std::fs::read(again.join(format!("{split}.jsonl"))).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|&&c| c == b'\n').count(), n);
    }
    assert!(again.join("config.resolved.json").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(trrg(&["gen-data", "--train", "3"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let out = trrg(&["gen-data", "--out", s(&blocker.join("sub")), "--train", "2"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let out = trrg(&["ablate", "--sweep", "depth=3", "--data", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown sweep"), "{}", stderr(&out));
}

#[test]
fn pretrain_logs_every_step_and_rejects_bad_config() {
    let f = Fixture::new();
    let ckpt = f.pretrain("s1");
    assert!(ckpt.exists());
    let csv = std::fs::read_to_string(f.path("s1/pretrain_loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,loss"));
    assert_eq!(lines.count(), 3);
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.path("s1/config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["d"], 8);
    assert!(resolved["vocab_size"].as_u64().unwrap() > 4);

    std::fs::write(f.path("bad.json"), r#"{"heads": 3, "d_llm": 8}"#).unwrap();
    let out = trrg(&["pretrain", "--config", s(&f.path("bad.json")), "--data", s(&f.path("data")), "--out", s(&f.path("bad"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("heads"), "{}", stderr(&out));
}

#[test]
fn finetune_generate_evaluate_round() {
    let f = Fixture::new();
    let ckpt = f.pretrain("s1");
    ok(&["finetune", "--init", s(&ckpt), "--data", s(&f.path("data")), "--out", s(&f.path("s2"))]);
    let csv = std::fs::read_to_string(f.path("s2/finetune_loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,lm,dc,total"));
    let mut rows = 0;
    for l in lines {
        let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
        assert!((v[3] - (v[1] + v[2])).abs() < 1e-5, "{l}");
        rows += 1;
    }
    assert_eq!(rows, 3);

    let stage2 = f.path("s2/stage2.ckpt");
    ok(&["generate", "--ckpt", s(&stage2), "--data", s(&f.path("data")), "--out", s(&f.path("gen"))]);
    let hyps = std::fs::read_to_string(f.path("gen/hyps.jsonl")).unwrap();
    assert_eq!(hyps.lines().count(), 4);
    let clues: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.path("gen/clues.json")).unwrap()).unwrap();
    assert_eq!(clues.as_array().unwrap().len(), 4);
    assert_eq!(clues[0]["clues"].as_array().unwrap().len(), 3);

    ok(&["evaluate", "--refs", s(&f.path("data")), "--hyps", s(&f.path("gen/hyps.jsonl")), "--out", s(&f.path("ev"))]);
    let m: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(f.path("ev/metrics.json")).unwrap()).unwrap();
    let keys = ["bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider", "ce_precision", "ce_recall", "ce_f1"];
    assert_eq!(m.len(), 9);
    assert!(keys.iter().all(|k| m.contains_key(*k)));
}

#[test]
fn evaluate_contract_errors_and_self_scores() {
    let f = Fixture::new();
    let test = std::fs::read_to_string(f.path("data/test.jsonl")).unwrap();
    let studies: Vec<serde_json::Value> = test.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let line = |v: &serde_json::Value| format!("{{\"id\":{},\"hypothesis\":{}}}\n", v["id"], v["report"]);

    let selfie: String = studies.iter().map(line).collect();
    std::fs::write(f.path("self.jsonl"), selfie).unwrap();
    ok(&["evaluate", "--refs", s(&f.path("data")), "--hyps", s(&f.path("self.jsonl")), "--out", s(&f.path("ev"))]);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.path("ev/metrics.json")).unwrap()).unwrap();
    assert_eq!(m["bleu4"], 1.0);
    assert_eq!(m["ce_f1"], 1.0);

    std::fs::write(f.path("partial.jsonl"), line(&studies[0])).unwrap();
    let out = trrg(&["evaluate", "--refs", s(&f.path("data")), "--hyps", s(&f.path("partial.jsonl")), "--out", s(&f.path("ev2"))]);
    assert_eq!(out.status.code(), Some(1));
    let msg = stderr(&out);
    for st in &studies[1..] {
        assert!(msg.contains(st["id"].as_str().unwrap()), "{msg}");
    }

    std::fs::write(f.path("empty.jsonl"), "").unwrap();
    let out = trrg(&["evaluate", "--refs", s(&f.path("data")), "--hyps", s(&f.path("empty.jsonl")), "--out", s(&f.path("ev3"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("empty"), "{}", stderr(&out));
}

#[test]
fn finetune_rejects_mismatched_checkpoint() {
    let f = Fixture::new();
    let ckpt = f.pretrain("s1");
    std::fs::write(f.path("wide.json"), TINY.replace("\"d\": 8", "\"d\": 16")).unwrap();
    let out = trrg(&["finetune", "--config", s(&f.path("wide.json")), "--init", s(&ckpt), "--data", s(&f.path("data")), "--out", s(&f.path("s2"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("vision."), "{}", stderr(&out));
}

#[test]
fn k_sweep_writes_five_rows() {
    let f = Fixture::new();
    let ckpt = f.pretrain("s1");
    ok(&["ablate", "--sweep", "k=1..5", "--config", s(&f.path("tiny.json")), "--data", s(&f.path("data")), "--out", s(&f.path("ab")), "--init", s(&ckpt)]);
    let csv = std::fs::read_to_string(f.path("ab/ablation_k.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    for (i, r) in rows.iter().enumerate() {
        assert!(r.starts_with(&format!("+DCI+CMCI+DAL,{},", i + 1)), "{r}");
    }
    assert!(f.path("ab/config.resolved.json").exists());
}

#[test]
fn worker_count_does_not_change_results() {
    let f = Fixture::new();
    let run = |threads: &str, out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_trrg"))
            .args(["pretrain", "--config", s(&f.path("tiny.json")), "--data", s(&f.path("data")), "--out", s(&f.path(out))])
            .env("TRRG_THREADS", threads)
            .env("RUST_LOG", "error")
            .output()
            .unwrap();
        assert!(o.status.success());
        std::fs::read(f.path(out).join("stage1.ckpt")).unwrap()
    };
    assert_eq!(run("1", "a"), run("3", "b"));
}

#[test]
fn gradcheck_passes_and_catches_a_fault() {
    let out = ok(&["gradcheck"]);
    let report = String::from_utf8_lossy(&out.stdout);
    assert!(report.lines().filter(|l| l.starts_with("ok")).count() >= 10, "{report}");

    let out = trrg(&["gradcheck", "--fault", "softmax"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("softmax"), "{}", stderr(&out));
}
