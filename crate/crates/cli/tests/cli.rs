use std::path::Path;
use std::process::{Command, Output};

fn vlmforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlmforge"))
        .args(args)
        .env_remove("VLMFORGE_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture(dir: &Path, kind: &str, n: &str) {
    let o = vlmforge(&["corpus", "fixture", "--out-dir", s(dir), "--kind", kind, "--n-docs", n]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn help_lists_subcommands() {
    let o = vlmforge(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["corpus", "pack", "train", "diag", "eval", "help"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    for path in [&["corpus", "--help"][..], &["train", "run", "--help"], &["eval", "run", "--help"]] {
        assert_eq!(code(&vlmforge(path)), 0);
    }
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let o = vlmforge(&["frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn topk_keeps_k_lines() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    let lines: Vec<String> = (0..100)
        .map(|i| format!(r#"{{"image_id":"im{i}","caption":"caption {i}","clip_score":{}}}"#, (i * 37 % 100) as f64 / 100.0))
        .collect();
    std::fs::write(&input, lines.join("\n") + "\n").unwrap();
    let out = dir.path().join("out.jsonl");
    let o = vlmforge(&["corpus", "topk", s(&input), s(&out), "-k", "10"]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 10);
    assert!(dir.path().join("out.jsonl.manifest.json").exists());
}

#[test]
fn strict_mode_reports_bad_line() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.jsonl");
    std::fs::write(
        &input,
        "{\"doc_id\":\"a\",\"segments\":[{\"text\":\"hi\"}]}\n{not json\n",
    )
    .unwrap();
    let out = dir.path().join("out.jsonl");
    let o = vlmforge(&["--strict", "corpus", "reformat", s(&input), s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    let o = vlmforge(&["corpus", "reformat", s(&input), s(&out)]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 1);
}

#[test]
fn fixture_stats_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    fixture(a.path(), "mmc4", "50");
    fixture(b.path(), "mmc4", "50");
    for f in ["interleaved.jsonl", "pairs.jsonl", "task-parity.jsonl"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
    let o = vlmforge(&["corpus", "stats", s(&a.path().join("interleaved.jsonl"))]);
    assert_eq!(code(&o), 0);
    let stats: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((stats["images_per_sample"].as_f64().unwrap() - 4.0).abs() < 0.04);
    assert!((stats["tokens_per_image"].as_f64().unwrap() - 122.5).abs() < 1.225);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("pairs.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 7);
}

#[test]
fn seed_comes_from_environment() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run = |dir: &Path, seed: &str| {
        Command::new(env!("CARGO_BIN_EXE_vlmforge"))
            .args(["corpus", "fixture", "--out-dir", s(dir), "--n-docs", "10"])
            .env("VLMFORGE_SEED", seed)
            .output()
            .unwrap()
    };
    assert_eq!(code(&run(a.path(), "5")), 0);
    assert_eq!(code(&run(b.path(), "6")), 0);
    assert_ne!(
        std::fs::read(a.path().join("interleaved.jsonl")).unwrap(),
        std::fs::read(b.path().join("interleaved.jsonl")).unwrap()
    );
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d, "topic", "40");
    let model = d.join("model.json");
    std::fs::write(
        &model,
        r#"{"resolution":8,"patch":2,"vision_dim":16,"model_dim":16,"ffn_dim":32,"vision_layers":1,
            "llm_layers":2,"heads":2,"vocab_size":260,"projector":{"kind":"linear"},"max_positions":64,"seed":0}"#,
    )
    .unwrap();

    let shard = d.join("docs.shard");
    let o = vlmforge(&["pack", "run", s(&d.join("interleaved.jsonl")), s(&shard), "--max-len", "64", "--res", "8", "--patch", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let (ia, pb) = (d.join("interleaved.jsonl"), d.join("pairs.jsonl"));
    let (sv, st) = (d.join("sft.jsonl"), d.join("sft-text.jsonl"));
    let train = |out: &Path, extra: &[&str]| {
        let mut args = vec![
            "train", "run", "--preset", "c", "--model", s(&model),
            "--corpus-a", s(&ia), "--corpus-b", s(&pb),
            "--sft", s(&sv), "--sft-text", s(&st),
            "--init-steps", "3", "--pretrain-steps", "5", "--sft-steps", "3", "--batch-size", "2",
            "--out", s(out),
        ];
        args.extend_from_slice(extra);
        let o = vlmforge(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    let run1 = d.join("run1");
    let run2 = d.join("run2");
    train(&run1, &[]);
    train(&run2, &["--max-steps", "4"]);
    assert!(run2.join("train.state").exists());
    train(&run2, &["--resume", s(&run2.join("train.state"))]);
    let log1 = std::fs::read_to_string(run1.join("runlog.csv")).unwrap();
    assert!(log1.starts_with("step,stage,loss,lr,tokens,images\n"));
    assert_eq!(log1.lines().count(), 12);
    assert_eq!(log1, std::fs::read_to_string(run2.join("runlog.csv")).unwrap());
    assert_eq!(std::fs::read(run1.join("model.ckpt")).unwrap(), std::fs::read(run2.join("model.ckpt")).unwrap());
    assert!(run1.join("model.ckpt.manifest.json").exists());

    let gap = d.join("gap.csv");
    let o = vlmforge(&["train", "compare-loss", s(&run1.join("runlog.csv")), s(&run2.join("runlog.csv")), "--window", "5", "--out", s(&gap)]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("final_window_gap=0.000000"));

    let profile = d.join("profile.csv");
    let o = vlmforge(&["diag", "align", "--ckpt", s(&run1.join("model.ckpt")), "--shard", s(&shard), "--out", s(&profile)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&profile).unwrap();
    assert!(csv.starts_with("layer,chamfer_cos,n\n"));
    assert_eq!(csv.lines().count(), 4);

    let report = d.join("report.csv");
    let o = vlmforge(&["eval", "run", "--ckpt", s(&run1.join("model.ckpt")), "--task", s(&d.join("task-parity.jsonl")), "-k", "0", "--out", s(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&report).unwrap().lines().count(), 201);

    // A shard packed for a different geometry is refused.
    let other = d.join("other.shard");
    let o = vlmforge(&["pack", "run", s(&d.join("interleaved.jsonl")), s(&other), "--max-len", "64", "--res", "8", "--patch", "4"]);
    assert_eq!(code(&o), 0);
    let o = vlmforge(&["diag", "align", "--ckpt", s(&run1.join("model.ckpt")), "--shard", s(&other), "--out", s(&profile)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn diverging_run_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d, "topic", "20");
    let plan = d.join("plan.json");
    std::fs::write(
        &plan,
        r#"{"model":{"resolution":8,"patch":2,"vision_dim":16,"model_dim":16,"ffn_dim":32,"vision_layers":1,
            "llm_layers":1,"heads":2,"vocab_size":260,"projector":{"kind":"linear"},"max_positions":64,"seed":0},
           "stages":[{"name":"pretrain","policy":{"trainable":["llm","embed","head","projector"]},
                      "data":{"kind":"blend","sources":[{"corpus":"a","proportion":1.0}]},
                      "steps":20,"lr":1e300,"batch_size":2}]}"#,
    )
    .unwrap();
    let o = vlmforge(&["train", "run", "--plan", s(&plan), "--corpus-a", s(&d.join("interleaved.jsonl")), "--out", s(&d.join("run"))]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite"));
}
