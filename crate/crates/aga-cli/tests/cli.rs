//! End-to-end command tests against the built binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_aga")
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("aga-cli-test-{}-{tag}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn aga")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn gen_small(dir: &Path, seed: u64) {
    run_ok(&[
        "gen",
        "--seed",
        &seed.to_string(),
        "--out",
        dir.to_str().unwrap(),
        "--set",
        "train=24",
        "--set",
        "val=4",
        "--set",
        "test=12",
    ]);
}

#[test]
fn gen_is_byte_deterministic_and_counts_match() {
    let d1 = tmp_dir("gen1");
    let d2 = tmp_dir("gen2");
    gen_small(&d1, 42);
    gen_small(&d2, 42);
    let c1 = std::fs::read(d1.join("corpus.agac")).unwrap();
    let c2 = std::fs::read(d2.join("corpus.agac")).unwrap();
    assert_eq!(c1, c2, "same seed/config must produce byte-identical corpora");

    let corpus = aga_cli::formats::decode_corpus(&c1).unwrap();
    assert_eq!(corpus.splits.train.len(), 24);
    assert_eq!(corpus.splits.val.len(), 4);
    assert_eq!(corpus.splits.test.len(), 12);
    assert!(d1.join("world.json").exists());
    assert!(d1.join("manifest.json").exists());

    let _ = std::fs::remove_dir_all(&d1);
    let _ = std::fs::remove_dir_all(&d2);
}

#[test]
fn gen_requires_out_flag() {
    let out = run(&["gen", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
}

#[test]
fn bad_config_field_names_the_field_and_exits_2() {
    let dir = tmp_dir("badcfg");
    let out = run(&[
        "gen",
        "--out",
        dir.join("o").to_str().unwrap(),
        "--set",
        "vocab=2",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocab"));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn unknown_variant_and_missing_corpus_exit_2() {
    let dir = tmp_dir("variant");
    let out = run(&[
        "train",
        "--corpus",
        dir.join("missing.agac").to_str().unwrap(),
        "--variant",
        "bogus",
        "--out",
        dir.join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    gen_small(&dir, 7);
    let out = run(&[
        "train",
        "--corpus",
        dir.join("does-not-exist.agac").to_str().unwrap(),
        "--variant",
        "full",
        "--out",
        dir.join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn train_logs_are_deterministic_and_global_only_zeroes_grouped_terms() {
    let dir = tmp_dir("train");
    gen_small(&dir, 5);
    let corpus = dir.join("corpus.agac");
    for sub in ["r1", "r2"] {
        run_ok(&[
            "train",
            "--corpus",
            corpus.to_str().unwrap(),
            "--variant",
            "global-only",
            "--out",
            dir.join(sub).to_str().unwrap(),
            "--seed",
            "5",
            "--set",
            "epochs=2",
            "--set",
            "batch_size=8",
        ]);
    }
    let l1 = std::fs::read(dir.join("r1/losses.jsonl")).unwrap();
    let l2 = std::fs::read(dir.join("r2/losses.jsonl")).unwrap();
    assert_eq!(l1, l2, "reruns must produce identical logs");
    let g1 = std::fs::read(dir.join("r1/gates.csv")).unwrap();
    let g2 = std::fs::read(dir.join("r2/gates.csv")).unwrap();
    assert_eq!(g1, g2);

    for line in String::from_utf8(l1).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["l_tf"], 0.0);
        assert_eq!(v["l_vf"], 0.0);
        assert_eq!(v["l_gla"], 0.0);
        assert_eq!(v["l_gva"], 0.0);
    }
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn fixed_variant_trains_with_paper_thresholds() {
    let dir = tmp_dir("fixed");
    gen_small(&dir, 9);
    run_ok(&[
        "train",
        "--corpus",
        dir.join("corpus.agac").to_str().unwrap(),
        "--variant",
        "fixed:0.00277,0.01031",
        "--out",
        dir.join("o").to_str().unwrap(),
        "--seed",
        "9",
        "--set",
        "epochs=1",
    ]);
    let csv = std::fs::read_to_string(dir.join("o/gates.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[1], "0.00277");
        assert_eq!(fields[2], "0.01031");
    }
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn eval_produces_schema_and_is_repeatable() {
    let dir = tmp_dir("eval");
    gen_small(&dir, 11);
    let corpus = dir.join("corpus.agac");
    // Untrained checkpoint: zero epochs.
    run_ok(&[
        "train",
        "--corpus",
        corpus.to_str().unwrap(),
        "--variant",
        "full",
        "--out",
        dir.join("t").to_str().unwrap(),
        "--seed",
        "11",
        "--set",
        "epochs=0",
    ]);
    for sub in ["e1", "e2"] {
        run_ok(&[
            "eval",
            "--checkpoint",
            dir.join("t/checkpoint.agak").to_str().unwrap(),
            "--corpus",
            corpus.to_str().unwrap(),
            "--out",
            dir.join(sub).to_str().unwrap(),
            "--heatmaps",
            "1",
        ]);
    }
    let r1 = std::fs::read(dir.join("e1/results.json")).unwrap();
    let r2 = std::fs::read(dir.join("e2/results.json")).unwrap();
    assert_eq!(r1, r2, "repeated eval of one checkpoint must be identical");

    let v: serde_json::Value = serde_json::from_slice(&r1).unwrap();
    for key in ["variant", "seed", "retrieval", "zero_shot", "probe", "fidelity"] {
        assert!(v.get(key).is_some(), "results.json missing {key}");
    }
    for key in ["prec@1", "prec@5", "prec@10", "instance_prec@1"] {
        assert!(v["retrieval"].get(key).is_some(), "retrieval missing {key}");
    }
    for key in ["acc", "f1", "roc"] {
        assert!(v["zero_shot"].get(key).is_some());
    }
    // Untrained baseline: documented near-chance behavior.
    let inst = v["retrieval"]["instance_prec@1"].as_f64().unwrap();
    assert!(inst <= 0.2, "untrained instance precision {inst} suspiciously high");
    let p5 = v["retrieval"]["prec@5"].as_f64().unwrap();
    assert!((0.05..=0.65).contains(&p5), "untrained category Prec@5 {p5} not near chance");

    // Heatmap files exist and the CSV re-imports exactly as written.
    let heat = std::fs::read_dir(dir.join("e1/heatmaps")).unwrap();
    let mut saw_csv = false;
    for entry in heat {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "csv") {
            saw_csv = true;
            let text = std::fs::read_to_string(&path).unwrap();
            let alpha = aga_cli::formats::parse_heatmap_csv(&text).unwrap();
            let rewritten = aga_cli::formats::heatmap_csv(&alpha, 6, 6);
            assert_eq!(text, rewritten);
        }
    }
    assert!(saw_csv, "no heatmap CSVs were produced");
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn eval_rejects_dimension_mismatch_naming_both() {
    let dir = tmp_dir("mismatch");
    gen_small(&dir, 13);
    run_ok(&[
        "train",
        "--corpus",
        dir.join("corpus.agac").to_str().unwrap(),
        "--variant",
        "full",
        "--out",
        dir.join("t").to_str().unwrap(),
        "--set",
        "epochs=0",
    ]);
    // A corpus with a different patch grid.
    run_ok(&[
        "gen",
        "--seed",
        "13",
        "--out",
        dir.join("g5").to_str().unwrap(),
        "--set",
        "grid_rows=5",
        "--set",
        "train=4",
        "--set",
        "val=1",
        "--set",
        "test=2",
    ]);
    let out = run(&[
        "eval",
        "--checkpoint",
        dir.join("t/checkpoint.agak").to_str().unwrap(),
        "--corpus",
        dir.join("g5/corpus.agac").to_str().unwrap(),
        "--out",
        dir.join("e").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("36") && msg.contains("30"), "message must name both dims: {msg}");
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn verify_passes_and_filter_selects_subset() {
    let out = run_ok(&["verify"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("[PASS]"));
    assert!(!text.contains("[FAIL]"));

    let out = run_ok(&["verify", "--filter", "grouping"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for line in text.lines() {
        if line.starts_with("[PASS]") {
            assert!(line.contains("grouping"), "unexpected check under filter: {line}");
        }
    }

    let out = run(&["verify", "--filter", "no-such-area"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn checkpoint_written_every_k_steps_when_requested() {
    let dir = tmp_dir("ckpt-every");
    gen_small(&dir, 15);
    run_ok(&[
        "train",
        "--corpus",
        dir.join("corpus.agac").to_str().unwrap(),
        "--variant",
        "full",
        "--out",
        dir.join("o").to_str().unwrap(),
        "--seed",
        "15",
        "--set",
        "epochs=2",
        "--set",
        "batch_size=8",
        "--set",
        "checkpoint_every=2",
    ]);
    // 24 pairs / batch 8 = 3 steps per epoch, 6 steps total.
    assert!(dir.join("o/checkpoint_step2.agak").exists());
    assert!(dir.join("o/checkpoint_step4.agak").exists());
    assert!(dir.join("o/checkpoint_step6.agak").exists());
    assert!(dir.join("o/checkpoint.agak").exists());
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn bad_threads_env_exits_2() {
    let out = Command::new(bin())
        .args(["verify", "--filter", "gate"])
        .env("AGA_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn non_finite_training_exits_3() {
    let dir = tmp_dir("nanexit");
    gen_small(&dir, 17);
    // Poison one patch value; the trainer must abort with a numeric error.
    let bytes = std::fs::read(dir.join("corpus.agac")).unwrap();
    let mut corpus = aga_cli::formats::decode_corpus(&bytes).unwrap();
    corpus.splits.train[0].image.patches[0] = f64::NAN;
    std::fs::write(dir.join("poisoned.agac"), aga_cli::formats::encode_corpus(&corpus)).unwrap();
    let out = run(&[
        "train",
        "--corpus",
        dir.join("poisoned.agac").to_str().unwrap(),
        "--variant",
        "full",
        "--out",
        dir.join("o").to_str().unwrap(),
        "--set",
        "epochs=1",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let _ = std::fs::remove_dir_all(&dir);
}
