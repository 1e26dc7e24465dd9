use std::path::Path;
use std::process::{Command, Output};

use scan_core::attention::Scorer;
use scan_core::checkpoint::Checkpoint;
use scan_core::dataio::read_features;
use scan_core::encoders::{project_regions, ImageFeatures, WordSequence};
use serde_json::Value;

fn scan(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scan"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = scan(args, cwd);
    assert!(
        out.status.success(),
        "scan {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    scan(args, cwd).status.code().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

/// Small corpus and a two-epoch model shared by several tests.
fn trained(dir: &Path) {
    ok(&["gen-data", "--out", "d", "--images", "60"], dir);
    ok(&["train", "--data", "d", "--out", "m.scnp", "--epochs", "2"], dir);
}

#[test]
fn gen_data_is_deterministic_with_default_split() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["gen-data", "--out", "a"], p);
    ok(&["gen-data", "--out", "b"], p);
    for f in ["train.scnf", "val.captions", "test.scnf", "vocab.txt", "synthetic.json"] {
        assert_eq!(std::fs::read(p.join("a").join(f)).unwrap(), std::fs::read(p.join("b").join(f)).unwrap(), "{f}");
    }
    let truth = read_json(&p.join("a/synthetic.json"));
    assert_eq!(truth["split_counts"]["train"], 100);
    assert_eq!(truth["split_counts"]["val"], 25);
    assert_eq!(truth["split_counts"]["test"], 25);
    ok(&["gen-data", "--out", "c", "--seed", "8"], p);
    assert_ne!(std::fs::read(p.join("a/train.scnf")).unwrap(), std::fs::read(p.join("c/train.scnf")).unwrap());
}

#[test]
fn invalid_settings_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&["gen-data", "--concepts", "1"], p), 2);
    assert_eq!(code(&["gen-data", "--split-counts", "1,2"], p), 2);
    assert_eq!(code(&["train", "--preset", "nope", "--dry-run"], p), 2);
    assert_eq!(code(&["train", "--pooling", "median", "--dry-run"], p), 2);
    assert_eq!(code(&["train", "--batch-size", "1", "--dry-run"], p), 2);
    assert_eq!(code(&["eval", "--bogus-flag"], p), 2);
    std::fs::write(p.join("c.toml"), "seed = 3\nlearning_rate = 0.1\n").unwrap();
    assert_eq!(code(&["train", "--config", "c.toml", "--dry-run"], p), 2);
}

#[test]
fn missing_or_corrupt_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&["eval", "--data", "d", "--checkpoint", "absent.scnp"], p), 3);
    assert_eq!(code(&["train", "--data", "absent"], p), 3);
    ok(&["gen-data", "--out", "d", "--images", "12", "--split-counts", "8,2,2"], p);
    let bytes = std::fs::read(p.join("d/train.scnf")).unwrap();
    std::fs::write(p.join("d/train.scnf"), &bytes[..bytes.len() - 3]).unwrap();
    let out = scan(&["train", "--data", "d"], p);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("truncated"));
}

#[test]
fn preset_dry_run_resolves_values_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let v: Value = serde_json::from_str(&ok(&["train", "--preset", "flickr-ti-avg", "--dry-run"], p)).unwrap();
    let pr = &v["preset"];
    assert_eq!(pr["scorer"]["direction"], "text-image");
    assert_eq!(pr["scorer"]["pooling"], "avg");
    assert_eq!(pr["scorer"]["lambda1"], 9.0);
    assert_eq!(pr["model"]["embed_dim"], 300);
    assert_eq!(pr["model"]["hidden_dim"], 1024);
    assert_eq!(pr["train"]["batch_size"], 128);
    assert_eq!(pr["train"]["epochs"], 30);
    assert_eq!(pr["train"]["schedule"]["initial"], 0.0002);
    assert_eq!(pr["train"]["schedule"]["decay_epoch"], 15);
    assert_eq!(pr["train"]["loss"]["margin"], 0.2);

    std::fs::write(p.join("c.toml"), "preset = \"toy\"\nlambda1 = 6.0\nepochs = 5\nseed = 11\n").unwrap();
    let v: Value = serde_json::from_str(&ok(&["train", "--config", "c.toml", "--epochs", "9", "--dry-run"], p)).unwrap();
    assert_eq!(v["preset"]["train"]["epochs"], 9);
    assert_eq!(v["preset"]["scorer"]["lambda1"], 6.0);
    assert_eq!(v["seed"], 11);
    let v: Value = serde_json::from_str(&ok(&["train", "--sum-max", "--direction", "t2i", "--dry-run"], p)).unwrap();
    assert_eq!(v["preset"]["scorer"]["kind"], "sum-max");
    assert_eq!(v["preset"]["scorer"]["direction"], "text-image");
}

#[test]
fn zero_epochs_writes_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["gen-data", "--out", "d", "--images", "12", "--split-counts", "8,2,2"], p);
    ok(&["train", "--data", "d", "--out", "m.scnp", "--epochs", "0"], p);
    let ck = Checkpoint::load(&p.join("m.scnp")).unwrap();
    assert_eq!(ck.meta.epoch, 0);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(7);
    let init = scan_core::encoders::ModelParams::init(ck.meta.dims, &mut rng).unwrap();
    assert_eq!(ck.params, init);
    assert_eq!(std::fs::read_to_string(p.join("m.jsonl")).unwrap(), "");
}

#[test]
fn training_and_eval_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    trained(p);
    ok(&["train", "--data", "d", "--out", "m2.scnp", "--log", "m2.jsonl", "--epochs", "2", "--threads", "1"], p);
    assert_eq!(std::fs::read(p.join("m.scnp")).unwrap(), std::fs::read(p.join("m2.scnp")).unwrap());
    assert_eq!(std::fs::read(p.join("m.jsonl")).unwrap(), std::fs::read(p.join("m2.jsonl")).unwrap());
    let lines: Vec<Value> = std::fs::read_to_string(p.join("m.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1]["train_loss"].as_f64().unwrap() < lines[0]["train_loss"].as_f64().unwrap());

    let t1 = ok(&["eval", "--data", "d", "--checkpoint", "m.scnp", "--json", "r1.json"], p);
    let t2 = ok(&["eval", "--data", "d", "--checkpoint", "m.scnp", "--json", "r2.json", "--threads", "3"], p);
    assert_eq!(t1, t2);
    assert_eq!(std::fs::read(p.join("r1.json")).unwrap(), std::fs::read(p.join("r2.json")).unwrap());
    ok(&["eval", "--data", "d", "--ensemble", "m.scnp", "m2.scnp", "--json", "e.json"], p);
    assert_eq!(read_json(&p.join("e.json"))["report"], read_json(&p.join("r1.json"))["report"]);
    let r = read_json(&p.join("r1.json"))["report"].clone();
    let sum: f64 = ["sentence_retrieval", "image_retrieval"]
        .iter()
        .flat_map(|d| ["r1", "r5", "r10"].map(|k| r[d][k].as_f64().unwrap()))
        .sum();
    assert!((sum - r["rsum"].as_f64().unwrap()).abs() < 1e-9);
}

#[test]
fn ensemble_of_incompatible_checkpoints_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    trained(p);
    ok(&["gen-data", "--out", "o", "--images", "12", "--raw-dim", "16", "--split-counts", "8,2,2"], p);
    ok(&["train", "--data", "o", "--out", "o.scnp", "--epochs", "0"], p);
    assert_eq!(code(&["eval", "--data", "d", "--ensemble", "m.scnp", "o.scnp"], p), 2);
    assert_eq!(code(&["eval", "--data", "o", "--checkpoint", "m.scnp"], p), 2);
}

#[test]
fn score_matches_the_library_and_attend_exports_weights() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    trained(p);
    let caption = "c03 on c17 zzz";
    let out = ok(
        &["score", "--checkpoint", "m.scnp", "--features", "d/test.scnf", "--image", "2", "--caption", caption, "--json"],
        p,
    );
    let got = serde_json::from_str::<Value>(&out).unwrap()["score"].as_f64().unwrap();

    let ck = Checkpoint::load(&p.join("m.scnp")).unwrap();
    let feats = read_features(&p.join("d/test.scnf")).unwrap();
    let v = project_regions(&ImageFeatures::new(feats.images[2].to_matrix()).unwrap(), &ck.params).unwrap();
    let (ids, unknown) = ck.meta.vocab.encode(caption);
    assert_eq!(unknown, vec!["zzz".to_string()]);
    let e = ck.meta.encoder.encode(&WordSequence::new(ids).unwrap(), &ck.params).unwrap();
    let want = ck.meta.scorer.score(&v, &e).unwrap();
    assert_eq!(got.to_bits(), want.to_bits());

    let human = scan(&["score", "--checkpoint", "m.scnp", "--features", "d/test.scnf", "--image", "2", "--caption", caption], p);
    assert!(String::from_utf8_lossy(&human.stderr).contains("zzz"));
    assert_eq!(String::from_utf8_lossy(&human.stdout).trim(), format!("score {want:.6}"));

    for (dir_flag, axis) in [("i2t", 1), ("t2i", 0)] {
        ok(
            &["attend", "--checkpoint", "m.scnp", "--features", "d/test.scnf", "--caption", caption, "--direction", dir_flag, "--out", "a.json"],
            p,
        );
        let a = read_json(&p.join("a.json"));
        let w: Vec<Vec<f64>> = serde_json::from_value(a["weights"].clone()).unwrap();
        assert_eq!(w.len(), a["region_count"].as_u64().unwrap() as usize);
        assert_eq!(w[0].len(), 4);
        let sums: Vec<f64> = if axis == 1 {
            w.iter().map(|r| r.iter().sum()).collect()
        } else {
            (0..4).map(|j| w.iter().map(|r| r[j]).sum()).collect()
        };
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-9), "{sums:?}");
    }
    let a = read_json(&p.join("a.json"));
    assert_eq!(a["argmax_region_per_word"].as_array().unwrap().len(), 4);

    assert_eq!(
        code(&["attend", "--checkpoint", "m.scnp", "--features", "d/test.scnf", "--caption", caption, "--sum-max", "--out", "b.json"], p),
        2
    );
    assert!(matches!(ck.meta.scorer, Scorer::Scan(_)));
}
