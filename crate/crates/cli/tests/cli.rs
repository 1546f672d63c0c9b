//! End-to-end behavior of the `segface` binary on a small model.

use std::path::Path;
use std::process::{Command, Output};

use segface_core::config::RunConfig;

const SMALL: [&str; 14] = [
    "model.embed_dim=16",
    "model.backbone.channels=[4, 8, 8, 16]",
    "model.backbone.blocks_per_stage=0",
    "model.decoder.layers=1",
    "model.decoder.heads=2",
    "model.decoder.ffn_hidden=16",
    "model.head.upscale_channels=8",
    "train.resolution=32",
    "scene.resolution=32",
    "data.train_count=4",
    "data.eval_count=2",
    "train.epochs=1",
    "train.batch_size=2",
    "bench.warmup=2",
];

fn segface(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segface")).args(args).output().expect("binary runs")
}

fn with_small(mut args: Vec<&str>) -> Vec<&str> {
    for s in &SMALL {
        args.extend(["--set", s]);
    }
    args
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn train_small(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("run");
    ok(&segface(&with_small(vec!["train", "--out", p(&out)])));
    out.join("checkpoint.bin")
}

#[test]
fn usage_and_validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(segface(&["--help"]).status.code(), Some(0));
    assert_eq!(segface(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(segface(&["train", "--set", "train.lr=1", "--out", p(dir.path())]).status.code(), Some(1));
    assert_eq!(segface(&["train", "--set", "train.resolution=50", "--out", p(dir.path())]).status.code(), Some(1));
    let missing = dir.path().join("missing.bin");
    let out = segface(&["eval", "--checkpoint", p(&missing), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.bin"));

    let garbage = dir.path().join("garbage.bin");
    std::fs::write(&garbage, b"SEGF not really").unwrap();
    let out = segface(&["eval", "--checkpoint", p(&garbage), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_data_is_deterministic_and_reports_frequencies() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = segface(&with_small(vec!["gen-data", "--count", "5", "--out", p(d)]));
        ok(&out);
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("necklace") && text.contains("observed"), "{text}");
    }
    for rel in ["classes.txt", "images/000000.png", "masks/000004.png"] {
        assert_eq!(std::fs::read(a.join(rel)).unwrap(), std::fs::read(b.join(rel)).unwrap(), "{rel}");
    }

    let empty = dir.path().join("empty");
    ok(&segface(&["gen-data", "--count", "0", "--out", p(&empty)]));
    assert!(empty.join("classes.txt").is_file());
    assert_eq!(segface_core::data::load_dataset_dir(&empty).unwrap().entries.len(), 0);
}

#[test]
fn train_echoes_config_and_eval_reads_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_small(dir.path());
    let run = ck.parent().unwrap();
    let echoed = RunConfig::load(Some(&run.join("config.toml")), &[]).unwrap();
    assert_eq!(echoed.model.embed_dim, 16);
    assert_eq!(echoed.output_dir, run);
    let log = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.iter().filter(|r| r["event"] == "step").count(), 2);
    let eval = records.iter().find(|r| r["event"] == "eval").expect("per-epoch eval record");
    assert!(eval["f1"].is_object() && eval.get("mean_iou").is_some());

    // The same held-out scenes, procedurally and from disk. Disk images are
    // 8-bit, so scores may differ slightly; class presence may not.
    let data = dir.path().join("data");
    ok(&segface(&with_small(vec!["gen-data", "--start", "4", "--count", "2", "--out", p(&data)])));
    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    ok(&segface(&["eval", "--checkpoint", p(&ck), "--out", p(&e1)]));
    ok(&segface(&["eval", "--checkpoint", p(&ck), "--data", p(&data), "--out", p(&e2)]));
    let read = |d: &Path| -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(d.join("eval.json")).unwrap()).unwrap()
    };
    let (r1, r2) = (read(&e1), read(&e2));
    assert_eq!((&r1["images"], &r2["images"]), (&2.into(), &2.into()));
    let present = |r: &serde_json::Value| -> Vec<(String, bool)> {
        r["f1"].as_object().unwrap().iter().map(|(k, v)| (k.clone(), v.is_null())).collect()
    };
    assert_eq!(present(&r1), present(&r2));
}

#[test]
fn infer_writes_masks_overlays_and_token_maps() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_small(dir.path());
    let data = dir.path().join("data");
    ok(&segface(&with_small(vec!["gen-data", "--count", "2", "--out", p(&data)])));
    let out = dir.path().join("infer");
    ok(&segface(&["infer", "--checkpoint", p(&ck), "--token-maps", "--out", p(&out), p(&data.join("images"))]));
    for stem in ["000000", "000001"] {
        let mask = image::open(out.join(format!("{stem}_mask.png"))).unwrap().into_luma8();
        assert_eq!(mask.dimensions(), (32, 32));
        assert!(mask.pixels().all(|px| px.0[0] < 10));
        assert!(out.join(format!("{stem}_overlay.png")).is_file());
        assert!(out.join(format!("{stem}_token00_background.png")).is_file());
        assert!(out.join(format!("{stem}_token09_necklace.png")).is_file());
    }
}

#[test]
fn bench_medians_are_stable() {
    let dir = tempfile::tempdir().unwrap();
    let mut medians = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        ok(&segface(&with_small(vec!["bench", "--iterations", "30", "--out", p(&out)])));
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("bench.json")).unwrap()).unwrap();
        medians.push(v["median_images_per_sec"].as_f64().unwrap());
    }
    let ratio = medians[0] / medians[1];
    assert!((0.8..=1.25).contains(&ratio), "medians {medians:?}");
}
