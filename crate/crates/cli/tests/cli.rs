use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use tridet::annotation::AnnotationFile;
use tridet::infer::Detection;
use tridet::io::save_detections;

fn tridet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tridet"))
        .args(args)
        .env_remove("TRIDET_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn arg(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Relative path to contents for every file below `root`.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synth_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = tridet(&["synth", "--videos", "10", "--seed", "7", "--out", arg(dir)]);
        assert!(o.status.success(), "{o:?}");
    }
    let ta = tree(&a);
    assert_eq!(ta.len(), 11);
    assert_eq!(ta, tree(&b));

    let c = tmp.path().join("c");
    let o = Command::new(env!("CARGO_BIN_EXE_tridet"))
        .args(["synth", "--videos", "10", "--out", arg(&c)])
        .env("TRIDET_SEED", "7")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(ta, tree(&c));

    let d = tmp.path().join("d");
    assert!(
        tridet(&["synth", "--videos", "10", "--seed", "8", "--out", arg(&d)])
            .status
            .success()
    );
    assert_ne!(ta, tree(&d));
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert!(
        tridet(&["synth", "--videos", "6", "--seed", "3", "--out", arg(&data)])
            .status
            .success()
    );
    let gt = AnnotationFile::load(&data.join("annotations.json")).unwrap();
    let dets: Vec<Detection> = gt
        .videos
        .iter()
        .flat_map(|v| {
            v.segments
                .iter()
                .map(|s| Detection::new(&v.video_id, s.start, s.end, s.label, 1.0))
        })
        .collect();
    assert!(!dets.is_empty());
    let det_path = tmp.path().join("dets.jsonl");
    save_detections(&det_path, &dets).unwrap();
    let report = tmp.path().join("report.json");
    let o = tridet(&[
        "eval",
        "--detections",
        arg(&det_path),
        "--annotations",
        arg(&data),
        "--out",
        arg(&report),
    ]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("average mAP 1.0000"), "{}", stdout(&o));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["average_mAP"], 1.0);
}

#[test]
fn gradcheck_passes() {
    let o = tridet(&["gradcheck"]);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    let line = out
        .lines()
        .find(|l| l.starts_with("worst relative error"))
        .expect("summary line");
    let worst: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(worst < 1e-4, "{line}");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(tridet(&["--bogus"]).status.code(), Some(1));
    assert_eq!(tridet(&["eval", "--bogus"]).status.code(), Some(1));
    assert_eq!(tridet(&[]).status.code(), Some(1));
    assert_eq!(tridet(&["--help"]).status.code(), Some(0));
    assert_eq!(tridet(&["rank", "--help"]).status.code(), Some(0));
}

#[test]
fn bad_inputs_exit_one_without_partial_output() {
    let tmp = TempDir::new().unwrap();
    let report = tmp.path().join("report.json");
    let o = tridet(&[
        "eval",
        "--detections",
        arg(&tmp.path().join("missing.jsonl")),
        "--annotations",
        arg(&tmp.path().join("missing.json")),
        "--out",
        arg(&report),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!report.exists());

    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"bins": "many"}"#).unwrap();
    let o = tridet(&["--config", arg(&cfg), "gradcheck"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bins"));

    let o = Command::new(env!("CARGO_BIN_EXE_tridet"))
        .args(["gradcheck"])
        .env("TRIDET_SEED", "minus one")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_detect_eval_pipeline_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let o = tridet(&[
        "synth",
        "--videos",
        "8",
        "--split",
        "6",
        "--len",
        "64",
        "--dim",
        "6",
        "--classes",
        "2",
        "--seed",
        "1",
        "--out",
        arg(&data),
    ]);
    assert!(o.status.success(), "{o:?}");
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"dim": 8, "levels": 3, "bins": 4, "gn_groups": 2, "ffn_ratio": 2,
            "epochs": 3, "warmup_epochs": 1, "lr": 1e-3,
            "input_dim": 6, "num_classes": 2}"#,
    )
    .unwrap();
    let mut checkpoints = Vec::new();
    let train_dir = data.join("train");
    for (i, sequential) in [true, false].into_iter().enumerate() {
        let ck = tmp.path().join(format!("model{i}.ckpt"));
        let mut args = vec!["--config", arg(&cfg)];
        if sequential {
            args.push("--sequential");
        }
        args.extend(["train", "--data", arg(&train_dir), "--out", arg(&ck)]);
        let o = tridet(&args);
        assert!(o.status.success(), "{o:?}");
        checkpoints.push(std::fs::read(&ck).unwrap());
        let log =
            std::fs::read_to_string(tmp.path().join(format!("model{i}.ckpt.losses.csv"))).unwrap();
        assert_eq!(log.lines().count(), 4);
    }
    assert_eq!(checkpoints[0], checkpoints[1]);

    let dets = tmp.path().join("dets.jsonl");
    let ck = tmp.path().join("model0.ckpt");
    let o = tridet(&[
        "detect",
        "--checkpoint",
        arg(&ck),
        "--data",
        arg(&data.join("test")),
        "--out",
        arg(&dets),
    ]);
    assert!(o.status.success(), "{o:?}");
    let o = tridet(&[
        "eval",
        "--detections",
        arg(&dets),
        "--annotations",
        arg(&data.join("test")),
    ]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("average mAP"));

    // the config must agree with the dataset
    let wrong = tmp.path().join("wrong.json");
    std::fs::write(&wrong, r#"{"input_dim": 7, "num_classes": 2}"#).unwrap();
    let o = tridet(&[
        "--config",
        arg(&wrong),
        "train",
        "--data",
        arg(&data.join("train")),
        "--out",
        arg(&tmp.path().join("never.ckpt")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!tmp.path().join("never.ckpt").exists());
}

#[test]
fn rank_writes_both_csvs() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("rank");
    let o = tridet(&[
        "rank",
        "--trials",
        "20",
        "--profile-trials",
        "5",
        "--out",
        arg(&out),
    ]);
    assert!(o.status.success(), "{o:?}");
    let angles = std::fs::read_to_string(out.join("angles.csv")).unwrap();
    assert!(angles.starts_with("trial,n,d,"));
    assert_eq!(angles.lines().count(), 41);
    let profile = std::fs::read_to_string(out.join("profile.csv")).unwrap();
    assert!(profile.starts_with("depth,layer_kind,mean_cosine"));
}
