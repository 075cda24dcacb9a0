use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_assemblynet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// 16^3 phantoms with a cascade small enough to train in seconds.
fn tiny_config(lr: f64) -> serde_json::Value {
    let spec = |tile: usize| {
        json!({
            "counts": [2, 2, 2],
            "tile_dims": [tile, tile, tile],
            "base_filters": 2,
            "depth": 1,
            "dropout_rate": 0.1,
            "epochs_main": 1,
            "epochs_avg": 1,
            "lr": lr,
            "mixup_alpha": 0.4
        })
    };
    json!({
        "version": 1,
        "grid": [16, 16, 16],
        "num_labels": 5,
        "coarse": spec(6),
        "fine": spec(12),
        "flip_pairs": [[3, 4]],
        "passes": 2,
        "seed": 5,
        "workers": 1
    })
}

fn gen_data(dir: &Path) {
    ok(&[
        "phantom-gen",
        "--out",
        p(dir),
        "--n-labeled",
        "2",
        "--n-unlabeled",
        "2",
        "--n-test",
        "2",
        "--n-rescan",
        "2",
        "--seed",
        "3",
        "--stratify",
        "--dims",
        "16",
    ]);
}

#[test]
fn help_and_usage_errors() {
    assert!(run(&["--help"]).status.success());
    assert!(run(&["--version"]).status.success());
    let out = run(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.starts_with("error[usage]:"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
    assert_eq!(run(&["train"]).status.code(), Some(1));
}

#[test]
fn evaluate_ground_truth_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_data(&data);
    let index: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.join("index.json")).unwrap()).unwrap();
    let roles: Vec<&str> = index["entries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["role"].as_str().unwrap())
        .collect();
    assert_eq!(roles.iter().filter(|r| **r == "rescan").count(), 2);
    let csv = dir.path().join("eval.csv");
    let table = dir.path().join("per_subject.csv");
    ok(&[
        "evaluate",
        "--pred",
        &format!("gt={}", p(&data)),
        "--gt",
        p(&data),
        "--out",
        p(&csv),
        "--per-subject",
        p(&table),
    ]);
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method,dataset,mean_dice,std_dice,p_vs_baseline,wall_seconds"
    );
    assert_eq!(lines.next().unwrap(), "gt,test,1.000000,0.000000,,");
    let per = fs::read_to_string(&table).unwrap();
    assert!(per.starts_with("method,id,dice_1,dice_2,dice_3,dice_4,mean_dice"));
    assert_eq!(per.lines().count(), 3);
}

#[test]
fn segment_without_weights_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_data(&data);
    let out = run(&[
        "segment",
        "--run",
        p(&dir.path().join("nothing")),
        "--input",
        p(&data.join("test000_t1.avol")),
        "--prior",
        p(&data.join("test000_prior.avol")),
        "--out",
        p(&dir.path().join("seg.avol")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(
        err.starts_with("error[data]:") && err.contains("missing weights"),
        "{err}"
    );
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_data(&data);
    let mut cfg = tiny_config(1e-3);
    cfg["unknown"] = json!(true);
    let path = dir.path().join("cfg.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let out = run(&[
        "train",
        "--data",
        p(&data),
        "--config",
        p(&path),
        "--out",
        p(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown"), "{}", stderr(&out));
}

#[test]
fn diverging_training_is_a_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_data(&data);
    let path = dir.path().join("cfg.json");
    fs::write(&path, tiny_config(1e30).to_string()).unwrap();
    let out = run(&[
        "train",
        "--data",
        p(&data),
        "--config",
        p(&path),
        "--out",
        p(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).starts_with("error[numerical]:"));
}

#[test]
fn full_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    gen_data(&data);
    let cfg = d.join("cfg.json");
    fs::write(&cfg, tiny_config(1e-3).to_string()).unwrap();
    for (run_dir, workers) in [("run_a", "1"), ("run_b", "3")] {
        ok(&[
            "train",
            "--data",
            p(&data),
            "--config",
            p(&cfg),
            "--out",
            p(&d.join(run_dir)),
            "--workers",
            workers,
        ]);
    }
    for scale in ["coarse", "fine"] {
        let mut n = 0;
        for entry in fs::read_dir(d.join("run_a").join(scale)).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "awts") {
                let other = d.join("run_b").join(scale).join(path.file_name().unwrap());
                assert_eq!(fs::read(&path).unwrap(), fs::read(other).unwrap(), "{}", path.display());
                n += 1;
            }
        }
        assert_eq!(n, 8);
    }

    let seg = d.join("seg.avol");
    ok(&[
        "segment",
        "--run",
        p(&d.join("run_a")),
        "--input",
        p(&data.join("test000_t1.avol")),
        "--mask",
        p(&data.join("test000_mask.avol")),
        "--prior",
        p(&data.join("test000_prior.avol")),
        "--out",
        p(&seg),
        "--dump-votes",
    ]);
    assert!(seg.is_file());
    assert!(d.join("seg_votes_4.avol").is_file());

    let r1 = d.join("r1.csv");
    let r2 = d.join("r2.csv");
    let segs = d.join("segs");
    ok(&[
        "report",
        "--runs",
        p(&d.join("run_a")),
        "--out",
        p(&r1),
        "--no-timing",
        "--save-segmentations",
        p(&segs),
    ]);
    ok(&[
        "report",
        "--runs",
        p(&d.join("run_b")),
        "--out",
        p(&r2),
        "--no-timing",
        "--workers",
        "2",
    ]);
    let (t1, t2) = (fs::read_to_string(&r1).unwrap(), fs::read_to_string(&r2).unwrap());
    assert_eq!(t1.replace("run_a", "run_b"), t2);
    assert_eq!(t1.lines().count(), 3);

    // segment and report agree on the same subject
    let from_report = fs::read(segs.join("run_a").join("test000_seg.avol")).unwrap();
    assert_eq!(from_report, fs::read(&seg).unwrap());

    let eval = d.join("eval.csv");
    ok(&[
        "evaluate",
        "--pred",
        &format!("run_a={}", p(&segs.join("run_a"))),
        "--gt",
        p(&data),
        "--out",
        p(&eval),
    ]);
    let row = fs::read_to_string(&eval).unwrap().lines().nth(1).unwrap().to_string();
    let cascade_row = t1.lines().nth(2).unwrap().replace("run_a:cascade", "run_a");
    assert_eq!(row.split(',').nth(2), cascade_row.split(',').nth(2));

    let sr = d.join("sr.csv");
    ok(&[
        "scan-rescan",
        "--run",
        p(&d.join("run_a")),
        "--data",
        p(&data),
        "--out",
        p(&sr),
    ]);
    let sr_text = fs::read_to_string(&sr).unwrap();
    assert!(sr_text.contains("intra-method,scan-rescan"));

    let ssl = d.join("ssl");
    ok(&[
        "ssl",
        "--run",
        p(&d.join("run_a")),
        "--data",
        p(&data),
        "--generations",
        "2",
        "--out",
        p(&ssl),
        "--pseudo-epochs",
        "1:1",
        "--finetune-epochs",
        "1:0",
    ]);
    let lineage: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ssl.join("lineage.json")).unwrap()).unwrap();
    let gens = lineage["generations"].as_array().unwrap();
    assert_eq!(gens.len(), 2);
    assert_eq!(gens[1]["manifest"]["teacher"], "student-1");
    assert!(gens.iter().all(|g| g["labeled_unused_in_pseudo_phase"] == true));
    let r3 = d.join("r3.csv");
    ok(&["report", "--runs", p(&d.join("run_a")), p(&ssl), "--out", p(&r3)]);
    assert_eq!(fs::read_to_string(&r3).unwrap().lines().count(), 7);

    let out = run(&[
        "ssl",
        "--run",
        p(&d.join("run_a")),
        "--data",
        p(&data),
        "--generations",
        "0",
        "--out",
        p(&ssl),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
