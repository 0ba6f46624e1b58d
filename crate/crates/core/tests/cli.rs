//! End-to-end runs of the `finevl` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

const CONFIG: &str = r#"seed = 3

[model]
hidden_dim = 16
proj_dim = 8
vision_layers = 1
text_layers = 1
cross_layers = 1
heads = 2
mlp_ratio = 2

[objectives]
loss = "full"
sources = "all"

[train]
steps = 12
caption_batch = 2
detection_batch = 2
cadence = 4

[data]
scenes = 12

[eval]
per_subtask = 3
retrieval_size = 4
retrieval_k = [1, 2]
"#;

fn finevl(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_finevl"))
        .args(args)
        .output()
        .expect("binary runs")
        .status
        .code()
        .expect("exit code")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn pipeline(config: &str, out: &Path) {
    let out = out.to_str().unwrap();
    for cmd in ["gen-data", "train", "eval", "dynamics", "report"] {
        assert_eq!(finevl(&[cmd, "--config", config, "--out", out]), 0, "{cmd}");
    }
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn pipeline_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), CONFIG);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline(&config, &a);
    pipeline(&config, &b);
    let (ta, tb) = (tree(&a), tree(&b));
    for name in [
        "config.toml",
        "data/train.tsv",
        "data/eval_manifest.json",
        "checkpoints/step-0000012.ckpt",
        "logs/loss.tsv",
        "reports/eval-step-0000012.tsv",
        "reports/eval-step-0000012.json",
        "reports/scores-step-0000012.tsv",
        "reports/trajectory.tsv",
        "reports/correlations.tsv",
        "reports/summary.tsv",
    ] {
        assert!(ta.contains_key(Path::new(name)), "missing {name}");
    }
    assert_eq!(ta, tb);
    let log = String::from_utf8(ta[Path::new("logs/loss.tsv")].clone()).unwrap();
    assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 13);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), CONFIG);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = dir.to_str().unwrap();
        assert_eq!(finevl(&["gen-data", "--config", &config, "--out", out]), 0);
        assert_eq!(finevl(&["train", "--config", &config, "--out", out]), 0);
    }
    for step in [8, 12] {
        fs::remove_file(b.join(format!("checkpoints/step-{step:07}.ckpt"))).unwrap();
    }
    assert_eq!(finevl(&["train", "--config", &config, "--out", b.to_str().unwrap()]), 0);
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let out = out.to_str().unwrap();
    let missing = tmp.path().join("missing.toml");
    assert_eq!(finevl(&["train", "--config", missing.to_str().unwrap(), "--out", out]), 3);

    let bad = write_config(tmp.path(), &CONFIG.replace("heads = 2", "heads = 3"));
    assert_eq!(finevl(&["gen-data", "--config", &bad, "--out", out]), 2);
    let unknown = write_config(tmp.path(), &format!("{CONFIG}\n[extra]\nx = 1\n"));
    assert_eq!(finevl(&["gen-data", "--config", &unknown, "--out", out]), 2);
    assert_eq!(finevl(&["frobnicate"]), 2);

    let config = write_config(tmp.path(), CONFIG);
    assert_eq!(finevl(&["train", "--config", &config, "--out", out]), 3, "training without data");
    assert_eq!(finevl(&["gen-data", "--config", &config, "--out", out]), 0);
    let other = write_config(tmp.path(), &CONFIG.replace("seed = 3", "seed = 4"));
    assert_eq!(finevl(&["train", "--config", &other, "--out", out]), 3, "hash mismatch");
    assert_eq!(
        finevl(&["ablate", "--config", &config, "--out", out, "--grid", "losses=full;sources=captions"]),
        2
    );
}

#[test]
fn ablation_grid_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &CONFIG.replace("steps = 12", "steps = 4"));
    let out = tmp.path().join("grid");
    let grid = "losses=A,full;sources=all|captions+region_descriptions";
    assert_eq!(finevl(&["ablate", "--config", &config, "--out", out.to_str().unwrap(), "--grid", grid]), 0);
    let summary = fs::read_to_string(out.join("ablation_summary.tsv")).unwrap();
    let rows: Vec<&str> = summary.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 5, "header plus four rows");
    assert!(rows[0].starts_with("row\tcaptions\tobject_labels"));
    assert!(out.join("03_full_captions-region_descriptions/reports").is_dir());
}
