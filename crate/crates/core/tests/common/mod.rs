#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use icon::dataset::{Split, TaskDataset};
use icon::flow::{init_flow, FlowParams};
use icon::numerics::{Matrix, RngStream};

/// Initialised flow with every parameter jittered by `scale·N(0,1)`, so that
/// the couplings are no longer pure permutations.
pub fn randomized_flow(k: usize, n: usize, blocks: usize, width: usize, seed: u64, scale: f64) -> FlowParams {
    let mut rng = RngStream::new(seed, 100);
    let mut f = init_flow(k, n, blocks, width, &mut rng).unwrap();
    for v in f.params.values_mut() {
        *v += scale * rng.normal();
    }
    f
}

/// `t` Gaussian toy tasks of dimension `k`, task `i` shifted by `i` on the
/// first coordinate.
pub fn gaussian_tasks(t: usize, n: usize, k: usize, seed: u64) -> Vec<TaskDataset> {
    let mut rng = RngStream::new(seed, 200);
    (1..=t)
        .map(|i| {
            let mut x = rng.normal_matrix(n, k);
            for r in 0..n {
                x.set(r, 0, x.get(r, 0) + i as f64);
            }
            TaskDataset::new(i, x, None, None, Split::Train).unwrap()
        })
        .collect()
}

pub fn pooled(sets: &[TaskDataset]) -> (Matrix, Vec<usize>) {
    let x = Matrix::vcat(&sets.iter().map(|d| &d.x).collect::<Vec<_>>()).unwrap();
    let y = sets.iter().flat_map(|d| d.labels.clone().unwrap_or_default()).collect();
    (x, y)
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_icon"))
}

/// Runs the binary with `args`, logging silenced.
pub fn icon(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

pub fn icon_ok(args: &[&str]) {
    let out = icon(args);
    assert!(
        out.status.success(),
        "icon {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Every file below `dir`, keyed by relative path.
pub fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<String, Vec<u8>>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, acc);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                acc.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    if dir.exists() {
        walk(dir, dir, &mut acc);
    }
    acc
}

/// Small configuration that exercises every command in a few seconds.
pub const TINY_CONFIG: &str = r#"{
  "seed": 11,
  "data": {"tasks": 2, "n_per_task": 1200},
  "flow": {"n_blocks": 2, "width": 8},
  "train": {"epochs_stage1": 2, "epochs_stage2": 2, "replay_size": 100, "batch_size": 128},
  "verify": {"n": 300},
  "classify": {
    "benchmark": {"dim": 16, "per_class_train": 20, "per_class_test": 10},
    "flow": {"n_blocks": 1, "width": 8},
    "train": {"epochs_stage1": 1, "epochs_stage2": 1, "batch_size": 64}
  }
}
"#;

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

/// Runs every subcommand on [`TINY_CONFIG`] below `root`.
pub fn run_pipeline(root: &Path) {
    std::fs::create_dir_all(root).unwrap();
    let cfg = root.join("config.json");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let c = cfg.to_str().unwrap();
    let p = |name: &str| root.join(name).to_str().unwrap().to_string();
    icon_ok(&["gen", "--config", c, "--out", &p("data")]);
    icon_ok(&["train", "--config", c, "--data", &p("data"), "--out", &p("kl")]);
    icon_ok(&["train", "--config", c, "--data", &p("data"), "--out", &p("nokl"), "--no-kl"]);
    icon_ok(&[
        "eval", "--config", c, "--data", &p("data"), "--checkpoints", &p("kl"), "--baseline", &p("nokl"), "--out", &p("eval"),
    ]);
    icon_ok(&["export", "--config", c, "--data", &p("data"), "--checkpoints", &p("kl"), "--out", &p("export")]);
    icon_ok(&["verify", "--config", c, "--data", &p("data"), "--out", &p("verify")]);
    icon_ok(&["verify", "--config", c, "--data", &p("data"), "--checkpoints", &p("kl"), "--out", &p("verify_ckpt")]);
    icon_ok(&["classify", "--config", c, "--out", &p("classify")]);
}
