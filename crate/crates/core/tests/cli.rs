mod common;

use std::path::Path;
use std::time::Instant;

use common::{icon, icon_ok, tree};
use icon::dataset::read_dataset;
use icon::synthdata::task_file_name;
use icon::trainer::{init_state, load_run, FlowConfig, TrainConfig};

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn default_gen_writes_four_tasks_of_sixteen_dims() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    icon_ok(&["gen", "--seed", "0", "--out", s(&out)]);
    for t in 1..=4 {
        let d = read_dataset(&out.join(task_file_name(t)), t).unwrap();
        assert_eq!(d.x.shape(), (10_000, 16));
        assert_eq!(d.z_true.unwrap().shape(), (10_000, 16));
    }
    assert!(!out.join(task_file_name(5)).exists());
}

#[test]
fn gen_flags_override_task_count_and_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    icon_ok(&["gen", "--seed", "1", "--tasks", "2", "--n", "500", "--out", s(&out)]);
    assert_eq!(read_dataset(&out.join(task_file_name(2)), 2).unwrap().x.rows(), 500);
    assert!(!out.join(task_file_name(3)).exists());
}

#[test]
fn same_seed_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        icon_ok(&["gen", "--seed", "7", "--tasks", "2", "--n", "300", "--out", s(out)]);
    }
    assert_eq!(tree(&a), tree(&b));
    let c = dir.path().join("c");
    icon_ok(&["gen", "--seed", "8", "--tasks", "2", "--n", "300", "--out", s(&c)]);
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn zero_epochs_store_the_initial_flows() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    icon_ok(&["gen", "--seed", "3", "--tasks", "2", "--n", "200", "--out", s(&data)]);
    let cfg = write_config(
        dir.path(),
        r#"{"seed": 3, "flow": {"n_blocks": 2, "width": 8},
            "train": {"epochs_stage1": 0, "epochs_stage2": 0}}"#,
    );
    let out = dir.path().join("run");
    icon_ok(&["train", "--config", &cfg, "--data", s(&data), "--out", s(&out)]);
    let (bank, _, manifest) = load_run(&out, None).unwrap();
    let flow = FlowConfig {
        n_blocks: 2,
        width: 8,
        latent_dim: None,
    };
    let init = init_state(16, &flow, &TrainConfig::default(), None, 3).unwrap();
    assert_eq!(manifest.tasks, 2);
    assert_eq!(bank.ata.params, init.bank.ata.params);
    assert_eq!(bank.pta[0].params, init.bank.ata.params);
}

#[test]
fn exit_codes_distinguish_usage_config_and_numerics() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(icon(&["--help"]).status.code(), Some(0));
    assert_eq!(icon(&["frobnicate"]).status.code(), Some(2));
    // No config file means the seed must be given.
    assert_eq!(icon(&["gen", "--out", s(&dir.path().join("x"))]).status.code(), Some(2));
    let bad = write_config(dir.path(), r#"{"seed": 1, "trian": {}}"#);
    assert_eq!(icon(&["gen", "--config", &bad, "--out", s(&dir.path().join("y"))]).status.code(), Some(2));

    let data = dir.path().join("data");
    icon_ok(&["gen", "--seed", "2", "--tasks", "1", "--n", "400", "--out", s(&data)]);
    let wild = write_config(
        dir.path(),
        r#"{"seed": 2, "flow": {"n_blocks": 2, "width": 8},
            "train": {"lr0": 1e300, "weight_decay": 0.0, "epochs_stage1": 20, "epochs_stage2": 0}}"#,
    );
    let out = icon(&["train", "--config", &wild, "--data", s(&data), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn rejected_configs_leave_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    icon_ok(&["gen", "--seed", "4", "--tasks", "1", "--n", "200", "--out", s(&data)]);
    let bad = write_config(dir.path(), r#"{"seed": 4, "train": {"batch_size": 0}}"#);
    let out = dir.path().join("run");
    let res = icon(&["train", "--config", &bad, "--data", s(&data), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
    let gen_out = dir.path().join("gen");
    assert_eq!(icon(&["gen", "--seed", "4", "--tasks", "0", "--out", s(&gen_out)]).status.code(), Some(2));
    assert!(!gen_out.exists());
}

#[test]
fn invalid_thread_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = std::process::Command::new(common::bin())
        .args(["gen", "--seed", "0", "--tasks", "1", "--n", "10", "--out", s(&dir.path().join("d"))])
        .env("ICON_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ICON_THREADS"));
}

#[test]
fn verify_on_the_default_sample_is_quick() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    icon_ok(&["gen", "--seed", "5", "--tasks", "2", "--n", "2500", "--out", s(&data)]);
    let start = Instant::now();
    icon_ok(&["verify", "--seed", "5", "--data", s(&data), "--out", s(&dir.path().join("v"))]);
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "verify took {secs:.1}s");
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("v").join("theorem.json")).unwrap()).unwrap();
    assert!(report.get("failures").is_some());
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), common::TINY_CONFIG);
    let data = dir.path().join("data");
    icon_ok(&["gen", "--config", &cfg, "--out", s(&data)]);
    let run = |threads: &str| {
        let out = dir.path().join(format!("run{threads}"));
        let res = std::process::Command::new(common::bin())
            .args(["train", "--config", &cfg, "--data", s(&data), "--out", s(&out)])
            .env("ICON_THREADS", threads)
            .env("RUST_LOG", "error")
            .output()
            .unwrap();
        assert!(res.status.success());
        tree(&out)
    };
    assert_eq!(run("1"), run("3"));
}
