use std::path::Path;
use std::process::{Command, Output};

fn prunekit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prunekit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_data(dir: &Path) {
    let out = prunekit(&[
        "generate-synthetic",
        "--train-per-class",
        "30",
        "--test-per-class",
        "15",
        "--out-dir",
        s(dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn csv_column(text: &str, column: usize) -> Vec<String> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').nth(column).unwrap().to_string())
        .collect()
}

#[test]
fn synthetic_generation_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    tiny_data(a.path());
    tiny_data(b.path());
    for f in ["train.pkds", "test.pkds"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
}

#[test]
fn one_class_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = prunekit(&["generate-synthetic", "--classes", "1", "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 1);
    assert!(!dir.path().join("train.pkds").exists());
}

#[test]
fn bad_flags_exit_one_and_help_exits_zero() {
    assert_eq!(code(&prunekit(&["prune"])), 1);
    assert_eq!(code(&prunekit(&["frobnicate"])), 1);
    assert_eq!(code(&prunekit(&["--help"])), 0);
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "epochs = 1\nlearning_rate = 0.1\n").unwrap();
    let out = prunekit(&["train", "--data", s(dir.path()), "--config", s(&conf), "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn missing_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = prunekit(&["train", "--data", s(&dir.path().join("nowhere")), "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 2);
}

#[test]
fn corrupt_checkpoint_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("junk.ckpt");
    std::fs::write(&ckpt, "not a checkpoint\n").unwrap();
    let out = prunekit(&["report", "--checkpoint", s(&ckpt), "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_prune_report_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_data(d);
    let train_conf = d.join("train.in");
    std::fs::write(&train_conf, "widths = 8,12,12\nepochs = 2\n").unwrap();
    let base_dir = d.join("base");
    let out = prunekit(&["train", "--data", s(d), "--config", s(&train_conf), "--out-dir", s(&base_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let baseline = base_dir.join("baseline.ckpt");

    // An unpruned baseline reports no reduction anywhere.
    let rep = d.join("rep_base");
    assert_eq!(code(&prunekit(&["report", "--checkpoint", s(&baseline), "--out-dir", s(&rep)])), 0);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(rep.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["flops_reduction_pct"], 0.0);
    assert_eq!(summary["params_reduction_pct"], 0.0);
    let widths = std::fs::read_to_string(rep.join("widths.csv")).unwrap();
    assert!(csv_column(&widths, 3).iter().all(|p| p == "0.00"));

    let prune_conf = d.join("prune.in");
    std::fs::write(
        &prune_conf,
        "mode = tick-tock\ntick_prune_fraction = 0.05\nticks_per_tock = 2\ntock_epochs = 1\nfinetune_epochs = 1\ntick_subset = per-class:10\nmin_channels = 2\n",
    )
    .unwrap();
    let pr = d.join("pruned");
    let run = |out_dir: &Path| {
        prunekit(&[
            "prune",
            "--baseline",
            s(&baseline),
            "--data",
            s(d),
            "--config",
            s(&prune_conf),
            "--out-dir",
            s(out_dir),
        ])
    };
    let out = run(&pr);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["pruned.ckpt", "runlog.jsonl", "cost.json", "cost.csv", "importance.csv", "groups.json", "summary.csv", "widths.csv", "pipeline.conf"] {
        assert!(pr.join(f).exists(), "{f}");
    }

    // Same config and seed: identical importance exports.
    let pr2 = d.join("pruned2");
    assert_eq!(code(&run(&pr2)), 0);
    assert_eq!(
        std::fs::read(pr.join("importance.csv")).unwrap(),
        std::fs::read(pr2.join("importance.csv")).unwrap()
    );

    let rep = d.join("rep_pruned");
    let out = prunekit(&[
        "report",
        "--checkpoint",
        s(&pr.join("pruned.ckpt")),
        "--runlog",
        s(&pr.join("runlog.jsonl")),
        "--out-dir",
        s(&rep),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(rep.join("summary.json")).unwrap()).unwrap();
    assert!(summary["flops_reduction_pct"].as_f64().unwrap() >= 40.0);
    let widths = std::fs::read_to_string(rep.join("widths.csv")).unwrap();
    let channels: Vec<usize> = csv_column(&widths, 2).iter().map(|c| c.parse().unwrap()).collect();
    let cost = std::fs::read_to_string(rep.join("cost.csv")).unwrap();
    let cost_channels: Vec<usize> = csv_column(&cost, 2)
        .iter()
        .zip(csv_column(&cost, 1))
        .filter(|(_, op)| op == "conv2d")
        .map(|(c, _)| c.parse().unwrap())
        .collect();
    assert_eq!(channels, cost_channels);
    assert!(rep.join("phases.csv").exists());
    assert!(rep.join("groups.json").exists());

    let ev = d.join("eval");
    let out = prunekit(&["eval", "--checkpoint", s(&pr.join("pruned.ckpt")), "--data", s(d), "--out-dir", s(&ev)]);
    assert_eq!(code(&out), 0);
    let eval: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    let acc = eval["accuracy"].as_f64().unwrap();
    let recorded = summary["accuracy"].as_f64().unwrap();
    assert!((acc - recorded).abs() < 1e-9, "{acc} vs {recorded}");
}

#[test]
fn unreachable_target_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_data(d);
    let conf = d.join("train.in");
    std::fs::write(&conf, "widths = 4,6\nepochs = 1\n").unwrap();
    assert_eq!(code(&prunekit(&["train", "--data", s(d), "--config", s(&conf), "--out-dir", s(d)])), 0);
    let prune_conf = d.join("prune.in");
    std::fs::write(
        &prune_conf,
        "mode = one-shot\nflops_target = 0.05\nmin_channels = 3\nfinetune_epochs = 1\ntick_subset = per-class:10\n",
    )
    .unwrap();
    let out = prunekit(&[
        "prune",
        "--baseline",
        s(&d.join("baseline.ckpt")),
        "--data",
        s(d),
        "--config",
        s(&prune_conf),
        "--out-dir",
        s(d),
    ]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("pruned.ckpt").exists());
}
