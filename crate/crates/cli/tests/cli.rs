use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ewwa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ewwa")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = r#"{
    "strategy": "ewwa", "model_kind": "softmax_regression", "rounds": 4,
    "synth_classes": 4, "synth_per_class": 30, "synth_dim": 5, "seed": 3
}"#;

fn single_run_dir(out: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

#[test]
fn run_writes_every_output_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", SMALL);
    let out = tmp.path().join("runs");
    let res = ewwa(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let dir = single_run_dir(&out);
    assert_eq!(dir.file_name().unwrap().len(), 16);
    for file in [
        "metrics.jsonl",
        "summary.csv",
        "manifest.json",
        "timings.csv",
        "config.json",
    ] {
        assert!(dir.join(file).is_file(), "missing {file}");
    }
    let metrics = fs::read_to_string(dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    let summary = fs::read_to_string(dir.join("summary.csv")).unwrap();
    assert!(summary.starts_with("round,test_acc,test_loss,mean_train_loss\n"));
}

#[test]
fn same_seed_gives_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", SMALL);
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let res = ewwa(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(res.status.success());
        files.push(fs::read(single_run_dir(&out).join("metrics.jsonl")).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn resume_continues_from_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let full_cfg = SMALL.replace("\"rounds\": 4", "\"rounds\": 6, \"checkpoint_every\": 4");
    let cfg = write_config(tmp.path(), "c.json", &full_cfg);
    let straight = tmp.path().join("straight");
    assert!(ewwa(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        straight.to_str().unwrap()
    ])
    .status
    .success());
    let expected = fs::read(single_run_dir(&straight).join("metrics.jsonl")).unwrap();

    // The checkpoint holds round 4, so resuming recomputes rounds 5 and 6.
    let res = ewwa(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        straight.to_str().unwrap(),
        "--resume",
    ]);
    assert!(res.status.success());
    assert_eq!(
        fs::read(single_run_dir(&straight).join("metrics.jsonl")).unwrap(),
        expected
    );
}

#[test]
fn config_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let cases = [
        ("unknown.json", r#"{"strategy": "ewwa", "bogus_key": 1}"#, "bogus_key"),
        ("bad.json", r#"{"strategy": "fedsomething"}"#, "strategy"),
        ("zero.json", r#"{"rounds": 0}"#, "rounds"),
        ("syntax.json", "{not json", ""),
    ];
    for (name, body, key) in cases {
        let cfg = write_config(tmp.path(), name, body);
        let res = ewwa(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(res.status.code(), Some(1), "{name}");
        assert!(String::from_utf8_lossy(&res.stderr).contains(key), "{name}");
    }
    let missing = tmp.path().join("absent.json");
    let res = ewwa(&["partition-preview", "--config", missing.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"data_source": "idx", "images_path": "/nonexistent/images", "labels_path": "/nonexistent/labels"}"#,
    );
    let out = tmp.path().join("runs");
    let res = ewwa(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));

    let res = ewwa(&[
        "compare",
        "--runs",
        tmp.path().join("nope").to_str().unwrap(),
        "--threshold",
        "0.5",
    ]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn partition_preview_prints_histograms() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        &SMALL.replace(
            "\"seed\": 3",
            "\"seed\": 3, \"partition\": \"label_skew\", \"concentration\": 0.2",
        ),
    );
    let res = ewwa(&["partition-preview", "--config", cfg.to_str().unwrap()]);
    assert!(res.status.success());
    let text = String::from_utf8(res.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "client,total,c0,c1,c2,c3");
    assert_eq!(lines.len(), 4);
    let total: usize = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap())
        .sum();
    // 120 samples, 90% kept for training.
    assert_eq!(total, 108);
}

#[test]
fn compare_tabulates_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    for strategy in ["fedavg", "ewwa"] {
        let cfg = write_config(
            tmp.path(),
            "c.json",
            &SMALL.replace("\"ewwa\"", &format!("\"{strategy}\"")),
        );
        assert!(
            ewwa(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
                .status
                .success()
        );
    }
    let runs: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path().to_string_lossy().into_owned())
        .collect();
    let table = tmp.path().join("comparison.csv");
    let mut args = vec![
        "compare",
        "--threshold",
        "2.0",
        "--out",
        table.to_str().unwrap(),
        "--runs",
    ];
    args.extend(runs.iter().map(String::as_str));
    let res = ewwa(&args);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = fs::read_to_string(table).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "run,strategy,variant,final_test_acc,best_test_acc,rounds_to_threshold"
    );
    assert_eq!(lines.len(), 3);
    assert!(lines[1..].iter().all(|l| l.ends_with(",never")));
}
