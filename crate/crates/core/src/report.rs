//! Metrics files and cross-run comparison.
//!
//! A run directory holds `metrics.jsonl` (one JSON object per round),
//! `summary.csv`, `manifest.json` and `timings.csv`. Only the last one
//! depends on wall-clock time.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{config_hash, config_to_map};
use crate::error::{FlError, Result};
use crate::federation::{FederationConfig, RoundRecord};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SUMMARY_HEADER: &str = "round,test_acc,test_loss,mean_train_loss";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub strategy: String,
    pub variant: String,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<String>,
    pub config: serde_json::Value,
}

impl RunManifest {
    pub fn new(cfg: &FederationConfig, started_at: impl Into<String>, finished_at: impl Into<String>) -> Self {
        RunManifest {
            config_hash: config_hash(cfg),
            seed: cfg.seed,
            strategy: cfg.aggregator.strategy.to_string(),
            variant: cfg.aggregator.variant.to_string(),
            started_at: started_at.into(),
            finished_at: finished_at.into(),
            outputs: [METRICS_FILE, SUMMARY_FILE, MANIFEST_FILE, TIMINGS_FILE]
                .map(String::from)
                .to_vec(),
            config: serde_json::to_value(config_to_map(cfg)).expect("config map serializes"),
        }
    }
}

/// Output directory for a run: `<root>/<first 16 hex digits of the config hash>`.
pub fn run_dir(root: &Path, config_hash: &str) -> PathBuf {
    root.join(&config_hash[..config_hash.len().min(16)])
}

pub fn metrics_jsonl(records: &[RoundRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn summary_csv(records: &[RoundRecord]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in records {
        // `{}` on f64 prints the shortest string that parses back exactly.
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.round, r.global_test_accuracy, r.global_test_loss, r.mean_local_train_loss
        );
    }
    out
}

fn write(path: PathBuf, contents: &str) -> Result<()> {
    fs::write(&path, contents).map_err(|e| FlError::io(path, e))
}

/// Writes the metrics files into `out_dir`, creating it if needed.
pub fn emit_metrics(records: &[RoundRecord], manifest: &RunManifest, out_dir: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(FlError::EmptyInput("no round records to write".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| FlError::io(out_dir, e))?;
    write(out_dir.join(METRICS_FILE), &metrics_jsonl(records))?;
    write(out_dir.join(SUMMARY_FILE), &summary_csv(records))?;
    let mut timings = String::from("round,wall_ms\n");
    for r in records {
        let _ = writeln!(timings, "{},{}", r.round, r.wall_ms);
    }
    write(out_dir.join(TIMINGS_FILE), &timings)?;
    let manifest_text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    write(out_dir.join(MANIFEST_FILE), &manifest_text)
}

pub fn read_metrics(run_dir: &Path) -> Result<Vec<RoundRecord>> {
    let path = run_dir.join(METRICS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| FlError::io(run_dir, e))?;
    let records = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| FlError::Corrupt {
                path: run_dir.to_path_buf(),
                reason: format!("{METRICS_FILE} line {}: {e}", i + 1),
            })
        })
        .collect::<Result<Vec<RoundRecord>>>()?;
    if records.is_empty() {
        return Err(FlError::Corrupt {
            path: run_dir.to_path_buf(),
            reason: format!("{METRICS_FILE} has no records"),
        });
    }
    Ok(records)
}

pub fn read_manifest(run_dir: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(run_dir.join(MANIFEST_FILE)).map_err(|e| FlError::io(run_dir, e))?;
    serde_json::from_str(&text).map_err(|e| FlError::Corrupt {
        path: run_dir.to_path_buf(),
        reason: format!("{MANIFEST_FILE}: {e}"),
    })
}

/// Parses `summary.csv` text back into `(round, acc, loss, train_loss)` rows.
pub fn parse_summary_csv(text: &str) -> Result<Vec<(usize, f64, f64, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some(SUMMARY_HEADER) {
        return Err(FlError::InvalidArgument("summary.csv header mismatch".into()));
    }
    lines
        .map(|line| {
            let bad = || FlError::InvalidArgument(format!("bad summary row `{line}`"));
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok((
                cols[0].parse().map_err(|_| bad())?,
                num(cols[1])?,
                num(cols[2])?,
                num(cols[3])?,
            ))
        })
        .collect()
}

/// First round whose test accuracy reaches `threshold`.
pub fn rounds_to_threshold(records: &[RoundRecord], threshold: f64) -> Option<usize> {
    records
        .iter()
        .find(|r| r.global_test_accuracy >= threshold)
        .map(|r| r.round)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub run: String,
    pub strategy: String,
    pub variant: String,
    pub final_test_acc: f64,
    pub best_test_acc: f64,
    pub rounds_to_threshold: Option<usize>,
}

pub fn compare_runs(dirs: &[PathBuf], threshold: f64) -> Result<Vec<ComparisonRow>> {
    dirs.iter()
        .map(|dir| {
            let records = read_metrics(dir)?;
            let manifest = read_manifest(dir)?;
            let last = records.last().expect("read_metrics rejects empty files");
            Ok(ComparisonRow {
                run: dir.display().to_string(),
                strategy: manifest.strategy,
                variant: manifest.variant,
                final_test_acc: last.global_test_accuracy,
                best_test_acc: records
                    .iter()
                    .map(|r| r.global_test_accuracy)
                    .fold(f64::NEG_INFINITY, f64::max),
                rounds_to_threshold: rounds_to_threshold(&records, threshold),
            })
        })
        .collect()
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("run,strategy,variant,final_test_acc,best_test_acc,rounds_to_threshold\n");
    for r in rows {
        let reach = r
            .rounds_to_threshold
            .map_or_else(|| "never".to_string(), |n| n.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.run, r.strategy, r.variant, r.final_test_acc, r.best_test_acc, reach
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(round: usize, acc: f64) -> RoundRecord {
        RoundRecord {
            round,
            global_test_accuracy: acc,
            global_test_loss: 1.0 / (round as f64 + 0.3),
            mean_local_train_loss: 0.1 * std::f64::consts::PI / round as f64,
            per_client_train_loss: vec![0.5, 0.25],
            wall_ms: 17,
        }
    }

    fn emit(dir: &Path, strategy: &str, accs: &[f64]) {
        let records: Vec<_> = accs.iter().enumerate().map(|(i, &a)| rec(i + 1, a)).collect();
        let mut cfg = FederationConfig::default();
        cfg.aggregator.strategy = strategy.parse().unwrap();
        emit_metrics(&records, &RunManifest::new(&cfg, "t0", "t1"), dir).unwrap();
    }

    #[test]
    fn writes_one_line_per_record() {
        let tmp = tempfile::tempdir().unwrap();
        emit(tmp.path(), "fedavg", &[0.1, 0.2, 0.3]);
        let text = fs::read_to_string(tmp.path().join(METRICS_FILE)).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(!text.contains("wall_ms"));
        let back = read_metrics(tmp.path()).unwrap();
        assert_eq!(back[2].global_test_accuracy, 0.3);
    }

    #[test]
    fn summary_roundtrips_exactly() {
        let records: Vec<_> = (1..=5).map(|r| rec(r, 1.0 / 3.0 * r as f64 / 5.0)).collect();
        let rows = parse_summary_csv(&summary_csv(&records)).unwrap();
        for (r, row) in records.iter().zip(rows) {
            assert_eq!(row.0, r.round);
            assert!((row.1 - r.global_test_accuracy).abs() <= 1e-12);
            assert_eq!(row.2, r.global_test_loss);
            assert_eq!(row.3, r.mean_local_train_loss);
        }
    }

    #[test]
    fn identical_records_give_identical_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        emit(a.path(), "ewwa", &[0.5, 0.7]);
        emit(b.path(), "ewwa", &[0.5, 0.7]);
        for f in [METRICS_FILE, SUMMARY_FILE, MANIFEST_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn comparison_counts_rounds_to_threshold() {
        let root = tempfile::tempdir().unwrap();
        let fast = root.path().join("fast");
        let slow = root.path().join("slow");
        emit(&fast, "ewwa", &[0.3, 0.86, 0.84, 0.9]);
        emit(&slow, "fedavg", &[0.2, 0.5, 0.8, 0.85, 0.87]);
        let rows = compare_runs(&[fast.clone(), slow.clone()], 0.85).unwrap();
        assert_eq!(rows[0].rounds_to_threshold, Some(2));
        assert_eq!(rows[1].rounds_to_threshold, Some(4));
        assert_eq!(rows[0].final_test_acc, 0.9);
        assert_eq!(rows[1].best_test_acc, 0.87);
        assert_eq!(rows[0].strategy, "ewwa");

        let single = compare_runs(&[fast], 0.95).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].rounds_to_threshold, None);
        let csv = comparison_csv(&single);
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.trim_end().ends_with(",never"));
    }

    #[test]
    fn missing_or_corrupt_metrics_name_the_dir() {
        let root = tempfile::tempdir().unwrap();
        let missing = root.path().join("nope");
        match compare_runs(std::slice::from_ref(&missing), 0.5) {
            Err(FlError::Io { path, .. }) => assert_eq!(path, missing),
            other => panic!("unexpected {other:?}"),
        }
        let corrupt = root.path().join("bad");
        fs::create_dir_all(&corrupt).unwrap();
        fs::write(corrupt.join(METRICS_FILE), "{not json}\n").unwrap();
        match compare_runs(std::slice::from_ref(&corrupt), 0.5) {
            Err(FlError::Corrupt { path, .. }) => assert_eq!(path, corrupt),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_records_rejected_and_layout_is_hash_prefix() {
        let tmp = tempfile::tempdir().unwrap();
        let m = RunManifest::new(&FederationConfig::default(), "a", "b");
        assert!(emit_metrics(&[], &m, tmp.path()).is_err());
        let d = run_dir(Path::new("/out"), &m.config_hash);
        assert_eq!(d, Path::new("/out").join(&m.config_hash[..16]));
    }
}
