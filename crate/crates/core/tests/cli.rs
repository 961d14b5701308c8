use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use driftharness::cli::PreparedCorpus;

fn harness(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_driftharness"))
        .current_dir(dir)
        .args(args)
        .env("DRIFTHARNESS_WORKERS", "2")
        .output()
        .expect("spawn driftharness");
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "driftharness {args:?} failed\nstdout:\n{stdout}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn csv_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    lines
        .map(|l| {
            header
                .iter()
                .map(|h| h.to_string())
                .zip(l.split(',').map(str::to_string))
                .collect()
        })
        .collect()
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    harness(
        dir,
        &[
            "synth",
            "--out",
            "corpus.jsonl",
            "--seed",
            "2",
            "--per-window",
            "30",
            "--config-out",
            "run.toml",
        ],
    );

    // prepare is deterministic and idempotent on its own output
    harness(dir, &["prepare", "--config", "run.toml", "--out", "a"]);
    harness(dir, &["prepare", "--config", "run.toml", "--out", "b"]);
    assert_eq!(
        fs::read(dir.join("a/windows.json")).unwrap(),
        fs::read(dir.join("b/windows.json")).unwrap()
    );
    harness(
        dir,
        &[
            "prepare",
            "--config",
            "run.toml",
            "--corpus",
            "a/corpus.dedup.jsonl",
            "--out",
            "c",
        ],
    );
    let first = PreparedCorpus::load(&dir.join("a")).unwrap();
    let again = PreparedCorpus::load(&dir.join("c")).unwrap();
    assert_eq!(again.removed, 0);
    assert_eq!(again.windows, first.windows);

    let run = harness(
        dir,
        &[
            "run",
            "--config",
            "run.toml",
            "--out",
            "a",
            "--strategy",
            "window_only,hybrid_casr",
            "--seed",
            "1,2",
        ],
    );
    assert_eq!(run.lines().filter(|l| l.starts_with("ok")).count(), 4, "{run}");

    harness(dir, &["report", "--out", "a"]);
    let summary = csv_rows(&dir.join("a/summary.csv"));
    assert_eq!(summary.len(), 2);
    for row in &summary {
        let method = &row["method"];
        // recompute the mean forward F1 from the raw ledgers
        let mut per_window: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for seed in [1, 2] {
            for r in csv_rows(&dir.join(format!("a/ledgers/{method}_seed{seed}/forward.csv"))) {
                if let Ok(f1) = r["f1"].parse::<f64>() {
                    per_window.entry(r["t"].parse().unwrap()).or_default().push(f1);
                }
            }
        }
        let means: Vec<f64> = per_window
            .values()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
            .collect();
        let expected = means.iter().sum::<f64>() / means.len() as f64;
        assert_eq!(row["mean_f1"], format!("{expected:.6}"), "{method}");
    }
    assert!(dir.join("a/delta.csv").exists());
    assert!(dir.join("a/series/hybrid_casr_backward.csv").exists());

    let ledger = dir.join("a/ledgers/hybrid_casr_seed1");
    let ledger = ledger.to_str().unwrap();
    harness(dir, &["compare", ledger, ledger, "--out", "cmp"]);
    let row = &csv_rows(&dir.join("cmp/compare.csv"))[0];
    assert_eq!(row["p_value"].parse::<f64>().unwrap(), 1.0);
    assert_eq!(row["cliffs_delta"].parse::<f64>().unwrap(), 0.0);
    assert_eq!(row["mean_delta"].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn run_rejects_mismatched_granularity() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    harness(
        dir,
        &[
            "synth",
            "--out",
            "corpus.jsonl",
            "--per-window",
            "10",
            "--config-out",
            "run.toml",
        ],
    );
    harness(dir, &["prepare", "--config", "run.toml", "--out", "w"]);
    let out = Command::new(env!("CARGO_BIN_EXE_driftharness"))
        .current_dir(dir)
        .args(["run", "--config", "run.toml", "--out", "w", "--granularity", "3m"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("prepare again"));
}
