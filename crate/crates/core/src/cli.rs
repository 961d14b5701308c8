//! Command implementations behind the `driftharness` binary.
//!
//! Output layout under the run directory:
//!
//! ```text
//! windows.json            prepared, deduplicated, windowed corpus
//! corpus.dedup.jsonl      deduplicated corpus
//! stats.csv               per-window count and prevalence
//! stats_summary.csv       median and IQR of the above
//! run_config.toml         resolved configuration of the last `run`
//! ledgers/<strategy>_seed<n>/{ledger.json,forward.csv,backward.csv}
//! summary.csv, delta.csv, series/*.csv
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Datelike, Months, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{
    corpus_stats, deduplicate, load_corpus, segment, write_corpus, DateRange, Granularity, Instance, Window,
    KEY_ALGORITHM,
};
use crate::error::{Error, Result};
use crate::metrics::{common_windows, delta_csv, delta_table, summarize, summary_csv, MethodSeries, WinRule};
use crate::protocol::{run_forward_chain, ChainOptions, RunLedger};
use crate::stats::{cliffs_delta, wilcoxon_signed_rank};
use crate::strategies::StrategyKind;

pub const PREPARED_FILE: &str = "windows.json";
pub const PREPARED_FORMAT: &str = "driftharness-windows";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedCorpus {
    pub format: String,
    pub key_algorithm: String,
    pub granularity: Granularity,
    pub date_range: DateRange,
    pub input_count: usize,
    pub removed: usize,
    pub windows: Vec<Window>,
}

impl PreparedCorpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(PREPARED_FILE);
        let text = fs::read_to_string(&path).map_err(|e| {
            Error::io(
                format!("reading {} (run `driftharness prepare` first)", path.display()),
                e,
            )
        })?;
        let prepared: PreparedCorpus = serde_json::from_str(&text)?;
        if prepared.format != PREPARED_FORMAT || prepared.key_algorithm != KEY_ALGORITHM {
            return Err(Error::Config(format!(
                "{} was written by an incompatible version",
                path.display()
            )));
        }
        Ok(prepared)
    }
}

/// Smallest month-aligned range covering every instance.
pub fn covering_range(instances: &[Instance]) -> Result<DateRange> {
    let first = instances.iter().map(|i| i.disclosure_date).min();
    let last = instances.iter().map(|i| i.disclosure_date).max();
    let (Some(first), Some(last)) = (first, last) else {
        return Err(Error::validation("corpus is empty"));
    };
    let start = NaiveDate::from_ymd_opt(first.year(), first.month(), 1).expect("valid month start");
    let end = NaiveDate::from_ymd_opt(last.year(), last.month(), 1).expect("valid month start") + Months::new(1);
    DateRange::new(start, end.pred_opt().expect("date has a predecessor"))
}

pub fn prepare(instances: Vec<Instance>, range: Option<DateRange>, granularity: Granularity) -> Result<PreparedCorpus> {
    if instances.is_empty() {
        return Err(Error::validation("corpus is empty"));
    }
    let input_count = instances.len();
    let kept = deduplicate(&instances);
    let range = match range {
        Some(r) => r,
        None => covering_range(&kept)?,
    };
    let windows = segment(&kept, &range, granularity)?;
    Ok(PreparedCorpus {
        format: PREPARED_FORMAT.into(),
        key_algorithm: KEY_ALGORITHM.into(),
        granularity,
        date_range: range,
        input_count,
        removed: input_count - kept.len(),
        windows,
    })
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Loads, deduplicates and windows the corpus, then writes the prepared
/// artifact and its statistics into the output directory.
pub fn cmd_prepare(cfg: &RunConfig) -> Result<PreparedCorpus> {
    let corpus = cfg
        .corpus
        .as_ref()
        .ok_or_else(|| Error::Config("no corpus given (set `corpus` or pass --corpus)".into()))?;
    let prepared = prepare(load_corpus(corpus)?, cfg.date_range, cfg.granularity)?;
    let stats = corpus_stats(&prepared.windows);
    let kept: Vec<Instance> = prepared
        .windows
        .iter()
        .flat_map(|w| w.instances.iter().cloned())
        .collect();
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(format!("creating {}", cfg.out.display()), e))?;
    write_corpus(&cfg.out.join("corpus.dedup.jsonl"), &kept)?;
    write_file(&cfg.out.join("stats.csv"), &stats.to_csv())?;
    write_file(&cfg.out.join("stats_summary.csv"), &stats.summary_csv())?;
    write_file(&cfg.out.join(PREPARED_FILE), &serde_json::to_string(&prepared)?)?;
    Ok(prepared)
}

pub fn ledger_dir_name(kind: StrategyKind, seed: u64) -> String {
    format!("{kind}_seed{seed}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub dir: PathBuf,
    pub result: std::result::Result<usize, String>,
}

/// Runs one forward chain per (strategy, seed) on the prepared windows and
/// writes each ledger. A failing run is reported and leaves its siblings alone.
pub fn run_all(cfg: &RunConfig, windows: &[Window]) -> Result<Vec<RunOutcome>> {
    cfg.validate()?;
    let jobs: Vec<(StrategyKind, u64)> = cfg
        .strategies
        .iter()
        .flat_map(|&k| cfg.seeds.iter().map(move |&s| (k, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.worker_count())
        .build()
        .map_err(|e| Error::Config(format!("building worker pool: {e}")))?;
    let ledger_root = cfg.out.join("ledgers");
    let outcomes = pool.install(|| {
        jobs.par_iter()
            .map(|&(kind, seed)| {
                let dir = ledger_root.join(ledger_dir_name(kind, seed));
                let result = run_one(cfg, windows, kind, seed, &dir).map_err(|e| e.to_string());
                if let Err(e) = &result {
                    log::error!("{kind} seed {seed}: {e}");
                }
                RunOutcome {
                    strategy: kind,
                    seed,
                    dir,
                    result,
                }
            })
            .collect()
    });
    Ok(outcomes)
}

fn run_one(cfg: &RunConfig, windows: &[Window], kind: StrategyKind, seed: u64, dir: &Path) -> Result<usize> {
    let spec = cfg.strategy_spec(kind);
    let train = cfg.train_config(seed);
    let mut backend = cfg.backend.instantiate(&cfg.adapter)?;
    let options = ChainOptions {
        lags: cfg.lags.clone(),
        verify_checkpoint: cfg.verify_checkpoint,
        adapter: cfg.adapter,
        backend_name: cfg.backend.to_string(),
    };
    let ledger = run_forward_chain(windows, &spec, &train, backend.as_mut(), &options)?;
    if ledger.forward().is_empty() {
        let reason = ledger
            .gaps()
            .first()
            .map_or("no trainable window", |g| g.reason.as_str());
        return Err(Error::Config(format!("no window was trained ({reason})")));
    }
    ledger.write(dir)?;
    log::info!(
        "{kind} seed {seed}: {} forward scores, {} gaps",
        ledger.forward().len(),
        ledger.gaps().len()
    );
    Ok(ledger.forward().len())
}

pub fn cmd_run(cfg: &RunConfig) -> Result<Vec<RunOutcome>> {
    let prepared = PreparedCorpus::load(&cfg.out)?;
    if prepared.granularity != cfg.granularity {
        return Err(Error::Config(format!(
            "prepared windows use {} but the run asks for {}; prepare again",
            prepared.granularity, cfg.granularity
        )));
    }
    write_file(&cfg.out.join("run_config.toml"), &cfg.to_toml()?)?;
    run_all(cfg, &prepared.windows)
}

/// Every ledger directory below `root`, in path order.
pub fn load_ledgers(root: &Path) -> Result<Vec<RunLedger>> {
    let mut dirs = Vec::new();
    if root.join("ledger.json").exists() {
        dirs.push(root.to_path_buf());
    } else {
        let entries = fs::read_dir(root).map_err(|e| Error::io(format!("listing {}", root.display()), e))?;
        for entry in entries {
            let path = entry
                .map_err(|e| Error::io(format!("listing {}", root.display()), e))?
                .path();
            if path.join("ledger.json").exists() {
                dirs.push(path);
            }
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Config(format!("no ledgers found under {}", root.display())));
    }
    dirs.iter().map(|d| RunLedger::read(d)).collect()
}

/// Ledgers grouped by strategy, each group averaged over its seeds.
pub fn group_by_method(ledgers: &[RunLedger]) -> Vec<MethodSeries> {
    let mut groups: BTreeMap<StrategyKind, Vec<&RunLedger>> = BTreeMap::new();
    for l in ledgers {
        groups.entry(l.header().strategy.kind).or_default().push(l);
    }
    groups
        .into_iter()
        .map(|(kind, ls)| MethodSeries::merge(kind.as_str(), &ls))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutcome {
    pub methods: usize,
    pub common_windows: usize,
}

fn series_csv(s: &MethodSeries) -> (String, String) {
    let mut fwd = String::from("t,f1,time_s\n");
    for (t, f1) in &s.forward {
        let time = s.times.get(t).map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(fwd, "{t},{f1},{time}");
    }
    let mut bwd = String::from("t,k,f1\n");
    for ((t, k), f1) in &s.backward {
        let _ = writeln!(bwd, "{t},{k},{f1}");
    }
    (fwd, bwd)
}

/// Writes `summary.csv`, `delta.csv` and per-method series under `out`.
pub fn cmd_report(ledger_root: &Path, out: &Path, baseline: Option<&str>, win_rule: WinRule) -> Result<ReportOutcome> {
    let ledgers = load_ledgers(ledger_root)?;
    let series = group_by_method(&ledgers);
    let common = common_windows(&series);
    let comparable = series.len() < 2 || !common.is_empty();
    if !comparable {
        log::warn!("methods share no defined windows; cross-method comparisons suppressed");
    }
    let baseline = baseline.or_else(|| {
        series
            .iter()
            .any(|s| s.method == StrategyKind::WindowOnly.as_str())
            .then_some(StrategyKind::WindowOnly.as_str())
    });
    let rows = summarize(&series, baseline.filter(|_| comparable), win_rule)?;
    write_file(&out.join("summary.csv"), &summary_csv(&rows))?;
    for s in &series {
        let (fwd, bwd) = series_csv(s);
        write_file(&out.join("series").join(format!("{}_forward.csv", s.method)), &fwd)?;
        write_file(&out.join("series").join(format!("{}_backward.csv", s.method)), &bwd)?;
    }
    if let (true, Some(b)) = (comparable, baseline) {
        if let Some(base) = series.iter().find(|s| s.method == b) {
            let others: Vec<MethodSeries> = series.iter().filter(|s| s.method != b).cloned().collect();
            write_file(&out.join("delta.csv"), &delta_csv(&delta_table(&others, base)))?;
        }
    }
    Ok(ReportOutcome {
        methods: series.len(),
        common_windows: common.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub method_a: String,
    pub method_b: String,
    pub n: usize,
    pub w_statistic: f64,
    pub p_value: f64,
    pub cliffs_delta: f64,
    pub mean_delta: f64,
}

pub const COMPARE_HEADER: &str = "method_a,method_b,n,w_statistic,p_value,cliffs_delta,mean_delta";

impl CompareRow {
    pub fn csv(&self) -> String {
        format!(
            "{COMPARE_HEADER}\n{},{},{},{},{},{},{}\n",
            self.method_a, self.method_b, self.n, self.w_statistic, self.p_value, self.cliffs_delta, self.mean_delta
        )
    }
}

/// Paired comparison of forward scores on the windows both series define.
pub fn compare_series(a: &MethodSeries, b: &MethodSeries) -> Result<CompareRow> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = a
        .forward
        .iter()
        .filter_map(|(t, x)| b.forward.get(t).map(|y| (*x, *y)))
        .unzip();
    if xs.is_empty() {
        return Err(Error::Metric(format!(
            "{} and {} share no defined windows",
            a.method, b.method
        )));
    }
    let diffs: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| x - y).collect();
    let w = wilcoxon_signed_rank(&diffs)?;
    Ok(CompareRow {
        method_a: a.method.clone(),
        method_b: b.method.clone(),
        n: diffs.len(),
        w_statistic: w.statistic,
        p_value: w.p_value,
        cliffs_delta: cliffs_delta(&xs, &ys)?,
        mean_delta: diffs.iter().sum::<f64>() / diffs.len() as f64,
    })
}

/// Compares two ledgers (or directories of seed ledgers for one method each).
pub fn cmd_compare(a: &Path, b: &Path, out: &Path) -> Result<CompareRow> {
    let load = |p: &Path| -> Result<MethodSeries> {
        let ledgers = load_ledgers(p)?;
        let refs: Vec<&RunLedger> = ledgers.iter().collect();
        let name = ledgers[0].strategy_name();
        if ledgers.iter().any(|l| l.strategy_name() != name) {
            return Err(Error::Config(format!("{} mixes several strategies", p.display())));
        }
        Ok(MethodSeries::merge(name, &refs))
    };
    let row = compare_series(&load(a)?, &load(b)?)?;
    write_file(&out.join("compare.csv"), &row.csv())?;
    Ok(row)
}
