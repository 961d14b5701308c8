//! Forward-chained training and evaluation with lagged backward tests.
//!
//! For each `t`, the strategy trains on window `t` (plus whatever history it
//! is allowed), the resulting model is scored on window `t + 1` and on the
//! earlier windows `t - k`. Every score lands in an append-only [`RunLedger`].
//!
//! A ledger directory holds three files:
//!
//! * `ledger.json`: header (resolved configuration, fingerprints, window
//!   table) and gap records
//! * `forward.csv`: `t,f1,time_s,peak_mem_mb,train_size,replay_size`; `f1`
//!   is empty when window `t + 1` has no instances
//! * `backward.csv`: `t,k,f1`

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::ModelBackend;
use crate::corpus::{NormalizedKey, Window, KEY_ALGORITHM};
use crate::error::{Error, Result};
use crate::metrics::macro_f1;
use crate::model::{AdapterConfig, TrainConfig};
use crate::strategies::{StrategyRunner, StrategySpec};

pub const DEFAULT_LAGS: [usize; 4] = [1, 3, 5, 6];
pub const LEDGER_FORMAT: &str = "driftharness-ledger";
pub const LEDGER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMeta {
    pub index: usize,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprints {
    pub harness_version: String,
    pub key_algorithm: String,
    /// SHA-256 over the ordered window contents.
    pub corpus_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerHeader {
    pub format: String,
    pub version: u32,
    pub strategy: StrategySpec,
    pub train: TrainConfig,
    pub adapter: AdapterConfig,
    pub backend: String,
    pub seed: u64,
    pub lags: Vec<usize>,
    pub fingerprints: Fingerprints,
    pub windows: Vec<WindowMeta>,
    /// Window at which checkpoint reload was checked against the in-memory model.
    pub checkpoint_verified_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub t: usize,
    pub reason: String,
}

/// Resources of one training step, paired with the next-window score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceTriple {
    pub wall_time_s: f64,
    pub peak_mem_mb: f64,
    pub forward_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardRecord {
    pub t: usize,
    pub f1: Option<f64>,
    pub time_s: f64,
    pub peak_mem_mb: f64,
    pub train_size: usize,
    pub replay_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackwardRecord {
    pub t: usize,
    pub k: usize,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LedgerFile {
    #[serde(flatten)]
    header: LedgerHeader,
    gaps: Vec<Gap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLedger {
    header: LedgerHeader,
    forward: Vec<ForwardRecord>,
    backward: Vec<BackwardRecord>,
    gaps: Vec<Gap>,
}

impl RunLedger {
    pub fn new(header: LedgerHeader) -> Self {
        Self {
            header,
            forward: Vec::new(),
            backward: Vec::new(),
            gaps: Vec::new(),
        }
    }

    pub fn header(&self) -> &LedgerHeader {
        &self.header
    }

    pub fn forward(&self) -> &[ForwardRecord] {
        &self.forward
    }

    pub fn backward(&self) -> &[BackwardRecord] {
        &self.backward
    }

    pub fn gaps(&self) -> &[Gap] {
        &self.gaps
    }

    pub fn push_forward(&mut self, record: ForwardRecord) {
        debug_assert!(self.forward.last().is_none_or(|r| r.t < record.t));
        self.forward.push(record);
    }

    pub fn push_backward(&mut self, record: BackwardRecord) {
        self.backward.push(record);
    }

    pub fn push_gap(&mut self, t: usize, reason: impl Into<String>) {
        self.gaps.push(Gap {
            t,
            reason: reason.into(),
        });
    }

    pub fn strategy_name(&self) -> &'static str {
        self.header.strategy.kind.as_str()
    }

    /// Defined forward scores keyed by training window.
    pub fn forward_scores(&self) -> BTreeMap<usize, f64> {
        self.forward.iter().filter_map(|r| r.f1.map(|f| (r.t, f))).collect()
    }

    pub fn backward_scores(&self) -> BTreeMap<(usize, usize), f64> {
        self.backward.iter().map(|r| ((r.t, r.k), r.f1)).collect()
    }

    pub fn resources(&self) -> BTreeMap<usize, ResourceTriple> {
        self.forward
            .iter()
            .map(|r| {
                (
                    r.t,
                    ResourceTriple {
                        wall_time_s: r.time_s,
                        peak_mem_mb: r.peak_mem_mb,
                        forward_f1: r.f1,
                    },
                )
            })
            .collect()
    }

    pub fn forward_csv(&self) -> String {
        let mut s = String::from("t,f1,time_s,peak_mem_mb,train_size,replay_size\n");
        for r in &self.forward {
            let f1 = r.f1.map(|f| f.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.t, f1, r.time_s, r.peak_mem_mb, r.train_size, r.replay_size
            );
        }
        s
    }

    pub fn backward_csv(&self) -> String {
        let mut s = String::from("t,k,f1\n");
        for r in &self.backward {
            let _ = writeln!(s, "{},{},{}", r.t, r.k, r.f1);
        }
        s
    }

    /// The deterministic part of the ledger: forward scores and sizes, backward scores and gaps.
    pub fn score_section(&self) -> String {
        let mut s = String::from("t,f1,train_size,replay_size\n");
        for r in &self.forward {
            let f1 = r.f1.map(|f| f.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", r.t, f1, r.train_size, r.replay_size);
        }
        s.push_str(&self.backward_csv());
        for g in &self.gaps {
            let _ = writeln!(s, "gap,{},{}", g.t, g.reason);
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let file = LedgerFile {
            header: self.header.clone(),
            gaps: self.gaps.clone(),
        };
        let json = serde_json::to_string_pretty(&file)?;
        let put = |name: &str, body: &str| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(format!("writing {}", p.display()), e))
        };
        put("ledger.json", &json)?;
        put("forward.csv", &self.forward_csv())?;
        put("backward.csv", &self.backward_csv())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(format!("reading {}", p.display()), e))
        };
        let file: LedgerFile = serde_json::from_str(&read("ledger.json")?)?;
        let fwd_path = dir.join("forward.csv");
        let bwd_path = dir.join("backward.csv");
        let parse_err = |path: &Path, line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut forward = Vec::new();
        for (i, line) in read("forward.csv")?.lines().enumerate().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(parse_err(
                    &fwd_path,
                    i + 1,
                    format!("expected 6 columns, got {}", cols.len()),
                ));
            }
            let num = |c: &str| c.parse::<f64>().map_err(|e| parse_err(&fwd_path, i + 1, e.to_string()));
            let int = |c: &str| {
                c.parse::<usize>()
                    .map_err(|e| parse_err(&fwd_path, i + 1, e.to_string()))
            };
            forward.push(ForwardRecord {
                t: int(cols[0])?,
                f1: if cols[1].is_empty() { None } else { Some(num(cols[1])?) },
                time_s: num(cols[2])?,
                peak_mem_mb: num(cols[3])?,
                train_size: int(cols[4])?,
                replay_size: int(cols[5])?,
            });
        }
        let mut backward = Vec::new();
        for (i, line) in read("backward.csv")?.lines().enumerate().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(parse_err(
                    &bwd_path,
                    i + 1,
                    format!("expected 3 columns, got {}", cols.len()),
                ));
            }
            let bad = |e: String| parse_err(&bwd_path, i + 1, e);
            backward.push(BackwardRecord {
                t: cols[0]
                    .parse()
                    .map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                k: cols[1]
                    .parse()
                    .map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                f1: cols[2]
                    .parse()
                    .map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            });
        }
        Ok(Self {
            header: file.header,
            forward,
            backward,
            gaps: file.gaps,
        })
    }
}

pub fn corpus_digest(windows: &[Window]) -> String {
    let mut h = Sha256::new();
    for w in windows {
        h.update(format!("window {} {} {}\n", w.index, w.start_date, w.end_date).as_bytes());
        for i in &w.instances {
            h.update(i.id.as_bytes());
            h.update([0, i.label]);
            h.update(i.disclosure_date.to_string().as_bytes());
            h.update(i.code.as_bytes());
            h.update([0xff]);
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Resident set size in kB, from `/proc/self/status`.
fn rss_kb() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmRSS:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

/// Runs `f` while sampling RSS every 100 ms; returns its result and the
/// peak RSS growth in MB over the pre-call level.
pub fn with_memory_sampling<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let baseline = rss_kb().unwrap_or(0);
    let (stop_tx, stop_rx) = mpsc::channel::<()>();
    let sampler = thread::spawn(move || {
        let mut peak = rss_kb().unwrap_or(0);
        loop {
            match stop_rx.recv_timeout(Duration::from_millis(100)) {
                Err(mpsc::RecvTimeoutError::Timeout) => peak = peak.max(rss_kb().unwrap_or(0)),
                _ => return peak,
            }
        }
    });
    let out = f();
    let end = rss_kb().unwrap_or(0);
    let _ = stop_tx.send(());
    let peak = sampler.join().unwrap_or(0).max(end);
    (out, peak.saturating_sub(baseline) as f64 / 1024.0)
}

#[derive(Debug, Clone)]
pub struct ChainOptions {
    pub lags: Vec<usize>,
    /// Checkpoint-reload equivalence check at the first trained window.
    pub verify_checkpoint: bool,
    pub adapter: AdapterConfig,
    pub backend_name: String,
}

impl Default for ChainOptions {
    fn default() -> Self {
        Self {
            lags: DEFAULT_LAGS.to_vec(),
            verify_checkpoint: true,
            adapter: AdapterConfig::default(),
            backend_name: "reference".into(),
        }
    }
}

fn score(backend: &mut dyn ModelBackend, window: &Window) -> Result<f64> {
    let preds = backend.predict(&window.instances)?;
    let labels: Vec<u8> = window.instances.iter().map(|i| i.label).collect();
    let predicted: Vec<u8> = preds.iter().map(|p| p.predicted_label).collect();
    macro_f1(&labels, &predicted)
}

/// Trains through windows `1..K` and scores each model on the next window
/// and on lagged earlier windows. Strategy failures become gaps; temporal
/// leakage aborts the run.
pub fn run_forward_chain(
    windows: &[Window],
    spec: &StrategySpec,
    config: &TrainConfig,
    backend: &mut dyn ModelBackend,
    options: &ChainOptions,
) -> Result<RunLedger> {
    let nonempty = windows.iter().filter(|w| !w.is_empty()).count();
    if nonempty < 2 {
        return Err(Error::validation(format!(
            "forward chaining needs at least 2 non-empty windows, found {nonempty}"
        )));
    }
    let header = LedgerHeader {
        format: LEDGER_FORMAT.into(),
        version: LEDGER_VERSION,
        strategy: spec.clone(),
        train: config.clone(),
        adapter: options.adapter,
        backend: options.backend_name.clone(),
        seed: config.seed,
        lags: options.lags.clone(),
        fingerprints: Fingerprints {
            harness_version: env!("CARGO_PKG_VERSION").into(),
            key_algorithm: KEY_ALGORITHM.into(),
            corpus_digest: corpus_digest(windows),
        },
        windows: windows
            .iter()
            .map(|w| WindowMeta {
                index: w.index,
                start_date: w.start_date,
                end_date: w.end_date,
                count: w.len(),
            })
            .collect(),
        checkpoint_verified_at: None,
    };
    let mut ledger = RunLedger::new(header);
    let mut runner = StrategyRunner::new(spec.clone(), config.clone())?;
    let mut seen: HashSet<NormalizedKey> = HashSet::new();
    let mut checkpoint_pending = options.verify_checkpoint;

    for t in 1..windows.len() {
        let (step, peak_mb) = with_memory_sampling(|| {
            let started = Instant::now();
            runner
                .step(backend, windows, t)
                .map(|o| (o, started.elapsed().as_secs_f64()))
        });
        let (outcome, elapsed) = match step {
            Ok(v) => v,
            Err(e) => {
                log::info!("{} window {t}: {e}", spec.kind);
                ledger.push_gap(t, e.to_string());
                continue;
            }
        };
        seen.extend(outcome.training_keys.iter().copied());

        let next = &windows[t];
        let forward = if next.is_empty() {
            None
        } else {
            if let Some(leak) = next.instances.iter().find(|i| seen.contains(&i.key())) {
                return Err(Error::Leakage {
                    window: next.index,
                    instance_id: leak.id.clone(),
                });
            }
            Some(score(backend, next)?)
        };

        if let (true, Some(_), Some(f1)) = (checkpoint_pending, &outcome.report, forward) {
            verify_checkpoint_reload(backend, next, f1)?;
            ledger.header.checkpoint_verified_at = Some(t);
            checkpoint_pending = false;
        }

        let time_s = outcome.report.as_ref().map_or(elapsed, |r| r.wall_time_s.max(elapsed));
        ledger.push_forward(ForwardRecord {
            t,
            f1: forward,
            time_s,
            peak_mem_mb: peak_mb,
            train_size: outcome.train_size,
            replay_size: outcome.replay_size,
        });

        for &k in &options.lags {
            if k >= t {
                continue;
            }
            let past = &windows[t - k - 1];
            if past.is_empty() {
                continue;
            }
            ledger.push_backward(BackwardRecord {
                t,
                k,
                f1: score(backend, past)?,
            });
        }
    }
    Ok(ledger)
}

fn verify_checkpoint_reload(backend: &mut dyn ModelBackend, window: &Window, in_memory: f64) -> Result<()> {
    let dir = tempfile::tempdir().map_err(|e| Error::io("creating checkpoint scratch dir", e))?;
    let path = dir.path().join("snapshot.ckpt");
    let before = backend.predict(&window.instances)?;
    backend.save_checkpoint(&path)?;
    backend.reset()?;
    backend.load_checkpoint(&path)?;
    let after = backend.predict(&window.instances)?;
    if before != after || score(backend, window)? != in_memory {
        return Err(Error::Model("checkpoint reload changed predictions".into()));
    }
    Ok(())
}

/// Backward scores for a finished chain, recomputed from a fresh run. Kept
/// for callers that only need the backward map.
pub fn run_backward_evals(
    windows: &[Window],
    spec: &StrategySpec,
    config: &TrainConfig,
    backend: &mut dyn ModelBackend,
    lags: &[usize],
) -> Result<BTreeMap<(usize, usize), f64>> {
    let options = ChainOptions {
        lags: lags.to_vec(),
        verify_checkpoint: false,
        ..ChainOptions::default()
    };
    Ok(run_forward_chain(windows, spec, config, backend, &options)?.backward_scores())
}
