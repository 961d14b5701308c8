//! Evaluation quantities computed from run ledgers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::corpus::{FIXED, VULNERABLE};
use crate::error::{Error, Result};
use crate::protocol::{RunLedger, DEFAULT_LAGS};

/// Confusion counts with VULNERABLE as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn from_labels(labels: &[u8], predictions: &[u8]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Metric("Macro-F1 of an empty sample".into()));
        }
        if labels.len() != predictions.len() {
            return Err(Error::Metric(format!(
                "{} labels but {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        let mut c = Self::default();
        for (&y, &p) in labels.iter().zip(predictions) {
            match (y, p) {
                (VULNERABLE, VULNERABLE) => c.tp += 1,
                (FIXED, VULNERABLE) => c.fp += 1,
                (FIXED, FIXED) => c.tn += 1,
                (VULNERABLE, FIXED) => c.fn_ += 1,
                _ => return Err(Error::Metric(format!("non-binary label pair ({y}, {p})"))),
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// F1 of `class`, 0 when precision and recall are both undefined or zero.
    pub fn f1(&self, class: u8) -> f64 {
        let (tp, fp, fn_) = if class == VULNERABLE {
            (self.tp, self.fp, self.fn_)
        } else {
            (self.tn, self.fn_, self.fp)
        };
        // 2PR/(P+R) reduces to 2tp/(2tp+fp+fn)
        let denom = 2 * tp + fp + fn_;
        if tp == 0 || denom == 0 {
            0.0
        } else {
            (2 * tp) as f64 / denom as f64
        }
    }

    pub fn macro_f1(&self) -> f64 {
        (self.f1(FIXED) + self.f1(VULNERABLE)) / 2.0
    }
}

pub fn macro_f1(labels: &[u8], predictions: &[u8]) -> Result<f64> {
    Ok(ConfusionCounts::from_labels(labels, predictions)?.macro_f1())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    pub count: usize,
}

/// Mean over the defined entries of a series.
pub fn aggregate_mean(scores: &[Option<f64>]) -> Result<Aggregate> {
    let defined: Vec<f64> = scores.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Metric("series has no defined entries".into()));
    }
    Ok(Aggregate {
        mean: defined.iter().sum::<f64>() / defined.len() as f64,
        count: defined.len(),
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample (n - 1) standard deviation; 0 for fewer than two values.
pub fn sample_sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Per-window scores of one method, averaged over seeds when several
/// ledgers are merged.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSeries {
    pub method: String,
    pub forward: BTreeMap<usize, f64>,
    pub backward: BTreeMap<(usize, usize), f64>,
    /// Training wall time per window in seconds.
    pub times: BTreeMap<usize, f64>,
    pub runs: usize,
}

impl MethodSeries {
    pub fn from_ledger(ledger: &RunLedger) -> Self {
        Self::merge(ledger.strategy_name(), &[ledger])
    }

    pub fn merge(method: &str, ledgers: &[&RunLedger]) -> Self {
        fn average<K: Ord + Copy>(maps: impl Iterator<Item = BTreeMap<K, f64>>) -> BTreeMap<K, f64> {
            let mut acc: BTreeMap<K, (f64, usize)> = BTreeMap::new();
            for m in maps {
                for (k, v) in m {
                    let e = acc.entry(k).or_default();
                    e.0 += v;
                    e.1 += 1;
                }
            }
            acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
        }
        Self {
            method: method.to_string(),
            forward: average(ledgers.iter().map(|l| l.forward_scores())),
            backward: average(ledgers.iter().map(|l| l.backward_scores())),
            times: average(
                ledgers
                    .iter()
                    .map(|l| l.forward().iter().map(|r| (r.t, r.time_s)).collect()),
            ),
            runs: ledgers.len(),
        }
    }

    pub fn forward_values(&self) -> Vec<f64> {
        self.forward.values().copied().collect()
    }
}

/// Mean backward score at lag `k`.
pub fn ibr(series: &MethodSeries, k: usize) -> Result<f64> {
    let values: Vec<f64> = series
        .backward
        .iter()
        .filter(|((_, lag), _)| *lag == k)
        .map(|(_, v)| *v)
        .collect();
    if values.is_empty() {
        return Err(Error::Metric(format!(
            "{}: no backward scores at lag {k}",
            series.method
        )));
    }
    Ok(mean(&values))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetentionCurve {
    pub points: BTreeMap<usize, f64>,
}

impl RetentionCurve {
    pub fn new(points: impl IntoIterator<Item = (usize, f64)>) -> Result<Self> {
        let points: BTreeMap<usize, f64> = points.into_iter().collect();
        for (&k, &v) in &points {
            if !DEFAULT_LAGS.contains(&k) {
                return Err(Error::Metric(format!("lag {k} is not one of {DEFAULT_LAGS:?}")));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Metric(format!("IBR@{k} = {v} outside [0, 1]")));
            }
        }
        Ok(Self { points })
    }

    /// Curve over whichever default lags the series has scores for.
    pub fn from_series(series: &MethodSeries) -> Result<Self> {
        Self::new(DEFAULT_LAGS.iter().filter_map(|&k| ibr(series, k).ok().map(|v| (k, v))))
    }

    pub fn get(&self, k: usize) -> Result<f64> {
        self.points
            .get(&k)
            .copied()
            .ok_or_else(|| Error::Metric(format!("retention curve has no value at lag {k}")))
    }
}

/// `(IBR@1 - IBR@6) / IBR@1`.
pub fn decay_rate(curve: &RetentionCurve) -> Result<f64> {
    let first = curve.get(1)?;
    let last = curve.get(6)?;
    if first == 0.0 {
        return Err(Error::Metric("decay rate undefined for IBR@1 = 0".into()));
    }
    Ok((first - last) / first)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub enum AucRule {
    /// Mean of the IBR values at the four lags.
    #[default]
    LagMean,
    /// Trapezoids over the lag axis from 1 to 6, divided by the span.
    Trapezoid,
}

pub fn retention_auc(curve: &RetentionCurve) -> Result<f64> {
    retention_auc_with(curve, AucRule::default())
}

pub fn retention_auc_with(curve: &RetentionCurve, rule: AucRule) -> Result<f64> {
    let v: Vec<f64> = DEFAULT_LAGS.iter().map(|&k| curve.get(k)).collect::<Result<_>>()?;
    Ok(match rule {
        AucRule::LagMean => mean(&v),
        AucRule::Trapezoid => {
            let area: f64 = DEFAULT_LAGS
                .windows(2)
                .zip(v.windows(2))
                .map(|(k, y)| (k[1] - k[0]) as f64 * (y[0] + y[1]) / 2.0)
                .sum();
            area / (DEFAULT_LAGS[3] - DEFAULT_LAGS[0]) as f64
        }
    })
}

/// Coefficient of variation with sample standard deviation.
pub fn stability_index(scores: &[f64]) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::Metric("stability index needs at least 2 scores".into()));
    }
    let m = mean(scores);
    if m == 0.0 {
        return Err(Error::Metric("stability index undefined for zero mean".into()));
    }
    Ok(sample_sd(scores) / m)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub enum WinRule {
    /// Window leaders split one win; rate = wins / common windows.
    #[default]
    SharedArgmax,
    /// Share of head-to-head window comparisons won, ties counting half.
    Pairwise,
}

/// Windows on which every series has a defined forward score.
pub fn common_windows(series: &[MethodSeries]) -> BTreeSet<usize> {
    let mut iter = series.iter();
    let Some(first) = iter.next() else {
        return BTreeSet::new();
    };
    let mut common: BTreeSet<usize> = first.forward.keys().copied().collect();
    for s in iter {
        common.retain(|t| s.forward.contains_key(t));
    }
    common
}

pub fn win_rate(series: &[MethodSeries], rule: WinRule) -> Result<Vec<f64>> {
    if series.len() < 2 {
        return Err(Error::Metric("win rate needs at least 2 methods".into()));
    }
    let common = common_windows(series);
    if common.is_empty() {
        return Err(Error::Metric("methods share no defined windows".into()));
    }
    let mut wins = vec![0.0; series.len()];
    for t in &common {
        let scores: Vec<f64> = series.iter().map(|s| s.forward[t]).collect();
        match rule {
            WinRule::SharedArgmax => {
                let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let leaders = scores.iter().filter(|&&s| s == best).count() as f64;
                for (w, &s) in wins.iter_mut().zip(&scores) {
                    if s == best {
                        *w += 1.0 / leaders;
                    }
                }
            }
            WinRule::Pairwise => {
                for (i, w) in wins.iter_mut().enumerate() {
                    for (j, &other) in scores.iter().enumerate() {
                        if i != j {
                            *w += match scores[i].partial_cmp(&other) {
                                Some(std::cmp::Ordering::Greater) => 1.0,
                                Some(std::cmp::Ordering::Equal) => 0.5,
                                _ => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }
    let denom = match rule {
        WinRule::SharedArgmax => common.len() as f64,
        WinRule::Pairwise => (common.len() * (series.len() - 1)) as f64,
    };
    Ok(wins.into_iter().map(|w| w / denom).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Efficiency {
    pub f1_per_min: f64,
    pub speedup: f64,
    pub efficiency_pct: f64,
}

/// Efficiency from mean F1 and mean per-window training minutes of a method
/// and its baseline.
pub fn efficiency_from_means(f1: f64, minutes: f64, baseline_f1: f64, baseline_minutes: f64) -> Result<Efficiency> {
    if minutes <= 0.0 || baseline_minutes <= 0.0 {
        return Err(Error::Metric("training time must be positive".into()));
    }
    let f1_per_min = f1 / minutes;
    let baseline_rate = baseline_f1 / baseline_minutes;
    if baseline_rate == 0.0 {
        return Err(Error::Metric("baseline F1/min is zero".into()));
    }
    Ok(Efficiency {
        f1_per_min,
        speedup: baseline_minutes / minutes,
        efficiency_pct: 100.0 * f1_per_min / baseline_rate,
    })
}

fn mean_f1_and_minutes(series: &MethodSeries) -> Result<(f64, f64)> {
    if series.forward.is_empty() || series.times.is_empty() {
        return Err(Error::Metric(format!("{}: no forward records", series.method)));
    }
    let times: Vec<f64> = series.times.values().copied().collect();
    Ok((mean(&series.forward_values()), mean(&times) / 60.0))
}

pub fn efficiency_metrics(series: &MethodSeries, baseline: &MethodSeries) -> Result<Efficiency> {
    let (f1, minutes) = mean_f1_and_minutes(series)?;
    let (bf1, bminutes) = mean_f1_and_minutes(baseline)?;
    efficiency_from_means(f1, minutes, bf1, bminutes)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaRow {
    pub method: String,
    pub t: usize,
    pub f1: f64,
    pub baseline_f1: f64,
    pub delta: f64,
    /// Window is in the bottom quartile of baseline F1.
    pub hard: bool,
}

/// Per-window F1 differences against `baseline` on the windows all series share.
pub fn delta_table(methods: &[MethodSeries], baseline: &MethodSeries) -> Vec<DeltaRow> {
    let mut all = methods.to_vec();
    all.push(baseline.clone());
    let common = common_windows(&all);
    let mut by_score: Vec<usize> = common.iter().copied().collect();
    by_score.sort_by(|a, b| baseline.forward[a].total_cmp(&baseline.forward[b]).then(a.cmp(b)));
    let hard: BTreeSet<usize> = by_score.iter().take(common.len().div_ceil(4)).copied().collect();
    let mut rows = Vec::new();
    for m in methods {
        for &t in &common {
            let f1 = m.forward[&t];
            let b = baseline.forward[&t];
            rows.push(DeltaRow {
                method: m.method.clone(),
                t,
                f1,
                baseline_f1: b,
                delta: f1 - b,
                hard: hard.contains(&t),
            });
        }
    }
    rows
}

pub fn delta_csv(rows: &[DeltaRow]) -> String {
    let mut s = String::from("method,t,f1,baseline_f1,delta,hard\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.method, r.t, r.f1, r.baseline_f1, r.delta, r.hard
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub mean_f1: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
    pub win_rate: Option<f64>,
    pub ibr: [Option<f64>; 4],
    pub decay: Option<f64>,
    pub auc: Option<f64>,
    pub stability: Option<f64>,
    pub f1_per_min: Option<f64>,
    pub speedup: Option<f64>,
    pub efficiency_pct: Option<f64>,
}

pub const SUMMARY_HEADER: &str =
    "method,mean_f1,sd,min,max,win_rate,ibr@1,ibr@3,ibr@5,ibr@6,decay,auc,stability,f1_per_min,speedup,efficiency_pct";

/// One row per series. Win rates are computed over the windows all series
/// share; efficiency is relative to `baseline` when it is present.
pub fn summarize(series: &[MethodSeries], baseline: Option<&str>, win_rule: WinRule) -> Result<Vec<SummaryRow>> {
    let wins = if series.len() >= 2 {
        match win_rate(series, win_rule) {
            Ok(w) => Some(w),
            Err(e) => {
                log::warn!("win rate suppressed: {e}");
                None
            }
        }
    } else {
        None
    };
    let base = baseline.and_then(|b| series.iter().find(|s| s.method == b));
    let mut rows = Vec::with_capacity(series.len());
    for (i, s) in series.iter().enumerate() {
        let values = s.forward_values();
        if values.is_empty() {
            return Err(Error::Metric(format!("{}: no defined forward scores", s.method)));
        }
        let curve = RetentionCurve::from_series(s)?;
        let eff = base.and_then(|b| efficiency_metrics(s, b).ok());
        rows.push(SummaryRow {
            method: s.method.clone(),
            mean_f1: mean(&values),
            sd: sample_sd(&values),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            win_rate: wins.as_ref().map(|w| w[i]),
            ibr: DEFAULT_LAGS.map(|k| curve.points.get(&k).copied()),
            decay: decay_rate(&curve).ok(),
            auc: retention_auc(&curve).ok(),
            stability: stability_index(&values).ok(),
            f1_per_min: eff.map(|e| e.f1_per_min),
            speedup: eff.map(|e| e.speedup),
            efficiency_pct: eff.map(|e| e.efficiency_pct),
        });
    }
    Ok(rows)
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    fn cell(v: Option<f64>) -> String {
        v.map(|x| format!("{x:.6}")).unwrap_or_default()
    }
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let mut cols = vec![
            r.method.clone(),
            cell(Some(r.mean_f1)),
            cell(Some(r.sd)),
            cell(Some(r.min)),
            cell(Some(r.max)),
            cell(r.win_rate),
        ];
        cols.extend(r.ibr.iter().map(|v| cell(*v)));
        cols.extend([r.decay, r.auc, r.stability, r.f1_per_min, r.speedup, r.efficiency_pct].map(cell));
        s.push_str(&cols.join(","));
        s.push('\n');
    }
    s
}
