//! Corpus ingestion, normalization-hash deduplication and calendar windowing.
//!
//! A corpus file is line-delimited JSON, one [`Instance`] per line:
//!
//! ```text
//! {"id":"CVE-2019-0001/f1/pre","code":"int f(){...}","label":1,"disclosure_date":"2019-03-01","cve_id":"CVE-2019-0001","language":"c"}
//! ```
//!
//! Deduplication keeps, for every normalized body, only the instance with the
//! earliest disclosure date. Because windows are disjoint calendar ranges, this
//! makes every pair of windows disjoint in normalized-key space.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, Months, NaiveDate};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Label of the pre-fix (vulnerable) version of a function.
pub const VULNERABLE: u8 = 1;
/// Label of the post-fix version of a function.
pub const FIXED: u8 = 0;

/// Identifier of the digest used for [`NormalizedKey`]; written into every report header.
pub const KEY_ALGORITHM: &str = "sha256/normalize-v1";

/// One timestamped, labeled function body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub id: String,
    pub code: String,
    pub label: u8,
    pub disclosure_date: NaiveDate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cve_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
}

impl Instance {
    pub fn new(id: impl Into<String>, code: impl Into<String>, label: u8, date: NaiveDate) -> Self {
        Self {
            id: id.into(),
            code: code.into(),
            label,
            disclosure_date: date,
            cve_id: None,
            language: None,
        }
    }

    pub fn key(&self) -> NormalizedKey {
        NormalizedKey::of(&self.code)
    }

    pub fn is_vulnerable(&self) -> bool {
        self.label == VULNERABLE
    }
}

// Raw record, used so that a label of 2 is a validation error rather than a parse error.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInstance {
    id: String,
    code: String,
    label: i64,
    disclosure_date: String,
    #[serde(default)]
    cve_id: Option<String>,
    #[serde(default)]
    language: Option<String>,
}

/// Inclusive calendar span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if end < start {
            return Err(Error::Config(format!("date range end {end} precedes start {start}")));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.start <= date && date <= self.end
    }
}

impl FromStr for DateRange {
    type Err = Error;

    /// Parses `YYYY-MM-DD..YYYY-MM-DD`.
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once("..")
            .ok_or_else(|| Error::Config(format!("date range `{s}` must look like START..END")))?;
        let parse = |v: &str| {
            NaiveDate::parse_from_str(v.trim(), "%Y-%m-%d").map_err(|e| Error::Config(format!("bad date `{v}`: {e}")))
        };
        DateRange::new(parse(a)?, parse(b)?)
    }
}

/// Calendar window length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Granularity {
    Monthly,
    BiMonthly,
    Quarterly,
    HalfYearly,
    Yearly,
}

impl Granularity {
    pub const ALL: [Granularity; 5] = [
        Granularity::Monthly,
        Granularity::BiMonthly,
        Granularity::Quarterly,
        Granularity::HalfYearly,
        Granularity::Yearly,
    ];

    pub fn months(self) -> u32 {
        match self {
            Granularity::Monthly => 1,
            Granularity::BiMonthly => 2,
            Granularity::Quarterly => 3,
            Granularity::HalfYearly => 6,
            Granularity::Yearly => 12,
        }
    }

    pub fn from_months(months: u32) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.months() == months)
            .ok_or_else(|| Error::Config(format!("granularity must be one of 1,2,3,6,12 months, got {months}")))
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}m", self.months())
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let digits = s.trim().trim_end_matches(['m', 'M']);
        let months: u32 = digits
            .parse()
            .map_err(|_| Error::Config(format!("granularity `{s}` is not one of 1m,2m,3m,6m,12m")))?;
        Granularity::from_months(months)
    }
}

impl TryFrom<String> for Granularity {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        value.parse()
    }
}

impl From<Granularity> for String {
    fn from(g: Granularity) -> String {
        g.to_string()
    }
}

/// Reads a line-delimited corpus file. Blank lines are skipped.
pub fn load_corpus(path: &Path) -> Result<Vec<Instance>> {
    let file = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let reader = BufReader::new(file);
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawInstance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        let invalid = |message: String| Error::Validation {
            path: Some(path.to_path_buf()),
            line: Some(lineno),
            message,
        };
        if raw.label != 0 && raw.label != 1 {
            return Err(invalid(format!(
                "instance `{}` has label {}, expected 0 or 1",
                raw.id, raw.label
            )));
        }
        let date = NaiveDate::parse_from_str(&raw.disclosure_date, "%Y-%m-%d").map_err(|e| {
            invalid(format!(
                "instance `{}` has bad disclosure_date `{}`: {e}",
                raw.id, raw.disclosure_date
            ))
        })?;
        if let Some(first) = seen.insert(raw.id.clone(), lineno) {
            return Err(invalid(format!(
                "duplicate id `{}` (first seen on line {first})",
                raw.id
            )));
        }
        out.push(Instance {
            id: raw.id,
            code: raw.code,
            label: raw.label as u8,
            disclosure_date: date,
            cve_id: raw.cve_id,
            language: raw.language,
        });
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, instances: &[Instance]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n").map_err(|e| Error::io("writing corpus", e))?;
    }
    w.flush().map_err(|e| Error::io("writing corpus", e))
}

/// Checks every instance date against `range`, reporting the first offender.
pub fn validate_range(instances: &[Instance], range: &DateRange) -> Result<()> {
    match instances.iter().find(|i| !range.contains(i.disclosure_date)) {
        Some(bad) => Err(Error::validation(format!(
            "instance `{}` disclosed {} outside corpus range {}..{}",
            bad.id, bad.disclosure_date, range.start, range.end
        ))),
        None => Ok(()),
    }
}

/// Result of one normalization, with a flag for an unterminated block comment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Normalized {
    pub text: String,
    pub unterminated_comment: bool,
}

/// Strips `//` and `/* */` comments, full-line `#` comments and all whitespace.
///
/// A single pass can create new comment openers by joining characters that
/// were separated by whitespace (`/ /`), so passes repeat until the text is
/// stable; each pass only deletes characters.
pub fn normalize_report(code: &str) -> Normalized {
    let mut unterminated = false;
    let mut current = strip_once(code, &mut unterminated);
    loop {
        let next = strip_once(&current, &mut unterminated);
        if next == current {
            return Normalized {
                text: current,
                unterminated_comment: unterminated,
            };
        }
        current = next;
    }
}

pub fn normalize(code: &str) -> String {
    let n = normalize_report(code);
    if n.unterminated_comment {
        log::warn!("unterminated block comment stripped to end of input");
    }
    n.text
}

fn strip_once(code: &str, unterminated: &mut bool) -> String {
    let mut out = String::with_capacity(code.len());
    let mut in_block = false;
    for line in code.split_inclusive('\n') {
        if !in_block && line.trim_start().starts_with('#') {
            continue;
        }
        let mut chars = line.chars().peekable();
        while let Some(c) = chars.next() {
            if in_block {
                if c == '*' && chars.peek() == Some(&'/') {
                    chars.next();
                    in_block = false;
                }
                continue;
            }
            if c == '/' {
                match chars.peek() {
                    Some('/') => break,
                    Some('*') => {
                        chars.next();
                        in_block = true;
                        continue;
                    }
                    _ => {}
                }
            }
            if !c.is_whitespace() {
                out.push(c);
            }
        }
    }
    if in_block {
        *unterminated = true;
    }
    out
}

/// SHA-256 digest of a normalized function body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NormalizedKey(pub [u8; 32]);

impl NormalizedKey {
    pub fn of(code: &str) -> Self {
        Self::of_canonical(&normalize_report(code).text)
    }

    pub fn of_canonical(canonical: &str) -> Self {
        let digest = Sha256::digest(canonical.as_bytes());
        let mut bytes = [0u8; 32];
        bytes.copy_from_slice(&digest);
        NormalizedKey(bytes)
    }
}

impl fmt::Display for NormalizedKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

/// Keeps the earliest-disclosed instance per normalized key (ties: smallest id).
/// Survivors keep their input order.
pub fn deduplicate(instances: &[Instance]) -> Vec<Instance> {
    let keys: Vec<NormalizedKey> = instances.iter().map(Instance::key).collect();
    let mut winner: HashMap<NormalizedKey, usize> = HashMap::new();
    for (i, key) in keys.iter().enumerate() {
        winner
            .entry(*key)
            .and_modify(|w| {
                let cur = &instances[*w];
                let cand = &instances[i];
                if (cand.disclosure_date, cand.id.as_str()) < (cur.disclosure_date, cur.id.as_str()) {
                    *w = i;
                }
            })
            .or_insert(i);
    }
    let keep: HashSet<usize> = winner.into_values().collect();
    instances
        .iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, inst)| inst.clone())
        .collect()
}

/// A calendar-bounded slice of the corpus. `index` starts at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub index: usize,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
    /// Set when the corpus range ends before the full window length.
    pub partial: bool,
    pub instances: Vec<Instance>,
}

impl Window {
    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    /// Label like `2019_M05-06` for bi-monthly windows.
    pub fn label(&self) -> String {
        let (m0, m1) = (self.start_date.month(), self.end_date.month());
        if self.start_date.year() == self.end_date.year() && m0 != m1 {
            format!("{}_M{:02}-{:02}", self.start_date.year(), m0, m1)
        } else {
            format!("{}_M{:02}", self.start_date.year(), m0)
        }
    }
}

/// Tiles `range` with calendar windows of `granularity` months and assigns
/// each instance to its window. Empty windows are kept.
pub fn segment(instances: &[Instance], range: &DateRange, granularity: Granularity) -> Result<Vec<Window>> {
    if range.start.day() != 1 {
        return Err(Error::Config(format!(
            "range start {} is not the first day of a month",
            range.start
        )));
    }
    validate_range(instances, range)?;
    let step = Months::new(granularity.months());
    let mut windows = Vec::new();
    let mut start = range.start;
    while start <= range.end {
        let next = start
            .checked_add_months(step)
            .ok_or_else(|| Error::Config("date overflow while segmenting".into()))?;
        let full_end = next.pred_opt().expect("date after range start has a predecessor");
        let (end, partial) = if full_end > range.end {
            (range.end, true)
        } else {
            (full_end, false)
        };
        windows.push(Window {
            index: windows.len() + 1,
            start_date: start,
            end_date: end,
            partial,
            instances: Vec::new(),
        });
        start = next;
    }
    for inst in instances {
        let d = inst.disclosure_date;
        let months_from_start = (d.year() - range.start.year()) * 12 + d.month() as i32 - range.start.month() as i32;
        let slot = months_from_start as usize / granularity.months() as usize;
        debug_assert!(windows[slot].start_date <= d && d <= windows[slot].end_date);
        windows[slot].instances.push(inst.clone());
    }
    for w in windows.iter().filter(|w| w.is_empty()) {
        log::debug!("window {} ({}..{}) is empty", w.index, w.start_date, w.end_date);
    }
    if windows.last().is_some_and(|w| w.partial) {
        log::warn!("final window is a partial calendar window");
    }
    Ok(windows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowStats {
    pub window_index: usize,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
    pub count: usize,
    pub prevalence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Spread {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl Spread {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub windows: Vec<WindowStats>,
    /// Over non-empty windows.
    pub count: Spread,
    /// Over non-empty windows.
    pub prevalence: Spread,
    pub empty_windows: usize,
}

/// Linear-interpolation quantile of sorted data (`q` in [0, 1]).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => 0.0,
        1 => sorted[0],
        n => {
            let pos = q * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        }
    }
}

fn spread(mut values: Vec<f64>) -> Spread {
    values.sort_by(f64::total_cmp);
    Spread {
        median: quantile_sorted(&values, 0.5),
        q1: quantile_sorted(&values, 0.25),
        q3: quantile_sorted(&values, 0.75),
    }
}

pub fn corpus_stats(windows: &[Window]) -> CorpusStats {
    let rows: Vec<WindowStats> = windows
        .iter()
        .map(|w| {
            let pos = w.instances.iter().filter(|i| i.is_vulnerable()).count();
            WindowStats {
                window_index: w.index,
                start_date: w.start_date,
                end_date: w.end_date,
                count: w.len(),
                prevalence: if w.is_empty() { 0.0 } else { pos as f64 / w.len() as f64 },
            }
        })
        .collect();
    let nonempty: Vec<&WindowStats> = rows.iter().filter(|r| r.count > 0).collect();
    if nonempty.is_empty() {
        log::warn!("all {} windows are empty", rows.len());
    }
    CorpusStats {
        count: spread(nonempty.iter().map(|r| r.count as f64).collect()),
        prevalence: spread(nonempty.iter().map(|r| r.prevalence).collect()),
        empty_windows: rows.len() - nonempty.len(),
        windows: rows,
    }
}

impl CorpusStats {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("window_index,start_date,end_date,count,prevalence\n");
        for r in &self.windows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.window_index, r.start_date, r.end_date, r.count, r.prevalence
            ));
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("quantity,median,q1,q3,iqr\n");
        for (name, sp) in [("count", self.count), ("prevalence", self.prevalence)] {
            s.push_str(&format!("{name},{},{},{},{}\n", sp.median, sp.q1, sp.q3, sp.iqr()));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn paper_range() -> DateRange {
        DateRange::new(d("2018-01-01"), d("2024-12-31")).unwrap()
    }

    #[test]
    fn normalize_strips_line_comment_and_whitespace() {
        assert_eq!(normalize("int a = 1; // note"), "inta=1;");
    }

    #[test]
    fn normalize_strips_block_and_hash_comments() {
        let code = "# header\nint /* x */ f(void)\n{\n  return 0; /* multi\nline */ }\n";
        assert_eq!(normalize(code), "intf(void){return0;}");
    }

    #[test]
    fn normalize_canonical_is_fixed_point() {
        let canon = "inta=1;";
        assert_eq!(normalize(canon), canon);
    }

    #[test]
    fn normalize_unterminated_block_strips_to_end() {
        let n = normalize_report("int a; /* never closed\n int b;");
        assert_eq!(n.text, "inta;");
        assert!(n.unterminated_comment);
    }

    #[test]
    fn normalize_rejoined_slashes_are_stable() {
        // whitespace removal turns `/ /` into `//`
        let once = normalize("a / / b\nc");
        assert_eq!(normalize(&once), once);
        let lead = normalize("/* c */ #define X 1\ny");
        assert_eq!(normalize(&lead), lead);
    }

    #[test]
    fn dedup_keeps_earliest() {
        let a = Instance::new("b", "int f() { return 1; }", 1, d("2021-07-01"));
        let b = Instance::new("a", "int f(){return 1;} // dup", 1, d("2019-03-01"));
        let out = deduplicate(&[a, b.clone()]);
        assert_eq!(out, vec![b]);
    }

    #[test]
    fn dedup_tie_breaks_on_id() {
        let a = Instance::new("z", "x", 0, d("2020-01-01"));
        let b = Instance::new("m", " x ", 0, d("2020-01-01"));
        assert_eq!(deduplicate(&[a, b.clone()]), vec![b]);
    }

    #[test]
    fn dedup_single_is_identity() {
        let a = Instance::new("a", "x", 0, d("2020-01-01"));
        assert_eq!(deduplicate(std::slice::from_ref(&a)), vec![a]);
    }

    #[test]
    fn segment_window_counts_match_calendar() {
        let r = paper_range();
        let counts: Vec<usize> = Granularity::ALL
            .iter()
            .map(|g| segment(&[], &r, *g).unwrap().len())
            .collect();
        assert_eq!(counts, vec![84, 42, 28, 14, 7]);
    }

    #[test]
    fn segment_empty_corpus_keeps_empty_windows() {
        let ws = segment(&[], &paper_range(), Granularity::BiMonthly).unwrap();
        assert_eq!(ws.len(), 42);
        assert!(ws.iter().all(|w| w.is_empty() && !w.partial));
        assert_eq!(ws[4].label(), "2018_M09-10");
    }

    #[test]
    fn segment_flags_partial_final_window() {
        let r = DateRange::new(d("2018-01-01"), d("2018-05-15")).unwrap();
        let ws = segment(&[], &r, Granularity::BiMonthly).unwrap();
        assert_eq!(ws.len(), 3);
        assert!(ws[2].partial);
        assert_eq!(ws[2].end_date, d("2018-05-15"));
    }

    #[test]
    fn segment_places_boundary_dates() {
        let insts = vec![
            Instance::new("a", "a", 1, d("2018-02-28")),
            Instance::new("b", "b", 0, d("2018-03-01")),
            Instance::new("c", "c", 0, d("2024-12-31")),
        ];
        let ws = segment(&insts, &paper_range(), Granularity::BiMonthly).unwrap();
        assert_eq!(ws[0].instances[0].id, "a");
        assert_eq!(ws[1].instances[0].id, "b");
        assert_eq!(ws[41].instances[0].id, "c");
    }

    #[test]
    fn segment_rejects_mid_month_start_and_out_of_range() {
        let r = DateRange::new(d("2018-01-02"), d("2018-12-31")).unwrap();
        assert!(matches!(segment(&[], &r, Granularity::Monthly), Err(Error::Config(_))));
        let late = Instance::new("x", "x", 0, d("2025-01-01"));
        assert!(segment(&[late], &paper_range(), Granularity::Monthly).is_err());
    }

    #[test]
    fn granularity_parsing() {
        assert_eq!("2m".parse::<Granularity>().unwrap(), Granularity::BiMonthly);
        assert_eq!("12".parse::<Granularity>().unwrap(), Granularity::Yearly);
        assert!(matches!("4m".parse::<Granularity>(), Err(Error::Config(_))));
    }

    #[test]
    fn stats_prevalence() {
        let r = DateRange::new(d("2018-01-01"), d("2018-01-31")).unwrap();
        let insts: Vec<Instance> = [1, 1, 0, 0]
            .iter()
            .enumerate()
            .map(|(i, l)| Instance::new(format!("i{i}"), format!("c{i}"), *l, d("2018-01-05")))
            .collect();
        let ws = segment(&insts, &r, Granularity::Monthly).unwrap();
        let st = corpus_stats(&ws);
        assert_eq!(st.windows[0].count, 4);
        assert_eq!(st.windows[0].prevalence, 0.5);

        let all_pos: Vec<Instance> = insts
            .iter()
            .cloned()
            .map(|mut i| {
                i.label = 1;
                i
            })
            .collect();
        let st = corpus_stats(&segment(&all_pos, &r, Granularity::Monthly).unwrap());
        assert_eq!(st.windows[0].prevalence, 1.0);
    }

    #[test]
    fn stats_all_empty_reports_zeros() {
        let ws = segment(&[], &paper_range(), Granularity::Yearly).unwrap();
        let st = corpus_stats(&ws);
        assert_eq!(st.empty_windows, 7);
        assert_eq!(st.count.median, 0.0);
        assert!(st
            .to_csv()
            .starts_with("window_index,start_date,end_date,count,prevalence\n"));
    }
}
