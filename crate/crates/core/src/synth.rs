//! Synthetic drifting corpus.
//!
//! Every function carries a few "signal" calls whose names differ between
//! the vulnerable and fixed versions (`unsafe_op_17` against `checked_op_17`).
//! The signal vocabulary slides along a fixed pool as time advances, so
//! adjacent windows share most of their signal tokens and distant ones share
//! few. Class prevalence oscillates sinusoidally across windows.

use chrono::{Datelike, Months, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{DateRange, Granularity, Instance, FIXED, VULNERABLE};
use crate::error::{Error, Result};
use crate::model::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub start: NaiveDate,
    pub windows: usize,
    pub granularity: Granularity,
    pub per_window: usize,
    /// Size of the signal-token pool.
    pub pool: usize,
    /// Pool positions the signal centre moves per window.
    pub drift_per_window: f64,
    /// Standard deviation of signal positions around the centre.
    pub spread: f64,
    pub signals_per_function: usize,
    /// Chance that a fixed function also contains one vulnerable-looking call.
    pub distractor_rate: f64,
    pub prevalence_mid: f64,
    pub prevalence_amplitude: f64,
    /// Oscillation period in windows.
    pub prevalence_period: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            start: NaiveDate::from_ymd_opt(2018, 1, 1).expect("valid date"),
            windows: 20,
            granularity: Granularity::BiMonthly,
            per_window: 120,
            pool: 64,
            drift_per_window: 2.0,
            spread: 3.0,
            signals_per_function: 2,
            distractor_rate: 0.1,
            prevalence_mid: 0.5,
            prevalence_amplitude: 0.25,
            prevalence_period: 6.0,
            seed: 0,
        }
    }
}

const NOISE: [&str; 16] = [
    "int i = 0;",
    "len = strlen(name);",
    "if (ctx == NULL) return -1;",
    "for (i = 0; i < n; i++) total += v[i];",
    "log_debug(\"enter\");",
    "flags |= MODE_READ;",
    "state->count++;",
    "tmp = lookup(table, key);",
    "while (node) node = node->next;",
    "ret = parse_header(hdr);",
    "unlock(&state->mu);",
    "lock(&state->mu);",
    "memset(&opts, 0, sizeof(opts));",
    "err = validate(opts);",
    "out->size = in->size;",
    "free(scratch);",
];

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.windows == 0 || self.per_window == 0 || self.pool == 0 || self.signals_per_function == 0 {
            return Err(Error::Config("synthetic corpus sizes must be positive".into()));
        }
        if self.start.day() != 1 {
            return Err(Error::Config(
                "synthetic corpus must start on the first of a month".into(),
            ));
        }
        let lo = self.prevalence_mid - self.prevalence_amplitude.abs();
        let hi = self.prevalence_mid + self.prevalence_amplitude.abs();
        if lo <= 0.0 || hi >= 1.0 {
            return Err(Error::Config("prevalence must stay strictly inside (0, 1)".into()));
        }
        Ok(())
    }

    /// Calendar span covered by the generated windows.
    pub fn range(&self) -> DateRange {
        let months = self.granularity.months() * self.windows as u32;
        let end = (self.start + Months::new(months))
            .pred_opt()
            .expect("date has a predecessor");
        DateRange { start: self.start, end }
    }

    pub fn prevalence(&self, window: usize) -> f64 {
        let phase = std::f64::consts::TAU * window as f64 / self.prevalence_period;
        self.prevalence_mid + self.prevalence_amplitude * phase.sin()
    }

    /// Centre of the signal distribution for `window` (0-based).
    pub fn centre(&self, window: usize) -> f64 {
        let travel = self.drift_per_window * (self.windows.saturating_sub(1)) as f64;
        (self.pool as f64 - travel).max(0.0) / 2.0 + self.drift_per_window * window as f64
    }
}

/// Training settings under which the reference model learns visibly within
/// one synthetic window. The default learning rate is sized for a
/// pretrained transformer and barely moves a linear model in a few steps.
pub fn train_preset(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.05,
        seed,
        ..TrainConfig::default()
    }
}

pub fn generate(config: &SynthConfig) -> Result<Vec<Instance>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let jitter = Normal::new(0.0, config.spread).map_err(|e| Error::Config(e.to_string()))?;
    let step = Months::new(config.granularity.months());
    let mut out = Vec::with_capacity(config.windows * config.per_window);
    let mut start = config.start;
    for w in 0..config.windows {
        let next = start + step;
        let days = (next - start).num_days();
        let prevalence = config.prevalence(w);
        let centre = config.centre(w);
        let signal = |rng: &mut ChaCha8Rng| {
            let pos = (centre + jitter.sample(rng)).round();
            pos.clamp(0.0, config.pool as f64 - 1.0) as usize
        };
        for n in 0..config.per_window {
            let label = if rng.random_bool(prevalence) { VULNERABLE } else { FIXED };
            let mut body = Vec::new();
            for _ in 0..rng.random_range(2..=4) {
                body.push(NOISE[rng.random_range(0..NOISE.len())].to_string());
            }
            for _ in 0..config.signals_per_function {
                let s = signal(&mut rng);
                let call = if label == VULNERABLE {
                    format!("unsafe_op_{s}(buf, n);")
                } else {
                    format!("checked_op_{s}(buf, n);")
                };
                let at = rng.random_range(0..=body.len());
                body.insert(at, call);
            }
            if label == FIXED && rng.random_bool(config.distractor_rate) {
                let s = signal(&mut rng);
                body.push(format!("unsafe_op_{s}(buf, n);"));
            }
            let id = format!("syn-{:03}-{:04}", w + 1, n);
            let code = format!(
                "int fn_{w}_{n}_{salt:08x}(char *buf, size_t n, size_t cap) {{\n    {}\n    return 0;\n}}\n",
                body.join("\n    "),
                salt = rng.random::<u32>(),
            );
            let date = start + chrono::Days::new(rng.random_range(0..days as u64));
            let mut inst = Instance::new(id, code, label, date);
            inst.language = Some("c".into());
            out.push(inst);
        }
        start = next;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{deduplicate, segment};

    #[test]
    fn deterministic_and_windowed() {
        let cfg = SynthConfig {
            per_window: 30,
            ..Default::default()
        };
        let a = generate(&cfg).unwrap();
        assert_eq!(a, generate(&cfg).unwrap());
        assert_eq!(deduplicate(&a).len(), a.len());
        let windows = segment(&a, &cfg.range(), cfg.granularity).unwrap();
        assert_eq!(windows.len(), 20);
        assert!(windows.iter().all(|w| w.len() == 30));
        assert_eq!(cfg.range().end, NaiveDate::from_ymd_opt(2021, 4, 30).unwrap());
    }

    #[test]
    fn centre_stays_inside_pool() {
        let cfg = SynthConfig::default();
        assert!(cfg.centre(0) >= 0.0);
        assert!(cfg.centre(cfg.windows - 1) <= cfg.pool as f64);
    }
}
