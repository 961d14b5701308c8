//! Run configuration: one TOML file, every key overridable from the command line.
//!
//! ```toml
//! corpus = "corpus.jsonl"
//! date_range = "2018-01-01..2024-12-31"
//! granularity = "2m"
//! strategies = ["window_only", "hybrid_casr"]
//! seeds = [1, 2, 3]
//! out = "runs"
//! backend = "reference"
//!
//! [train]
//! learning_rate = 2e-4
//!
//! [strategy]
//! tau = 0.7
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::BackendSpec;
use crate::corpus::{DateRange, Granularity};
use crate::error::{Error, Result};
use crate::model::{AdapterConfig, TrainConfig};
use crate::protocol::DEFAULT_LAGS;
use crate::strategies::{StrategyKind, StrategySpec};

pub const WORKERS_ENV: &str = "DRIFTHARNESS_WORKERS";

/// Strategy parameters shared by every strategy of a run. Unset keys keep
/// each strategy's own default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyParams {
    pub tau: Option<f64>,
    pub uncertainty_fraction: Option<f64>,
    pub replay_batch_fraction: Option<f64>,
    pub buffer_capacity: Option<usize>,
    /// Orthogonality weight for `olora`; other strategies never use it.
    pub ortho_beta: Option<f64>,
    pub ortho_max_dim: Option<usize>,
    pub refresh_confidences: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    #[serde(with = "range_string")]
    pub date_range: Option<DateRange>,
    pub granularity: Granularity,
    pub strategies: Vec<StrategyKind>,
    pub strategy: StrategyParams,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub backend: BackendSpec,
    pub workers: Option<usize>,
    pub lags: Vec<usize>,
    pub verify_checkpoint: bool,
    pub train: TrainConfig,
    pub adapter: AdapterConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            date_range: None,
            granularity: Granularity::BiMonthly,
            strategies: vec![StrategyKind::WindowOnly],
            strategy: StrategyParams::default(),
            seeds: vec![0],
            out: PathBuf::from("runs"),
            backend: BackendSpec::Reference,
            workers: None,
            lags: DEFAULT_LAGS.to_vec(),
            verify_checkpoint: true,
            train: TrainConfig::default(),
            adapter: AdapterConfig::default(),
        }
    }
}

mod range_string {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::corpus::DateRange;

    pub fn serialize<S: Serializer>(r: &Option<DateRange>, s: S) -> Result<S::Ok, S::Error> {
        match r {
            Some(r) => s.serialize_str(&format!("{}..{}", r.start, r.end)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DateRange>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|s| s.parse().map_err(serde::de::Error::custom))
            .transpose()
    }
}

/// Command-line values that replace configuration keys.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub corpus: Option<PathBuf>,
    pub strategies: Option<Vec<StrategyKind>>,
    pub granularity: Option<Granularity>,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub backend: Option<BackendSpec>,
}

impl RunConfig {
    /// Parses a TOML file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(c) = cfg.corpus.as_mut() {
            if c.is_relative() {
                *c = base.join(&*c);
            }
        }
        if cfg.out.is_relative() {
            cfg.out = base.join(&cfg.out);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: Overrides) {
        if let Some(v) = o.corpus {
            self.corpus = Some(v);
        }
        if let Some(v) = o.strategies {
            self.strategies = v;
        }
        if let Some(v) = o.granularity {
            self.granularity = v;
        }
        if let Some(v) = o.seeds {
            self.seeds = v;
        }
        if let Some(v) = o.out {
            self.out = v;
        }
        if let Some(v) = o.backend {
            self.backend = v;
        }
    }

    /// Fully resolved spec for one strategy.
    pub fn strategy_spec(&self, kind: StrategyKind) -> StrategySpec {
        let p = &self.strategy;
        let mut spec = StrategySpec::new(kind);
        if let Some(v) = p.tau {
            spec.tau = v;
        }
        if let Some(v) = p.uncertainty_fraction {
            spec.uncertainty_fraction = v;
        }
        if let Some(v) = p.replay_batch_fraction {
            spec.replay_batch_fraction = v;
        }
        if let Some(v) = p.buffer_capacity {
            spec.buffer_capacity = v;
        }
        if let (Some(v), StrategyKind::Olora) = (p.ortho_beta, kind) {
            spec.ortho_beta = v;
        }
        if p.ortho_max_dim.is_some() {
            spec.ortho_max_dim = p.ortho_max_dim;
        }
        if let Some(v) = p.refresh_confidences {
            spec.refresh_confidences = v;
        }
        spec
    }

    /// Training config of one run, seeded with `seed`.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("at least one strategy is required".into()));
        }
        if let Some(c) = &self.corpus {
            if !c.exists() {
                return Err(Error::Config(format!("corpus {} does not exist", c.display())));
            }
        }
        if self.lags.is_empty() || self.lags.contains(&0) {
            return Err(Error::Config(
                "lags must be a nonempty list of positive integers".into(),
            ));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        self.train.validate()?;
        for &kind in &self.strategies {
            self.strategy_spec(kind).validate()?;
        }
        Ok(())
    }

    /// Worker count: the configured value (or available parallelism), capped
    /// by the environment variable when it is set.
    pub fn worker_count(&self) -> usize {
        let base = self
            .workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        let cap = std::env::var(WORKERS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok());
        match cap {
            Some(c) if c > 0 => base.min(c),
            _ => base,
        }
        .max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_overrides() {
        let mut cfg: RunConfig = toml::from_str(
            r#"
            date_range = "2018-01-01..2018-12-31"
            granularity = "3m"
            strategies = ["replay_1p", "olora"]
            seeds = [1, 2]
            backend = "external:python adapter.py"

            [train]
            learning_rate = 0.01

            [strategy]
            tau = 0.8
            ortho_beta = 0.5
            "#,
        )
        .unwrap();
        assert_eq!(cfg.granularity, Granularity::Quarterly);
        assert_eq!(cfg.backend, BackendSpec::External("python adapter.py".into()));
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.strategy_spec(StrategyKind::Replay1P).tau, 0.8);
        assert_eq!(cfg.strategy_spec(StrategyKind::Replay1P).ortho_beta, 0.0);
        assert_eq!(cfg.strategy_spec(StrategyKind::Olora).ortho_beta, 0.5);
        cfg.validate().unwrap();

        cfg.apply(Overrides {
            seeds: Some(vec![7]),
            ..Default::default()
        });
        assert_eq!(cfg.seeds, vec![7]);
        let round: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_empty_seeds() {
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
        let cfg = RunConfig {
            seeds: vec![],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
