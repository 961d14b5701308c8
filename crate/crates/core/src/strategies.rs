//! Training regimes driven window by window: baselines, replay variants,
//! confidence-aware selective replay (CASR), its class-balanced hybrid,
//! label-balanced loss weighting and the orthogonality-regularized adapter.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{ModelBackend, TrainRequest};
use crate::corpus::{Instance, NormalizedKey, Window, FIXED, VULNERABLE};
use crate::error::{Error, Result};
use crate::model::{class_weights, LossMode, OrthoState, Prediction, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    ZeroShot,
    WindowOnly,
    Cumulative,
    #[serde(rename = "replay_1p")]
    Replay1P,
    #[serde(rename = "replay_3p")]
    Replay3P,
    Casr,
    HybridCasr,
    LbCl,
    Olora,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 9] = [
        StrategyKind::ZeroShot,
        StrategyKind::WindowOnly,
        StrategyKind::Cumulative,
        StrategyKind::Replay1P,
        StrategyKind::Replay3P,
        StrategyKind::Casr,
        StrategyKind::HybridCasr,
        StrategyKind::LbCl,
        StrategyKind::Olora,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::ZeroShot => "zero_shot",
            StrategyKind::WindowOnly => "window_only",
            StrategyKind::Cumulative => "cumulative",
            StrategyKind::Replay1P => "replay_1p",
            StrategyKind::Replay3P => "replay_3p",
            StrategyKind::Casr => "casr",
            StrategyKind::HybridCasr => "hybrid_casr",
            StrategyKind::LbCl => "lb_cl",
            StrategyKind::Olora => "olora",
        }
    }

    pub fn buffer_policy(self) -> Option<(BufferPolicy, Option<usize>)> {
        match self {
            StrategyKind::Replay1P => Some((BufferPolicy::FifoUniform, Some(1))),
            StrategyKind::Replay3P => Some((BufferPolicy::FifoUniform, Some(3))),
            StrategyKind::Casr => Some((BufferPolicy::Casr, None)),
            StrategyKind::HybridCasr => Some((BufferPolicy::HybridCasr, None)),
            _ => None,
        }
    }

    /// Whether the model carries over from one window to the next.
    pub fn is_persistent(self) -> bool {
        !matches!(self, StrategyKind::WindowOnly | StrategyKind::Cumulative)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| {
                let names: Vec<&str> = StrategyKind::ALL.iter().map(|k| k.as_str()).collect();
                Error::Config(format!("unknown strategy `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferPolicy {
    FifoUniform,
    Casr,
    HybridCasr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    pub tau: f64,
    pub uncertainty_fraction: f64,
    pub replay_batch_fraction: f64,
    pub buffer_capacity: usize,
    pub ortho_beta: f64,
    /// Cap on retained orthogonal basis columns; four adapter ranks when unset.
    pub ortho_max_dim: Option<usize>,
    /// Rescore every buffered entry before each draw instead of only at insertion.
    pub refresh_confidences: bool,
}

impl Default for StrategySpec {
    fn default() -> Self {
        Self::new(StrategyKind::WindowOnly)
    }
}

impl StrategySpec {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            tau: 0.7,
            uncertainty_fraction: 0.7,
            replay_batch_fraction: 0.25,
            buffer_capacity: 512,
            ortho_beta: if kind == StrategyKind::Olora { 0.1 } else { 0.0 },
            ortho_max_dim: None,
            refresh_confidences: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.5 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0.5, 1), got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.uncertainty_fraction) {
            return Err(Error::Config("uncertainty_fraction must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.replay_batch_fraction) {
            return Err(Error::Config("replay_batch_fraction must lie in [0, 1]".into()));
        }
        if self.kind.buffer_policy().is_some() && self.buffer_capacity == 0 {
            return Err(Error::Config(
                "buffer_capacity must be positive for replay strategies".into(),
            ));
        }
        if self.ortho_beta < 0.0 {
            return Err(Error::Config("ortho_beta must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub instance: Instance,
    pub last_confidence: f64,
    pub last_correct: bool,
    pub inserted_at: usize,
}

impl BufferEntry {
    pub fn scored(instance: Instance, prediction: &Prediction, window: usize) -> Self {
        Self {
            last_correct: prediction.predicted_label == instance.label,
            last_confidence: prediction.confidence,
            instance,
            inserted_at: window,
        }
    }

    pub fn is_priority(&self, tau: f64) -> bool {
        self.last_confidence < tau || !self.last_correct
    }
}

/// Selected indices into the candidate list plus the size of the priority pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CasrSelection {
    pub indices: Vec<usize>,
    pub priority_pool: usize,
}

/// Low-confidence or misclassified entries first, ascending confidence
/// (ties: older `inserted_at`, then smaller id); shortfalls are filled by
/// seeded-uniform draws from the remaining entries.
pub fn casr_select_indices(candidates: &[BufferEntry], k: usize, tau: f64, rng: &mut ChaCha8Rng) -> CasrSelection {
    let mut pool: Vec<usize> = (0..candidates.len())
        .filter(|&i| candidates[i].is_priority(tau))
        .collect();
    let priority_pool = pool.len();
    if k >= candidates.len() {
        return CasrSelection {
            indices: (0..candidates.len()).collect(),
            priority_pool,
        };
    }
    pool.sort_by(|&x, &y| {
        let (a, b) = (&candidates[x], &candidates[y]);
        a.last_confidence
            .total_cmp(&b.last_confidence)
            .then(a.inserted_at.cmp(&b.inserted_at))
            .then_with(|| a.instance.id.cmp(&b.instance.id))
    });
    let mut chosen: Vec<usize> = pool.into_iter().take(k).collect();
    if chosen.len() < k {
        let rest: Vec<usize> = (0..candidates.len())
            .filter(|&i| !candidates[i].is_priority(tau))
            .collect();
        let need = k - chosen.len();
        chosen.extend(sample(rng, rest.len(), need).into_iter().map(|j| rest[j]));
    }
    CasrSelection {
        indices: chosen,
        priority_pool,
    }
}

pub fn casr_select(candidates: &[BufferEntry], k: usize, tau: f64, rng: &mut ChaCha8Rng) -> Vec<BufferEntry> {
    casr_select_indices(candidates, k, tau, rng)
        .indices
        .into_iter()
        .map(|i| candidates[i].clone())
        .collect()
}

/// `floor(fraction * k)`, robust to representation error in the fraction.
pub fn uncertainty_slots(k: usize, fraction: f64) -> usize {
    ((fraction * k as f64) + 1e-9).floor() as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct Composition {
    pub entries: Vec<BufferEntry>,
    pub uncertainty_slots: usize,
    pub uniform_slots: usize,
    /// Balanced candidate counts as `[fixed, vulnerable]`.
    pub candidate_counts: [usize; 2],
    pub priority_pool: usize,
}

/// Class-balanced candidate set, then `floor(fraction * k)` CASR slots and the
/// rest uniform from unchosen candidates. Never returns duplicates.
pub fn hybrid_casr_compose(
    entries: &[BufferEntry],
    k: usize,
    tau: f64,
    uncertainty_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Composition {
    let by_class = |label: u8| -> Vec<usize> {
        (0..entries.len())
            .filter(|&i| entries[i].instance.label == label)
            .collect()
    };
    let vulnerable = by_class(VULNERABLE);
    let fixed = by_class(FIXED);
    let candidates: Vec<usize> = if vulnerable.is_empty() || fixed.is_empty() {
        if !entries.is_empty() {
            log::warn!("replay buffer holds a single class; class balancing is impossible");
        }
        (0..entries.len()).collect()
    } else {
        let n = vulnerable.len().min(fixed.len());
        let mut pick =
            |group: &[usize]| -> Vec<usize> { sample(rng, group.len(), n).into_iter().map(|j| group[j]).collect() };
        let mut c = pick(&vulnerable);
        c.extend(pick(&fixed));
        c
    };
    let candidate_counts = [
        candidates
            .iter()
            .filter(|&&i| entries[i].instance.label == FIXED)
            .count(),
        candidates
            .iter()
            .filter(|&&i| entries[i].instance.label == VULNERABLE)
            .count(),
    ];
    let cand_entries: Vec<BufferEntry> = candidates.iter().map(|&i| entries[i].clone()).collect();
    let k_eff = k.min(cand_entries.len());
    let k_u = uncertainty_slots(k_eff, uncertainty_fraction);
    let sel = casr_select_indices(&cand_entries, k_u, tau, rng);
    let mut taken = vec![false; cand_entries.len()];
    for &i in &sel.indices {
        taken[i] = true;
    }
    let remaining: Vec<usize> = (0..cand_entries.len()).filter(|&i| !taken[i]).collect();
    let k_rest = k_eff - sel.indices.len();
    let uniform: Vec<usize> = sample(rng, remaining.len(), k_rest)
        .into_iter()
        .map(|j| remaining[j])
        .collect();
    let entries_out = sel
        .indices
        .iter()
        .chain(&uniform)
        .map(|&i| cand_entries[i].clone())
        .collect();
    Composition {
        entries: entries_out,
        uncertainty_slots: sel.indices.len(),
        uniform_slots: uniform.len(),
        candidate_counts,
        priority_pool: sel.priority_pool,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub entries: Vec<BufferEntry>,
    pub capacity: usize,
    pub policy: BufferPolicy,
    /// Number of most recent windows retained; `None` keeps all.
    pub window_span: Option<usize>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, policy: BufferPolicy, window_span: Option<usize>) -> Self {
        Self {
            entries: Vec::new(),
            capacity,
            policy,
            window_span,
        }
    }

    pub fn for_spec(spec: &StrategySpec) -> Option<Self> {
        spec.kind
            .buffer_policy()
            .map(|(policy, span)| Self::new(spec.buffer_capacity, policy, span))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts a finished window scored by the model just trained on it, then evicts.
    pub fn update(
        &mut self,
        window_index: usize,
        instances: &[Instance],
        predictions: &[Prediction],
        tau: f64,
        uncertainty_fraction: f64,
        rng: &mut ChaCha8Rng,
    ) {
        assert_eq!(instances.len(), predictions.len());
        self.entries.extend(
            instances
                .iter()
                .zip(predictions)
                .map(|(i, p)| BufferEntry::scored(i.clone(), p, window_index)),
        );
        self.evict(window_index, tau, uncertainty_fraction, rng);
    }

    pub fn evict(&mut self, current_window: usize, tau: f64, uncertainty_fraction: f64, rng: &mut ChaCha8Rng) {
        if let Some(span) = self.window_span {
            self.entries.retain(|e| e.inserted_at + span > current_window);
        }
        if self.entries.len() <= self.capacity {
            return;
        }
        self.entries = match self.policy {
            BufferPolicy::FifoUniform => {
                let mut keep = sample(rng, self.entries.len(), self.capacity).into_vec();
                keep.sort_unstable();
                keep.into_iter().map(|i| self.entries[i].clone()).collect()
            }
            BufferPolicy::Casr => casr_select(&self.entries, self.capacity, tau, rng),
            BufferPolicy::HybridCasr => {
                hybrid_casr_compose(&self.entries, self.capacity, tau, uncertainty_fraction, rng).entries
            }
        };
    }

    /// Replay draw of `k` entries under the buffer's policy.
    pub fn draw(&self, k: usize, tau: f64, uncertainty_fraction: f64, rng: &mut ChaCha8Rng) -> Vec<BufferEntry> {
        match self.policy {
            BufferPolicy::FifoUniform => {
                let k = k.min(self.entries.len());
                sample(rng, self.entries.len(), k)
                    .into_iter()
                    .map(|i| self.entries[i].clone())
                    .collect()
            }
            BufferPolicy::Casr => casr_select(&self.entries, k, tau, rng),
            BufferPolicy::HybridCasr => hybrid_casr_compose(&self.entries, k, tau, uncertainty_fraction, rng).entries,
        }
    }
}

/// What one strategy step did.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// `None` when the step trains nothing (zero-shot).
    pub report: Option<TrainReport>,
    pub train_size: usize,
    pub replay_size: usize,
    /// Normalized keys of every instance handed to the trainer.
    pub training_keys: Vec<NormalizedKey>,
}

/// Per-run strategy state: replay buffer, orthogonal basis and sampling RNG.
pub struct StrategyRunner {
    spec: StrategySpec,
    config: TrainConfig,
    buffer: Option<ReplayBuffer>,
    ortho: Option<OrthoState>,
    rng: ChaCha8Rng,
    started: bool,
}

impl StrategyRunner {
    pub fn new(spec: StrategySpec, config: TrainConfig) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(0x5eed);
        Ok(Self {
            buffer: ReplayBuffer::for_spec(&spec),
            ortho: None,
            spec,
            config,
            rng,
            started: false,
        })
    }

    pub fn spec(&self) -> &StrategySpec {
        &self.spec
    }

    pub fn buffer(&self) -> Option<&ReplayBuffer> {
        self.buffer.as_ref()
    }

    pub fn ortho(&self) -> Option<&OrthoState> {
        self.ortho.as_ref()
    }

    /// Train configuration with strategy-specific overrides applied.
    pub fn effective_config(&self) -> TrainConfig {
        let mut cfg = self.config.clone();
        match self.spec.kind {
            StrategyKind::LbCl => cfg.loss_mode = LossMode::ClassWeighted,
            StrategyKind::Olora => cfg.ortho_beta = self.spec.ortho_beta,
            _ => {}
        }
        cfg
    }

    /// Runs the strategy on window `t` (1-based) of `windows`, using only
    /// windows `1..=t`. An empty training window is an error the caller
    /// records as a gap.
    pub fn step(&mut self, backend: &mut dyn ModelBackend, windows: &[Window], t: usize) -> Result<StepOutcome> {
        assert!(t >= 1 && t <= windows.len(), "window index {t} out of range");
        let history = &windows[..t];
        let current = &history[t - 1];
        let kind = self.spec.kind;

        if kind == StrategyKind::ZeroShot {
            if !self.started {
                backend.reset()?;
                self.started = true;
            }
            return Ok(StepOutcome {
                report: None,
                train_size: 0,
                replay_size: 0,
                training_keys: Vec::new(),
            });
        }
        if current.is_empty() {
            return Err(Error::Model(format!("window {t} is empty; nothing to train on")));
        }
        if !kind.is_persistent() || !self.started {
            backend.reset()?;
            self.started = true;
        }
        let config = self.effective_config();

        let cumulative: Vec<Instance>;
        let train_window: &[Instance] = if kind == StrategyKind::Cumulative {
            cumulative = history.iter().flat_map(|w| w.instances.iter().cloned()).collect();
            &cumulative
        } else {
            &current.instances
        };

        let replay: Vec<Instance> = match &mut self.buffer {
            Some(buffer) => {
                if self.spec.refresh_confidences && !buffer.is_empty() {
                    let insts: Vec<Instance> = buffer.entries.iter().map(|e| e.instance.clone()).collect();
                    let preds = backend.predict(&insts)?;
                    for (e, p) in buffer.entries.iter_mut().zip(&preds) {
                        e.last_confidence = p.confidence;
                        e.last_correct = p.predicted_label == e.instance.label;
                    }
                }
                let k = (self.spec.replay_batch_fraction * current.len() as f64).floor() as usize;
                buffer
                    .draw(k, self.spec.tau, self.spec.uncertainty_fraction, &mut self.rng)
                    .into_iter()
                    .map(|e| e.instance)
                    .collect()
            }
            None => Vec::new(),
        };

        if kind == StrategyKind::Olora && self.ortho.is_none() {
            let model = backend.reference_model().ok_or_else(|| Error::Unsupported {
                backend: backend.name(),
                what: "orthogonality regularization needs the in-process model".into(),
            })?;
            let mut state = OrthoState::for_model(model.config());
            if let Some(cap) = self.spec.ortho_max_dim {
                state = OrthoState::new(state.dim(), cap);
            }
            self.ortho = Some(state);
        }

        let weights =
            (config.loss_mode == LossMode::ClassWeighted).then(|| class_weights(train_window.iter().map(|i| &i.label)));
        let report = backend.train(&TrainRequest {
            window: train_window,
            replay: &replay,
            config: &config,
            class_weights: weights,
            ortho: self.ortho.as_ref(),
        })?;

        if let (StrategyKind::Olora, Some(ortho)) = (kind, self.ortho.as_mut()) {
            if let Some(model) = backend.reference_model() {
                ortho.absorb_adapter(model);
            }
        }

        if let Some(buffer) = &mut self.buffer {
            let preds = backend.predict(&current.instances)?;
            buffer.update(
                t,
                &current.instances,
                &preds,
                self.spec.tau,
                self.spec.uncertainty_fraction,
                &mut self.rng,
            );
        }

        let training_keys = train_window.iter().chain(&replay).map(Instance::key).collect();
        Ok(StepOutcome {
            report: Some(report),
            train_size: train_window.len(),
            replay_size: replay.len(),
            training_keys,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn entry(id: &str, conf: f64, correct: bool, at: usize, label: u8) -> BufferEntry {
        BufferEntry {
            instance: Instance::new(id, id, label, NaiveDate::from_ymd_opt(2020, 1, 1).unwrap()),
            last_confidence: conf,
            last_correct: correct,
            inserted_at: at,
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn casr_prefers_uncertain_and_misclassified() {
        let c = vec![
            entry("a", 0.95, true, 1, 0),
            entry("b", 0.65, true, 1, 0),
            entry("c", 0.90, false, 1, 1),
        ];
        let got: Vec<String> = casr_select(&c, 2, 0.7, &mut rng())
            .into_iter()
            .map(|e| e.instance.id)
            .collect();
        assert_eq!(got, vec!["b", "c"]);
    }

    #[test]
    fn casr_empty_pool_samples_uniformly() {
        let c: Vec<BufferEntry> = (0..5).map(|i| entry(&format!("e{i}"), 0.99, true, 1, 0)).collect();
        let sel = casr_select_indices(&c, 2, 0.7, &mut rng());
        assert_eq!(sel.priority_pool, 0);
        assert_eq!(sel.indices.len(), 2);
        assert_ne!(sel.indices[0], sel.indices[1]);
    }

    #[test]
    fn casr_k_above_len_returns_all() {
        let c = vec![entry("a", 0.9, true, 1, 0)];
        assert_eq!(casr_select(&c, 5, 0.7, &mut rng()).len(), 1);
    }

    #[test]
    fn hybrid_splits_seven_three() {
        let entries: Vec<BufferEntry> = (0..20)
            .map(|i| {
                entry(
                    &format!("e{i:02}"),
                    0.5 + i as f64 * 0.02,
                    true,
                    1,
                    u8::from(i % 2 == 0),
                )
            })
            .collect();
        let comp = hybrid_casr_compose(&entries, 10, 0.7, 0.7, &mut rng());
        assert_eq!((comp.uncertainty_slots, comp.uniform_slots), (7, 3));
        assert_eq!(comp.entries.len(), 10);
    }

    #[test]
    fn hybrid_balances_candidates() {
        let entries: Vec<BufferEntry> = (0..20)
            .map(|i| entry(&format!("e{i:02}"), 0.8, true, 1, u8::from(i < 6)))
            .collect();
        let comp = hybrid_casr_compose(&entries, 10, 0.7, 0.7, &mut rng());
        assert_eq!(comp.candidate_counts, [6, 6]);
    }

    #[test]
    fn fifo_span_one_keeps_latest_window() {
        let mut buf = ReplayBuffer::new(512, BufferPolicy::FifoUniform, Some(1));
        let d = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        for t in 1..=3 {
            let insts: Vec<Instance> = (0..10).map(|i| Instance::new(format!("w{t}-{i}"), "x", 0, d)).collect();
            let preds = vec![Prediction::from_probs(0.8, 0.2); 10];
            buf.update(t, &insts, &preds, 0.7, 0.7, &mut rng());
            assert!(buf.entries.iter().all(|e| e.inserted_at == t));
        }
    }

    #[test]
    fn capacity_is_respected() {
        let mut buf = ReplayBuffer::new(512, BufferPolicy::FifoUniform, None);
        let d = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        for t in 1..=8 {
            let insts: Vec<Instance> = (0..100)
                .map(|i| Instance::new(format!("w{t}-{i}"), "x", 0, d))
                .collect();
            let before = buf.len();
            buf.update(
                t,
                &insts,
                &vec![Prediction::from_probs(0.3, 0.7); 100],
                0.7,
                0.7,
                &mut rng(),
            );
            assert!(buf.len() <= 512 && buf.len() <= before + 100);
        }
        assert_eq!(buf.len(), 512);
    }

    #[test]
    fn strategy_names_roundtrip() {
        for k in StrategyKind::ALL {
            assert_eq!(k.as_str().parse::<StrategyKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.as_str()));
        }
        assert_eq!("Hybrid-CASR".parse::<StrategyKind>().unwrap(), StrategyKind::HybridCasr);
    }

    #[test]
    fn spec_validation() {
        let mut s = StrategySpec::new(StrategyKind::Casr);
        s.tau = 0.5;
        assert!(s.validate().is_err());
        assert_eq!(StrategySpec::new(StrategyKind::Olora).ortho_beta, 0.1);
    }
}
