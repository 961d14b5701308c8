//! Reference classifier: a frozen linear base over hashed features plus a
//! trainable low-rank additive adapter.
//!
//! Logits are `(W0 + (alpha / rank) * A * B) x` with `W0` (2 x dim) frozen,
//! `A` (2 x rank) initialised to zero and `B` (rank x dim) to a small seeded
//! Gaussian, so an untrained adapter reproduces the base model exactly.
//!
//! The orthogonality regularizer acts on the input-side factor: each row of
//! `B` is a direction in feature space, and the penalty is the squared norm of
//! those rows projected onto the historical subspace held by [`OrthoState`].

use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Instance, FIXED, VULNERABLE};
use crate::error::{Error, Result};
use crate::features::{featurize, FeatureConfig, FeatureVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub features: FeatureConfig,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Seed for `W0` and the initial `B`.
    pub init_seed: u64,
    /// Standard deviation of `W0` entries.
    pub base_scale: f64,
    /// Standard deviation of initial `B` entries.
    pub adapter_init_scale: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            rank: 16,
            alpha: 32.0,
            dropout: 0.05,
            init_seed: 0,
            base_scale: 1.0,
            adapter_init_scale: 0.1,
        }
    }
}

impl AdapterConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Plain,
    ClassWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub ortho_beta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            epochs: 3,
            batch_size: 32,
            weight_decay: 0.0,
            seed: 0,
            loss_mode: LossMode::Plain,
            ortho_beta: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.weight_decay < 0.0 || self.ortho_beta < 0.0 {
            return Err(Error::Config("weight_decay and ortho_beta must be non-negative".into()));
        }
        Ok(())
    }
}

/// Inverse-frequency weights `N / (2 N_c)`; an absent class gets weight 0.
pub fn class_weights<'a>(labels: impl IntoIterator<Item = &'a u8>) -> [f64; 2] {
    let mut counts = [0usize; 2];
    for &l in labels {
        counts[usize::from(l)] += 1;
    }
    let n = (counts[0] + counts[1]) as f64;
    let mut w = [0.0; 2];
    for c in 0..2 {
        if counts[c] == 0 {
            if n > 0.0 {
                log::warn!("class {c} absent from training window; its loss weight is 0");
            }
        } else {
            w[c] = n / (2.0 * counts[c] as f64);
        }
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub prob_fixed: f64,
    pub prob_vulnerable: f64,
    pub predicted_label: u8,
    pub confidence: f64,
}

impl Prediction {
    pub fn from_probs(prob_fixed: f64, prob_vulnerable: f64) -> Self {
        // exact ties go to FIXED
        let predicted_label = if prob_vulnerable > 0.5 { VULNERABLE } else { FIXED };
        Self {
            prob_fixed,
            prob_vulnerable,
            predicted_label,
            confidence: prob_fixed.max(prob_vulnerable),
        }
    }

    pub fn from_logits(logits: [f64; 2]) -> Self {
        let [p0, p1] = softmax(logits);
        Self::from_probs(p0, p1)
    }
}

fn softmax(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// Orthonormal basis of previously absorbed adapter directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthoState {
    dim: usize,
    max_dim: usize,
    /// Oldest first.
    columns: Vec<Vec<f64>>,
}

const ABSORB_RESIDUAL_TOL: f64 = 1e-6;

impl OrthoState {
    pub fn new(dim: usize, max_dim: usize) -> Self {
        Self {
            dim,
            max_dim,
            columns: Vec::new(),
        }
    }

    /// Default cap of four adapter ranks.
    pub fn for_model(config: &AdapterConfig) -> Self {
        Self::new(config.features.dim, config.rank * 4)
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_dim(&self) -> usize {
        self.max_dim
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    /// Basis as a `dim x len` matrix.
    pub fn matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.dim, self.columns.len()));
        for (j, col) in self.columns.iter().enumerate() {
            m.column_mut(j).assign(&Array1::from(col.clone()));
        }
        m
    }

    /// Orthonormalizes each direction against the basis and appends it;
    /// residuals below 1e-6 are dropped and the oldest columns evicted past `max_dim`.
    pub fn absorb_directions<'a>(&mut self, directions: impl IntoIterator<Item = &'a [f64]>) {
        for dir in directions {
            assert_eq!(dir.len(), self.dim, "direction dimension mismatch");
            let mut v = dir.to_vec();
            // two Gram-Schmidt sweeps keep the basis orthonormal to ~1e-15
            for _ in 0..2 {
                for col in &self.columns {
                    let p = dot(col, &v);
                    v.iter_mut().zip(col).for_each(|(x, c)| *x -= p * c);
                }
            }
            let n = dot(&v, &v).sqrt();
            if n < ABSORB_RESIDUAL_TOL {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= n);
            self.columns.push(v);
        }
        if self.columns.len() > self.max_dim {
            let excess = self.columns.len() - self.max_dim;
            self.columns.drain(..excess);
        }
    }

    /// Absorbs the rows of the model's input-side adapter factor.
    pub fn absorb_adapter(&mut self, model: &AdapterModel) {
        let b = model.b();
        let rows: Vec<Vec<f64>> = b.rows().into_iter().map(|r| r.to_vec()).collect();
        self.absorb_directions(rows.iter().map(Vec::as_slice));
    }

    /// Largest absolute deviation of `basis^T basis` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, a) in self.columns.iter().enumerate() {
            for (j, b) in self.columns.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(a, b) - target).abs());
            }
        }
        worst
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient-bearing loss evaluation.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    pub cross_entropy: f64,
    /// Unscaled orthogonality term; `total` includes `beta` times this.
    pub ortho: f64,
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
}

/// One training example as seen by the loss: the base path uses `x`, the
/// adapter path uses `x_adapter` (equal to `x` unless dropout is active).
#[derive(Debug, Clone, Copy)]
pub struct LossSample<'a> {
    pub x: &'a FeatureVector,
    pub x_adapter: &'a FeatureVector,
    pub label: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainReport {
    pub wall_time_s: f64,
    pub steps: usize,
    pub examples: usize,
    pub final_loss: f64,
}

/// Frozen base, trainable adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterModel {
    config: AdapterConfig,
    base: Array2<f64>,
    a: Array2<f64>,
    b: Array2<f64>,
    train_calls: u64,
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("finite positive std");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

impl AdapterModel {
    pub fn new(config: AdapterConfig) -> Self {
        let dim = config.features.dim;
        let mut base_rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        base_rng.set_stream(1);
        let mut adapter_rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        adapter_rng.set_stream(2);
        Self {
            base: gaussian_matrix(2, dim, config.base_scale, &mut base_rng),
            a: Array2::zeros((2, config.rank)),
            b: gaussian_matrix(config.rank, dim, config.adapter_init_scale, &mut adapter_rng),
            config,
            train_calls: 0,
        }
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn base(&self) -> ArrayView2<'_, f64> {
        self.base.view()
    }

    pub fn a(&self) -> ArrayView2<'_, f64> {
        self.a.view()
    }

    pub fn b(&self) -> ArrayView2<'_, f64> {
        self.b.view()
    }

    pub fn set_adapter(&mut self, a: Array2<f64>, b: Array2<f64>) -> Result<()> {
        if a.dim() != self.a.dim() || b.dim() != self.b.dim() {
            return Err(Error::Model(format!(
                "adapter shape mismatch: got A {:?}, B {:?}; expected A {:?}, B {:?}",
                a.dim(),
                b.dim(),
                self.a.dim(),
                self.b.dim()
            )));
        }
        self.a = a;
        self.b = b;
        Ok(())
    }

    pub fn train_calls(&self) -> u64 {
        self.train_calls
    }

    /// SHA-256 over the little-endian bytes of `W0`.
    pub fn base_digest(&self) -> String {
        matrix_digest(&self.base)
    }

    pub fn featurize(&self, code: &str) -> FeatureVector {
        featurize(code, &self.config.features)
    }

    pub fn base_logits(&self, x: &FeatureVector) -> [f64; 2] {
        let mut z = [0.0; 2];
        for (i, v) in x.iter() {
            z[0] += self.base[[0, i]] * v;
            z[1] += self.base[[1, i]] * v;
        }
        z
    }

    fn hidden(&self, x: &FeatureVector) -> Array1<f64> {
        let mut h = Array1::zeros(self.config.rank);
        for (i, v) in x.iter() {
            h.scaled_add(v, &self.b.column(i));
        }
        h
    }

    fn logits_split(&self, x: &FeatureVector, x_adapter: &FeatureVector) -> ([f64; 2], Array1<f64>) {
        let mut z = self.base_logits(x);
        let h = self.hidden(x_adapter);
        let s = self.config.scaling();
        let ah = self.a.dot(&h);
        z[0] += s * ah[0];
        z[1] += s * ah[1];
        (z, h)
    }

    /// Logits via separate base and adapter products.
    pub fn logits(&self, x: &FeatureVector) -> [f64; 2] {
        self.logits_split(x, x).0
    }

    /// `W0 + (alpha / rank) A B` as one dense matrix.
    pub fn effective_weights(&self) -> Array2<f64> {
        &self.base + &(self.a.dot(&self.b) * self.config.scaling())
    }

    pub fn predict_features(&self, x: &FeatureVector) -> Prediction {
        Prediction::from_logits(self.logits(x))
    }

    pub fn predict(&self, instances: &[Instance]) -> Vec<Prediction> {
        instances
            .iter()
            .map(|inst| self.predict_features(&self.featurize(&inst.code)))
            .collect()
    }

    /// Mean weighted cross-entropy plus `beta * ||B U||_F^2`, with exact gradients.
    pub fn loss_samples(
        &self,
        batch: &[LossSample<'_>],
        weights: [f64; 2],
        beta: f64,
        ortho_basis: Option<&Array2<f64>>,
    ) -> LossOutput {
        assert!(!batch.is_empty(), "loss over an empty batch");
        let s = self.config.scaling();
        let n = batch.len() as f64;
        let mut grad_a = Array2::zeros(self.a.dim());
        let mut grad_b = Array2::zeros(self.b.dim());
        let mut ce = 0.0;
        for sample in batch {
            let (z, h) = self.logits_split(sample.x, sample.x_adapter);
            let p = softmax(z);
            let y = usize::from(sample.label);
            let w = weights[y];
            let m = z[0].max(z[1]);
            let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
            ce += w * (lse - z[y]) / n;
            if w == 0.0 {
                continue;
            }
            let mut g = [p[0], p[1]];
            g[y] -= 1.0;
            let g = [g[0] * w / n, g[1] * w / n];
            for (c, gc) in g.iter().enumerate() {
                grad_a.row_mut(c).scaled_add(s * gc, &h);
            }
            // dL/dB[j, i] = s * (sum_c A[c, j] g_c) * x_adapter[i]
            let back: Array1<f64> = self.a.row(0).to_owned() * (s * g[0]) + &(self.a.row(1).to_owned() * (s * g[1]));
            for (i, v) in sample.x_adapter.iter() {
                grad_b.column_mut(i).scaled_add(v, &back);
            }
        }
        let mut ortho = 0.0;
        if let Some(u) = ortho_basis.filter(|u| u.ncols() > 0) {
            let bu = self.b.dot(u);
            ortho = bu.iter().map(|v| v * v).sum();
            if beta > 0.0 {
                grad_b.scaled_add(2.0 * beta, &bu.dot(&u.t()));
            }
        }
        LossOutput {
            total: ce + beta * ortho,
            cross_entropy: ce,
            ortho,
            grad_a,
            grad_b,
        }
    }

    /// Loss over labeled feature vectors without dropout. Under
    /// `ClassWeighted` the weights come from this batch's own class counts.
    pub fn loss(&self, batch: &[(FeatureVector, u8)], config: &TrainConfig, ortho: Option<&OrthoState>) -> LossOutput {
        let weights = match config.loss_mode {
            LossMode::Plain => [1.0, 1.0],
            LossMode::ClassWeighted => class_weights(batch.iter().map(|(_, l)| l)),
        };
        let samples: Vec<LossSample<'_>> = batch
            .iter()
            .map(|(x, label)| LossSample {
                x,
                x_adapter: x,
                label: *label,
            })
            .collect();
        let basis = ortho.map(OrthoState::matrix);
        self.loss_samples(&samples, weights, config.ortho_beta, basis.as_ref())
    }

    /// Fine-tunes the adapter on `window` followed by `replay`, shuffled per
    /// epoch. With `ClassWeighted`, weights are taken from `class_weights_override`
    /// or else from `window`'s labels. On a non-finite loss the model is left
    /// unchanged and an error returned.
    pub fn train(
        &mut self,
        window: &[Instance],
        replay: &[Instance],
        config: &TrainConfig,
        class_weights_override: Option<[f64; 2]>,
        ortho: Option<&OrthoState>,
    ) -> Result<TrainReport> {
        config.validate()?;
        if window.is_empty() {
            return Err(Error::Model("training window is empty".into()));
        }
        let started = Instant::now();
        let weights = match config.loss_mode {
            LossMode::Plain => [1.0, 1.0],
            LossMode::ClassWeighted => {
                class_weights_override.unwrap_or_else(|| class_weights(window.iter().map(|i| &i.label)))
            }
        };
        let data: Vec<(FeatureVector, u8)> = window
            .iter()
            .chain(replay)
            .map(|inst| (self.featurize(&inst.code), inst.label))
            .collect();
        let basis = ortho.filter(|o| !o.is_empty()).map(OrthoState::matrix);
        if let Some(u) = &basis {
            if u.nrows() != self.config.features.dim {
                return Err(Error::Model(
                    "orthogonal basis dimension differs from feature dimension".into(),
                ));
            }
        }

        let snapshot = (self.a.clone(), self.b.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(self.train_calls.wrapping_add(1));
        self.train_calls += 1;

        let mut opt_a = AdamW::new(self.a.dim());
        let mut opt_b = AdamW::new(self.b.dim());
        let keep = 1.0 - self.config.dropout;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut steps = 0;
        let mut final_loss = f64::NAN;
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(config.batch_size) {
                let dropped: Vec<FeatureVector> = chunk
                    .iter()
                    .map(|&i| {
                        let x = &data[i].0;
                        if self.config.dropout > 0.0 {
                            x.map_values(|_, v| if rng.random::<f64>() < keep { v / keep } else { 0.0 })
                        } else {
                            x.clone()
                        }
                    })
                    .collect();
                let samples: Vec<LossSample<'_>> = chunk
                    .iter()
                    .zip(&dropped)
                    .map(|(&i, xd)| LossSample {
                        x: &data[i].0,
                        x_adapter: xd,
                        label: data[i].1,
                    })
                    .collect();
                let out = self.loss_samples(&samples, weights, config.ortho_beta, basis.as_ref());
                if !out.total.is_finite() {
                    self.a = snapshot.0;
                    self.b = snapshot.1;
                    return Err(Error::Divergence {
                        epoch,
                        step: steps,
                        loss: out.total,
                    });
                }
                opt_a.step(&mut self.a, &out.grad_a, config);
                opt_b.step(&mut self.b, &out.grad_b, config);
                if !(self.a.iter().all(|v| v.is_finite()) && self.b.iter().all(|v| v.is_finite())) {
                    self.a = snapshot.0;
                    self.b = snapshot.1;
                    return Err(Error::Divergence {
                        epoch,
                        step: steps,
                        loss: f64::NAN,
                    });
                }
                epoch_loss += out.total;
                batches += 1;
                steps += 1;
            }
            final_loss = epoch_loss / batches.max(1) as f64;
        }
        Ok(TrainReport {
            wall_time_s: started.elapsed().as_secs_f64(),
            steps,
            examples: data.len(),
            final_loss,
        })
    }

    pub fn to_checkpoint(&self, train_config: Option<&TrainConfig>) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            adapter: self.config,
            train_config: train_config.cloned(),
            train_calls: self.train_calls,
            base_digest: self.base_digest(),
            a: self.a.iter().copied().collect(),
            b: self.b.iter().copied().collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Model(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let mut model = AdapterModel::new(ckpt.adapter);
        if model.base_digest() != ckpt.base_digest {
            return Err(Error::Model(
                "checkpoint base digest does not match regenerated base weights".into(),
            ));
        }
        let a = Array2::from_shape_vec(model.a.dim(), ckpt.a.clone()).map_err(|e| Error::Model(e.to_string()))?;
        let b = Array2::from_shape_vec(model.b.dim(), ckpt.b.clone()).map_err(|e| Error::Model(e.to_string()))?;
        model.set_adapter(a, b)?;
        model.train_calls = ckpt.train_calls;
        Ok(model)
    }

    pub fn save(&self, path: &Path, train_config: Option<&TrainConfig>) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint(train_config))?;
        fs::write(path, text).map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
        Self::from_checkpoint(&serde_json::from_str(&text)?)
    }
}

pub fn matrix_digest(m: &Array2<f64>) -> String {
    let mut hasher = Sha256::new();
    for v in m.iter() {
        hasher.update(v.to_le_bytes());
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub const CHECKPOINT_FORMAT: &str = "driftharness-adapter-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint file contents (JSON). `W0` is regenerated from `adapter.init_seed`
/// and verified against `base_digest`; `a` and `b` are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub adapter: AdapterConfig,
    pub train_config: Option<TrainConfig>,
    pub train_calls: u64,
    pub base_digest: String,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

struct AdamW {
    m: Array2<f64>,
    v: Array2<f64>,
    t: i32,
}

impl AdamW {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(shape: (usize, usize)) -> Self {
        Self {
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            t: 0,
        }
    }

    fn step(&mut self, param: &mut Array2<f64>, grad: &Array2<f64>, config: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t);
        let bc2 = 1.0 - Self::BETA2.powi(self.t);
        let lr = config.learning_rate;
        let wd = config.weight_decay;
        ndarray::Zip::from(param)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + Self::EPS);
                *p -= lr * (update + wd * *p);
            });
    }
}

/// Fraction of `predictions` agreeing with the instance labels.
pub fn accuracy(instances: &[Instance], predictions: &[Prediction]) -> f64 {
    let hits = instances
        .iter()
        .zip(predictions)
        .filter(|(i, p)| i.label == p.predicted_label)
        .count();
    hits as f64 / instances.len().max(1) as f64
}
