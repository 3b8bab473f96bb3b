//! Stateful estimators behind the two corrections: the sliding-window
//! estimate of the training class distribution and the momentum estimate of
//! the model's per-class prediction bias, plus pseudo-label refinement.
//!
//! Both estimators are single-writer state owned by the trainer; snapshots
//! may be shared freely.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::loss::{
    argmax_slice, log_sum_exp, softmax, ClassDistribution, DistributionKind, LogitVector,
    ProbVector,
};

/// How often the running total is recomputed from scratch to keep
/// incremental float drift bounded.
const REBUILD_PERIOD: u64 = 1024;

/// Per-class effective sample counts for one iteration: labeled hits plus
/// `lambda`-weighted mask-passing pseudo-label hits.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveBatchCount {
    counts: Vec<f64>,
}

impl EffectiveBatchCount {
    pub fn counts(&self) -> &[f64] {
        &self.counts
    }
}

/// counts[y] = #{labeled with target y} + lambda * #{masked pseudo-labels y}.
pub fn effective_batch_count(
    labeled_targets: &[usize],
    pseudo_targets: &[usize],
    masks: &[bool],
    lambda: f64,
    k: usize,
) -> Result<EffectiveBatchCount> {
    if pseudo_targets.len() != masks.len() {
        return Err(Error::InvalidInput(format!(
            "pseudo target/mask length mismatch: {} vs {}",
            pseudo_targets.len(),
            masks.len()
        )));
    }
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidInput(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let mut counts = vec![0.0; k];
    for &y in labeled_targets {
        *counts
            .get_mut(y)
            .ok_or_else(|| Error::InvalidInput(format!("labeled class {y} out of range 0..{k}")))? +=
            1.0;
    }
    for (&y, &mask) in pseudo_targets.iter().zip(masks) {
        if y >= k {
            return Err(Error::InvalidInput(format!("pseudo class {y} out of range 0..{k}")));
        }
        if mask {
            counts[y] += lambda;
        }
    }
    Ok(EffectiveBatchCount { counts })
}

/// FIFO window of per-iteration effective class counts over the most recent
/// `capacity` iterations, with an incrementally maintained column sum.
#[derive(Debug, Clone)]
pub struct SlidingClassCounter {
    window: VecDeque<Vec<f64>>,
    capacity: usize,
    running_total: Vec<f64>,
    pushes: u64,
}

impl SlidingClassCounter {
    pub fn new(k: usize, capacity: usize) -> Self {
        assert!(k >= 2, "need at least 2 classes");
        assert!(capacity >= 1, "window capacity must be at least 1");
        Self {
            window: VecDeque::with_capacity(capacity + 1),
            capacity,
            running_total: vec![0.0; k],
            pushes: 0,
        }
    }

    /// Rebuilds a counter from persisted window rows (oldest first).
    pub fn from_window(k: usize, capacity: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() > capacity {
            return Err(Error::InvalidInput(format!(
                "persisted window has {} rows, capacity is {capacity}",
                rows.len()
            )));
        }
        let mut counter = Self::new(k, capacity);
        for row in rows {
            if row.len() != k {
                return Err(Error::Shape {
                    expected: format!("{k} classes"),
                    got: format!("{} entries", row.len()),
                });
            }
            counter.push(&EffectiveBatchCount { counts: row });
        }
        counter.rebuild_total();
        Ok(counter)
    }

    pub fn num_classes(&self) -> usize {
        self.running_total.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.window.len() == self.capacity
    }

    pub fn totals(&self) -> &[f64] {
        &self.running_total
    }

    /// Window rows, oldest first. Used for checkpointing.
    pub fn window_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.window.iter().map(|row| row.as_slice())
    }

    /// Appends one iteration's counts, evicting the oldest entry once the
    /// window is full.
    pub fn push(&mut self, c: &EffectiveBatchCount) {
        assert_eq!(c.counts.len(), self.num_classes(), "class count mismatch");
        for (t, x) in self.running_total.iter_mut().zip(&c.counts) {
            *t += x;
        }
        self.window.push_back(c.counts.clone());
        if self.window.len() > self.capacity {
            let evicted = self.window.pop_front().expect("window non-empty");
            for (t, x) in self.running_total.iter_mut().zip(&evicted) {
                *t -= x;
            }
        }
        self.pushes += 1;
        if self.pushes % REBUILD_PERIOD == 0 {
            self.rebuild_total();
        }
    }

    fn rebuild_total(&mut self) {
        self.running_total.iter_mut().for_each(|t| *t = 0.0);
        for row in &self.window {
            for (t, x) in self.running_total.iter_mut().zip(row) {
                *t += x;
            }
        }
    }

    /// Additively smoothed window distribution. Returns the uniform
    /// distribution while the window is empty, and otherwise
    /// `(total[y] + eps) / (sum + K * eps)` with kind `EstimatedTrain`.
    pub fn estimated_ptr(&self, epsilon: f64) -> ClassDistribution {
        let k = self.num_classes();
        if self.window.is_empty() {
            return ClassDistribution::uniform(k);
        }
        let sum: f64 = self.running_total.iter().sum();
        let denom = sum + k as f64 * epsilon;
        if denom <= 0.0 {
            return ClassDistribution::uniform(k);
        }
        let values: Vec<f64> = self.running_total.iter().map(|t| (t + epsilon) / denom).collect();
        // Guard against drift: renormalize exactly before constructing.
        let norm: f64 = values.iter().sum();
        let probs = ProbVector::new(values.into_iter().map(|v| v / norm).collect())
            .expect("smoothed window distribution is valid");
        ClassDistribution::new(probs, DistributionKind::EstimatedTrain)
    }
}

/// Momentum estimate of the per-class log-odds correction `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasEstimate {
    d: Vec<f64>,
    m: f64,
    initialized: bool,
}

impl BiasEstimate {
    /// A fresh estimate: `d = 0`, not yet initialized.
    pub fn new(k: usize, m: f64) -> Self {
        assert!((0.0..1.0).contains(&m), "momentum coefficient must be in [0, 1)");
        Self {
            d: vec![0.0; k],
            m,
            initialized: false,
        }
    }

    /// Rebuilds an estimate from persisted state.
    pub fn from_state(d: Vec<f64>, m: f64, initialized: bool) -> Result<Self> {
        if !d.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidInput("persisted bias estimate is non-finite".into()));
        }
        if !(0.0..1.0).contains(&m) {
            return Err(Error::InvalidInput(format!("momentum coefficient {m} out of [0, 1)")));
        }
        Ok(Self { d, m, initialized })
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    pub fn momentum(&self) -> f64 {
        self.m
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Momentum update `d <- m * d + (1 - m) * d'`. The first observation is
    /// adopted wholesale instead of being blended with the zero vector.
    pub fn update(&mut self, d_prime: &[f64]) {
        debug_assert_eq!(d_prime.len(), self.d.len());
        debug_assert!(d_prime.iter().all(|x| x.is_finite()));
        if !self.initialized {
            self.d.copy_from_slice(d_prime);
            self.initialized = true;
            return;
        }
        for (d, dp) in self.d.iter_mut().zip(d_prime) {
            *d = self.m * *d + (1.0 - self.m) * dp;
        }
    }
}

/// One iteration's bias sample:
/// `d'[y] = -ln( mean_i exp(f_y(x_i)) / sum_k exp(f_k(x_i) + ln ptr[k]) )`,
/// computed with log-sum-exp stabilization throughout.
///
/// Returns `Ok(None)` for an empty batch, signalling the caller to skip the
/// momentum step.
pub fn batch_bias_sample(
    logits_batch: &[&LogitVector],
    ptr: &ClassDistribution,
) -> Result<Option<Vec<f64>>> {
    if logits_batch.is_empty() {
        return Ok(None);
    }
    let k = ptr.num_classes();
    let log_ptr = ptr.log_probs()?;
    let n = logits_batch.len();

    // log_terms[y][i] = f_y(x_i) - logsumexp_k(f_k(x_i) + ln ptr[k])
    let mut log_terms = vec![vec![0.0; n]; k];
    let mut shifted = vec![0.0; k];
    for (i, lv) in logits_batch.iter().enumerate() {
        if lv.num_classes() != k {
            return Err(Error::Shape {
                expected: format!("{k} classes"),
                got: format!("{} logits", lv.num_classes()),
            });
        }
        for (s, (f, lp)) in shifted.iter_mut().zip(lv.values().iter().zip(&log_ptr)) {
            *s = f + lp;
        }
        let lse = log_sum_exp(&shifted);
        for (y, f) in lv.values().iter().enumerate() {
            log_terms[y][i] = f - lse;
        }
    }

    let ln_n = (n as f64).ln();
    let d_prime = log_terms
        .iter()
        .map(|per_sample| -(log_sum_exp(per_sample) - ln_n))
        .collect();
    Ok(Some(d_prime))
}

/// Applies the bias correction to raw logits and returns the refined
/// pseudo-label (argmax, lowest class index on ties) with its probabilities.
pub fn refine_pseudo_label(logits: &LogitVector, b: &BiasEstimate) -> (usize, ProbVector) {
    debug_assert_eq!(logits.num_classes(), b.d.len());
    let corrected: Vec<f64> = logits.values().iter().zip(&b.d).map(|(f, d)| f + d).collect();
    let refined = softmax(&LogitVector::new(corrected).expect("finite corrected logits"));
    (argmax_slice(refined.values()), refined)
}
