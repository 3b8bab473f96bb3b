//! The training loop: a FixMatch-style baseline, the fully corrected mode,
//! and the two single-correction ablations, wired over the synthetic
//! benchmarks.
//!
//! The loop is strictly sequential across iterations; evaluation over the
//! test set and independent runs inside an ablation sweep parallelize via
//! rayon with order-fixed reductions, so results do not depend on the
//! worker count.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    derive_rng, strong_augment, weak_augment, AugmentationPolicy, Sample, SyntheticSslDataset,
};
use crate::error::{Error, Result};
use crate::estimators::{
    batch_bias_sample, effective_batch_count, refine_pseudo_label, BiasEstimate,
    SlidingClassCounter,
};
use crate::loss::{confidence_mask, softmax, ClassDistribution, LogitVector};
use crate::metrics::{
    balanced_accuracy, confusion, l2_distribution_distance, per_class_recall,
    pseudo_label_distribution, top1_accuracy, ConfusionMatrix,
};
use crate::model::{backward_step, predict_balanced, Architecture, EmaParams, ModelParams, StepBatch};

/// Which corrections are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    /// FixMatch-lite: raw pseudo-labels, no logit adjustment.
    #[serde(rename = "baseline")]
    Baseline,
    /// Logit adjustment by the estimated training class distribution only.
    #[serde(rename = "model-bias")]
    ModelBiasOnly,
    /// Pseudo-label refinement only; the prior stays uniform.
    #[serde(rename = "refine")]
    RefineOnly,
    /// Both corrections.
    #[serde(rename = "tcbc")]
    Tcbc,
}

impl TrainMode {
    /// Fixed reporting order.
    pub const ALL: [TrainMode; 4] =
        [TrainMode::Baseline, TrainMode::ModelBiasOnly, TrainMode::RefineOnly, TrainMode::Tcbc];

    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::ModelBiasOnly => "model-bias",
            TrainMode::RefineOnly => "refine",
            TrainMode::Tcbc => "tcbc",
        }
    }

    /// Whether pseudo-labels are refined by the bias estimate.
    pub fn refines(&self) -> bool {
        matches!(self, TrainMode::RefineOnly | TrainMode::Tcbc)
    }

    /// Whether logits are adjusted by the estimated class prior.
    pub fn adjusts(&self) -> bool {
        matches!(self, TrainMode::ModelBiasOnly | TrainMode::Tcbc)
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(TrainMode::Baseline),
            "model-bias" => Ok(TrainMode::ModelBiasOnly),
            "refine" => Ok(TrainMode::RefineOnly),
            "tcbc" => Ok(TrainMode::Tcbc),
            other => Err(Error::InvalidInput(format!(
                "unknown mode {other:?} (expected baseline, model-bias, refine or tcbc)"
            ))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which samples feed the per-iteration bias sample d'.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BiasSampleSource {
    #[serde(rename = "unlabeled")]
    UnlabeledOnly,
    #[serde(rename = "labeled+unlabeled")]
    LabeledAndUnlabeled,
}

/// Full training configuration. `window` defaults to 50 * K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub tau_c: f64,
    pub lambda: f64,
    /// Momentum coefficient of the bias estimate.
    pub momentum: f64,
    /// Sliding-window length in iterations.
    pub window: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub iterations: u64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub ema_decay: f64,
    /// Additive smoothing per class in the window distribution.
    pub epsilon_smoothing: f64,
    pub d_source: BiasSampleSource,
    /// Mask on the refined probabilities instead of the raw ones.
    pub mask_on_refined: bool,
    pub seed: u64,
    /// Hidden width of the classifier; 0 selects the linear model.
    pub hidden_dim: usize,
    /// Evaluate the EMA model every this many iterations (plus at the end).
    pub eval_every: u64,
    pub augmentation: AugmentationPolicy,
    /// Test hook: force the adjustment prior to stay exactly uniform.
    pub pin_uniform_ptr: bool,
    /// Test hook: force the bias estimate to stay exactly zero.
    pub pin_zero_bias: bool,
}

impl TrainConfig {
    /// Defaults for a `k`-class problem.
    pub fn new(k: usize) -> Self {
        Self {
            mode: TrainMode::Tcbc,
            tau_c: 0.95,
            lambda: 1.0,
            momentum: 0.999,
            window: 50 * k,
            lr: 0.1,
            weight_decay: 0.0,
            iterations: 1000,
            labeled_batch: 64,
            unlabeled_batch: 128,
            ema_decay: 0.999,
            epsilon_smoothing: 1e-3,
            d_source: BiasSampleSource::LabeledAndUnlabeled,
            mask_on_refined: true,
            seed: 0,
            hidden_dim: 0,
            eval_every: 250,
            augmentation: AugmentationPolicy::default(),
            pin_uniform_ptr: false,
            pin_zero_bias: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_c > 0.0 && self.tau_c <= 1.0) {
            return Err(Error::InvalidInput(format!("tau_c must be in (0, 1], got {}", self.tau_c)));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::InvalidInput(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidInput(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.window == 0 {
            return Err(Error::InvalidInput("window must be at least 1".into()));
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::InvalidInput(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.labeled_batch == 0 || self.unlabeled_batch == 0 {
            return Err(Error::InvalidInput("batch sizes must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidInput(format!(
                "ema_decay must be in [0, 1), got {}",
                self.ema_decay
            )));
        }
        if self.epsilon_smoothing <= 0.0 {
            return Err(Error::InvalidInput("epsilon_smoothing must be > 0".into()));
        }
        self.augmentation.validate()
    }
}

/// Canonical hash of a configuration, stored in checkpoints and manifests.
pub fn config_sha256(config: &TrainConfig) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-iteration diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: u64,
    pub loss_s: f64,
    pub loss_u: f64,
    /// Fraction of the unlabeled batch passing the confidence mask.
    pub mask_rate: f64,
    /// L2 distance between the window estimate and the true class
    /// distribution of the training pool.
    pub l2_ptr_to_true: f64,
    /// L2 distance between the normalized masked pseudo-label histogram
    /// and the uniform distribution.
    pub l2_pseudo_to_uniform: f64,
    /// Masked pseudo-label counts; sums to the number of masked samples.
    pub pseudo_label_histogram: Vec<u64>,
}

/// Final evaluation of the EMA model over the balanced test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub confusion: ConfusionMatrix,
    pub per_class_recall: Vec<f64>,
    pub balanced_accuracy: f64,
    pub top1_accuracy: f64,
}

/// Outcome of a full run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub trace: Vec<IterationTrace>,
    pub final_eval: EvalSummary,
    /// `(iteration, balanced accuracy)` at each periodic evaluation,
    /// including the final one.
    pub eval_history: Vec<(u64, f64)>,
    /// Median balanced accuracy over the most recent (up to 20) evaluations.
    pub median_recent_balanced_accuracy: f64,
    pub config: TrainConfig,
    pub wall_clock_seconds: f64,
}

/// Counters over estimator consumption, used to assert mode isolation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReadStats {
    /// Times the sliding counter was consulted for logit adjustment.
    pub ptr_adjust_reads: u64,
    /// Times the bias estimate was consulted for pseudo-label refinement.
    pub bias_refine_reads: u64,
}

/// Serializable full training state; restoring reproduces the
/// uninterrupted run exactly.
#[derive(Debug, Clone)]
pub struct TrainerSnapshot {
    pub iteration: u64,
    pub params: ModelParams,
    pub ema_params: ModelParams,
    pub counter_window: Vec<Vec<f64>>,
    pub bias_d: Vec<f64>,
    pub bias_initialized: bool,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub rng_stream: u64,
    pub config_sha256: String,
}

const TAG_MASTER: u64 = 0x10;
const TAG_INIT: u64 = 0x11;
const TAG_AUG: u64 = 0x12;

const VIEW_WEAK_LABELED: u64 = 0;
const VIEW_WEAK_UNLABELED: u64 = 1;
const VIEW_STRONG_UNLABELED: u64 = 2;

/// Sequential SSL trainer owning the model and estimator state.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    config: TrainConfig,
    dataset: &'a SyntheticSslDataset,
    params: ModelParams,
    ema: EmaParams,
    counter: SlidingClassCounter,
    bias: BiasEstimate,
    rng: ChaCha8Rng,
    iteration: u64,
    read_stats: ReadStats,
    true_dist: ClassDistribution,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, dataset: &'a SyntheticSslDataset) -> Result<Self> {
        config.validate()?;
        if dataset.labeled.is_empty() || dataset.unlabeled.is_empty() {
            return Err(Error::InvalidInput("dataset needs labeled and unlabeled samples".into()));
        }
        let k = dataset.num_classes();
        let arch = if config.hidden_dim == 0 {
            Architecture::linear(dataset.dim, k)
        } else {
            Architecture::mlp(dataset.dim, config.hidden_dim, k)
        };
        let mut init_rng = derive_rng(config.seed, &[TAG_INIT]);
        let params = ModelParams::init(arch, &mut init_rng);
        let ema = EmaParams::new(&params, config.ema_decay);
        let counter = SlidingClassCounter::new(k, config.window);
        let bias = BiasEstimate::new(k, config.momentum);
        let rng = derive_rng(config.seed, &[TAG_MASTER]);
        let true_dist = dataset.true_training_distribution();
        Ok(Self {
            config,
            dataset,
            params,
            ema,
            counter,
            bias,
            rng,
            iteration: 0,
            read_stats: ReadStats::default(),
            true_dist,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn ema(&self) -> &EmaParams {
        &self.ema
    }

    pub fn counter(&self) -> &SlidingClassCounter {
        &self.counter
    }

    pub fn bias(&self) -> &BiasEstimate {
        &self.bias
    }

    pub fn read_stats(&self) -> ReadStats {
        self.read_stats
    }

    /// Assembles augmented views for one batch slot list. Each slot gets its
    /// own derived RNG stream, so assembly order is irrelevant.
    fn assemble_views(
        &self,
        view: u64,
        indices: &[usize],
        pool: &[Sample],
        strong: bool,
    ) -> Array2<f64> {
        let dim = self.dataset.dim;
        let policy = &self.config.augmentation;
        let seed = self.config.seed;
        let iter = self.iteration;
        let rows: Vec<Vec<f64>> = indices
            .iter()
            .enumerate()
            .map(|(slot, &idx)| {
                let mut rng = derive_rng(seed, &[TAG_AUG, iter, view, slot as u64]);
                if strong {
                    strong_augment(&pool[idx].features, policy, &mut rng)
                } else {
                    weak_augment(&pool[idx].features, policy, &mut rng)
                }
            })
            .collect();
        Array2::from_shape_fn((rows.len(), dim), |(i, j)| rows[i][j])
    }

    fn rows_to_logits(&self, logits: &Array2<f64>) -> Result<Vec<LogitVector>> {
        logits
            .outer_iter()
            .map(|row| {
                LogitVector::new(row.to_vec()).map_err(|_| Error::NonFinite {
                    iteration: self.iteration,
                    diagnostics: self.diagnostics("non-finite logits"),
                })
            })
            .collect()
    }

    fn diagnostics(&self, what: &str) -> String {
        format!(
            "{what}; counter totals {:?}; bias d {:?}",
            self.counter.totals(),
            self.bias.d()
        )
    }

    /// One training iteration. In order: forward the weak unlabeled views,
    /// decide pseudo-labels (refined in the refining modes), mask, take the
    /// SGD step on the prior-adjusted objective, push the effective counts,
    /// update the bias estimate from the pre-step logits, update the EMA
    /// copy, and emit the trace row.
    pub fn step(&mut self) -> Result<IterationTrace> {
        let k = self.dataset.num_classes();
        let cfg = self.config.clone();

        // Batch composition: uniform with replacement from each pool.
        let n_l = self.dataset.labeled.len();
        let n_u = self.dataset.unlabeled.len();
        let labeled_idx: Vec<usize> =
            (0..cfg.labeled_batch).map(|_| self.rng.random_range(0..n_l)).collect();
        let unlabeled_idx: Vec<usize> =
            (0..cfg.unlabeled_batch).map(|_| self.rng.random_range(0..n_u)).collect();
        let labeled_targets: Vec<usize> =
            labeled_idx.iter().map(|&i| self.dataset.labeled[i].class).collect();

        let weak_labeled =
            self.assemble_views(VIEW_WEAK_LABELED, &labeled_idx, &self.dataset.labeled, false);
        let weak_unlabeled =
            self.assemble_views(VIEW_WEAK_UNLABELED, &unlabeled_idx, &self.dataset.unlabeled, false);
        let strong_unlabeled = self.assemble_views(
            VIEW_STRONG_UNLABELED,
            &unlabeled_idx,
            &self.dataset.unlabeled,
            true,
        );

        // Pre-step logits of the weak views.
        let weak_u_logits = self.rows_to_logits(&self.params.forward(weak_unlabeled.view())?)?;
        let update_bias = cfg.mode.refines() && !cfg.pin_zero_bias;
        let need_labeled_logits =
            update_bias && cfg.d_source == BiasSampleSource::LabeledAndUnlabeled;
        let weak_l_logits = if need_labeled_logits {
            self.rows_to_logits(&self.params.forward(weak_labeled.view())?)?
        } else {
            Vec::new()
        };

        // Pseudo-labels and confidence masks.
        let mut pseudo_targets = Vec::with_capacity(weak_u_logits.len());
        let mut masks = Vec::with_capacity(weak_u_logits.len());
        for lv in &weak_u_logits {
            let (label, mask_probs) = if cfg.mode.refines() {
                self.read_stats.bias_refine_reads += 1;
                let (label, refined) = refine_pseudo_label(lv, &self.bias);
                let mask_probs = if cfg.mask_on_refined { refined } else { softmax(lv) };
                (label, mask_probs)
            } else {
                let raw = softmax(lv);
                (raw.argmax(), raw)
            };
            masks.push(confidence_mask(&mask_probs, cfg.tau_c));
            pseudo_targets.push(label);
        }

        // Prior used for both the logit adjustment and the bias sample.
        // Non-adjusting modes keep it pinned at exactly uniform.
        let ptr = if cfg.mode.adjusts() && !cfg.pin_uniform_ptr {
            self.read_stats.ptr_adjust_reads += 1;
            self.counter.estimated_ptr(cfg.epsilon_smoothing)
        } else {
            ClassDistribution::uniform(k)
        };

        // SGD step on L_s + lambda * L_u.
        let batch = StepBatch {
            labeled_inputs: weak_labeled.view(),
            labeled_targets: &labeled_targets,
            unlabeled_inputs: strong_unlabeled.view(),
            pseudo_targets: &pseudo_targets,
            masks: &masks,
        };
        let losses =
            backward_step(&mut self.params, &batch, &ptr, cfg.lambda, cfg.lr, cfg.weight_decay)
                .map_err(|e| match e {
                    Error::NonFinite { diagnostics, .. } => Error::NonFinite {
                        iteration: self.iteration,
                        diagnostics: self.diagnostics(&diagnostics),
                    },
                    other => other,
                })?;

        // Estimator updates come after the step, from this iteration's
        // pre-step logits.
        let counts =
            effective_batch_count(&labeled_targets, &pseudo_targets, &masks, cfg.lambda, k)?;
        self.counter.push(&counts);

        if update_bias {
            let mut source: Vec<&LogitVector> =
                Vec::with_capacity(weak_l_logits.len() + weak_u_logits.len());
            source.extend(weak_l_logits.iter());
            source.extend(weak_u_logits.iter());
            if let Some(d_prime) = batch_bias_sample(&source, &ptr)? {
                self.bias.update(&d_prime);
            }
        }

        self.ema.update(&self.params);

        // Trace row.
        let masked = masks.iter().filter(|m| **m).count();
        let mut histogram = vec![0u64; k];
        for (label, mask) in pseudo_targets.iter().zip(&masks) {
            if *mask {
                histogram[*label] += 1;
            }
        }
        let hist_f: Vec<f64> = histogram.iter().map(|h| *h as f64).collect();
        let l2_pseudo_to_uniform = l2_distribution_distance(
            &pseudo_label_distribution(&hist_f),
            &ClassDistribution::uniform(k),
        );
        let l2_ptr_to_true = l2_distribution_distance(
            &self.counter.estimated_ptr(cfg.epsilon_smoothing),
            &self.true_dist,
        );

        let trace = IterationTrace {
            iteration: self.iteration,
            loss_s: losses.loss_s,
            loss_u: losses.loss_u,
            mask_rate: masked as f64 / cfg.unlabeled_batch as f64,
            l2_ptr_to_true,
            l2_pseudo_to_uniform,
            pseudo_label_histogram: histogram,
        };
        self.iteration += 1;
        Ok(trace)
    }

    /// Evaluates the EMA model over the balanced test set.
    pub fn evaluate(&self) -> Result<EvalSummary> {
        let params = self.ema.params();
        let k = self.dataset.num_classes();
        let predictions: Vec<usize> = self
            .dataset
            .test
            .par_iter()
            .map(|s| predict_balanced(params, &s.features).map(|(label, _)| label))
            .collect::<Result<Vec<_>>>()?;
        let truths: Vec<usize> = self.dataset.test.iter().map(|s| s.class).collect();
        let cm = confusion(&truths, &predictions, k)?;
        Ok(EvalSummary {
            per_class_recall: per_class_recall(&cm),
            balanced_accuracy: balanced_accuracy(&cm),
            top1_accuracy: top1_accuracy(&cm),
            confusion: cm,
        })
    }

    /// Runs the remaining iterations, collecting traces and periodic
    /// evaluations.
    pub fn run_to_end(&mut self) -> Result<RunResult> {
        let start = Instant::now();
        let mut trace = Vec::new();
        let mut eval_history: Vec<(u64, f64)> = Vec::new();
        while self.iteration < self.config.iterations {
            let row = self.step()?;
            trace.push(row);
            let done = self.iteration;
            if self.config.eval_every > 0
                && done % self.config.eval_every == 0
                && done < self.config.iterations
            {
                eval_history.push((done, self.evaluate()?.balanced_accuracy));
            }
        }
        let final_eval = self.evaluate()?;
        eval_history.push((self.iteration, final_eval.balanced_accuracy));

        let recent: Vec<f64> = eval_history
            .iter()
            .rev()
            .take(20)
            .map(|(_, acc)| *acc)
            .collect();
        let median_recent_balanced_accuracy = median(&recent);

        Ok(RunResult {
            trace,
            final_eval,
            eval_history,
            median_recent_balanced_accuracy,
            config: self.config.clone(),
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Captures the complete training state.
    pub fn snapshot(&self) -> TrainerSnapshot {
        TrainerSnapshot {
            iteration: self.iteration,
            params: self.params.clone(),
            ema_params: self.ema.params().clone(),
            counter_window: self.counter.window_rows().map(|r| r.to_vec()).collect(),
            bias_d: self.bias.d().to_vec(),
            bias_initialized: self.bias.is_initialized(),
            rng_seed: self.rng.get_seed(),
            rng_word_pos: self.rng.get_word_pos(),
            rng_stream: self.rng.get_stream(),
            config_sha256: config_sha256(&self.config),
        }
    }

    /// Rebuilds a trainer from a snapshot. The configuration must hash to
    /// the value stored in the snapshot.
    pub fn restore(
        config: TrainConfig,
        dataset: &'a SyntheticSslDataset,
        snapshot: &TrainerSnapshot,
    ) -> Result<Self> {
        if config_sha256(&config) != snapshot.config_sha256 {
            return Err(Error::Format(
                "checkpoint was produced by a different configuration".into(),
            ));
        }
        let mut trainer = Self::new(config.clone(), dataset)?;
        trainer.params = snapshot.params.clone();
        trainer.ema = EmaParams::from_params(snapshot.ema_params.clone(), config.ema_decay);
        trainer.counter = SlidingClassCounter::from_window(
            dataset.num_classes(),
            config.window,
            snapshot.counter_window.clone(),
        )?;
        trainer.bias = BiasEstimate::from_state(
            snapshot.bias_d.clone(),
            config.momentum,
            snapshot.bias_initialized,
        )?;
        let mut rng = ChaCha8Rng::from_seed(snapshot.rng_seed);
        rng.set_stream(snapshot.rng_stream);
        rng.set_word_pos(snapshot.rng_word_pos);
        trainer.rng = rng;
        trainer.iteration = snapshot.iteration;
        Ok(trainer)
    }
}

fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite accuracies"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// A full seeded run: train to `config.iterations`, evaluate via the EMA
/// model.
pub fn run(config: &TrainConfig, dataset: &SyntheticSslDataset) -> Result<RunResult> {
    Trainer::new(config.clone(), dataset)?.run_to_end()
}

/// Runs all four modes on identical data and seed, in the fixed reporting
/// order. Runs execute in parallel; results are deterministic either way.
pub fn ablate(
    base: &TrainConfig,
    dataset: &SyntheticSslDataset,
) -> Result<Vec<(TrainMode, RunResult)>> {
    TrainMode::ALL
        .par_iter()
        .map(|mode| {
            let mut config = base.clone();
            config.mode = *mode;
            run(&config, dataset).map(|result| (*mode, result))
        })
        .collect()
}
