//! Bias-correction primitives and a training harness for class-imbalanced
//! semi-supervised learning on synthetic long-tailed benchmarks.
//!
//! The library trains a small classifier with pseudo-labeling and
//! consistency regularization, and counteracts class imbalance twice:
//! once by adjusting the training objective with a sliding-window estimate
//! of the class distribution actually participating in training, and once
//! by refining pseudo-labels with a momentum estimate of the model's
//! current per-class prediction bias.
//!
//! Modules:
//! - [`loss`]: pure softmax/cross-entropy/masking math.
//! - [`estimators`]: the sliding class counter and the bias estimate.
//! - [`model`]: linear/MLP classifier with analytic gradients, SGD and EMA.
//! - [`data`]: synthetic long-tailed Gaussian benchmarks and augmentations.
//! - [`trainer`]: the training loop, ablation modes, and run results.
//! - [`metrics`]: confusion matrices, recalls, and L2 diagnostics.
//! - [`checkpoint`]: binary + JSON manifest persistence of training state.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod estimators;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod trainer;

pub use data::{
    generate, longtail_counts, AugmentationPolicy, ImbalanceSpec, Sample, SyntheticSslDataset,
};
pub use error::{Error, Result};
pub use estimators::{BiasEstimate, EffectiveBatchCount, SlidingClassCounter};
pub use loss::{ClassDistribution, DistributionKind, LogitVector, ProbVector};
pub use metrics::ConfusionMatrix;
pub use model::{Architecture, EmaParams, ModelParams};
pub use trainer::{
    ablate, run, BiasSampleSource, EvalSummary, IterationTrace, RunResult, TrainConfig, TrainMode,
    Trainer, TrainerSnapshot,
};
