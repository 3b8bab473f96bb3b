//! Reproducible long-tailed synthetic SSL benchmarks: Gaussian-mixture
//! classes with independently controlled labeled/unlabeled imbalance and
//! weak/strong corruption analogs standing in for image augmentation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{ClassDistribution, DistributionKind, ProbVector};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Generating parameters of a long-tailed SSL benchmark.
///
/// `gamma` values below one encode reversed distributions: the head class of
/// the labeled set becomes the rarest class of that split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    pub k: usize,
    /// Head-class labeled count.
    pub n1: u64,
    /// Head-class unlabeled count (largest class count for reversed splits).
    pub m1: u64,
    pub gamma_l: f64,
    pub gamma_u: f64,
    pub seed: u64,
}

impl ImbalanceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 classes, got {}", self.k)));
        }
        if self.n1 < 1 || self.m1 < 1 {
            return Err(Error::InvalidInput("head-class counts must be at least 1".into()));
        }
        for (name, g) in [("gamma_l", self.gamma_l), ("gamma_u", self.gamma_u)] {
            if !g.is_finite() || g <= 0.0 {
                return Err(Error::InvalidInput(format!("{name} must be finite and > 0, got {g}")));
            }
        }
        Ok(())
    }
}

/// Per-class counts from exponential decay plus a flag recording whether
/// any count had to be clamped up to one.
#[derive(Debug, Clone, PartialEq)]
pub struct LongtailCounts {
    pub counts: Vec<u64>,
    pub clamped: bool,
}

/// Exponentially decaying class counts
/// `counts[k] = round(n1 * gamma^(-k / (K-1)))` (zero-based `k`), rounded
/// half-up and clamped to at least one sample per class.
///
/// The head class always holds exactly `n1` and the tail class
/// `round(n1 / gamma)`; the sequence is non-increasing for `gamma > 1` and
/// non-decreasing for `gamma < 1`.
pub fn longtail_counts(n1: u64, gamma: f64, k: usize) -> Result<LongtailCounts> {
    if n1 < 1 {
        return Err(Error::InvalidInput(format!("n1 must be >= 1, got {n1}")));
    }
    if k < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 classes, got {k}")));
    }
    if !gamma.is_finite() || gamma <= 0.0 {
        return Err(Error::InvalidInput(format!("gamma must be finite and > 0, got {gamma}")));
    }
    let mut clamped = false;
    let counts = (0..k)
        .map(|i| {
            let eps = i as f64 / (k - 1) as f64;
            let raw = n1 as f64 * gamma.powf(-eps);
            let rounded = (raw + 0.5).floor();
            if rounded < 1.0 {
                clamped = true;
                1
            } else {
                rounded as u64
            }
        })
        .collect();
    Ok(LongtailCounts { counts, clamped })
}

/// Class counts for one split under the reversed-distribution convention:
/// for `gamma >= 1` this is plain exponential decay from `head`; for
/// `gamma < 1` the decay curve for `1/gamma` is reversed, so class 0 gets
/// roughly `head * gamma` samples and the last class gets `head`.
pub fn split_class_counts(head: u64, gamma: f64, k: usize) -> Result<LongtailCounts> {
    if gamma >= 1.0 {
        longtail_counts(head, gamma, k)
    } else {
        let mut lt = longtail_counts(head, 1.0 / gamma, k)?;
        lt.counts.reverse();
        Ok(lt)
    }
}

/// Corruption strengths for the two views of each sample. The weak view
/// adds Gaussian noise; the strong view additionally jitters the scale and
/// zeroes random coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub strong_dropout_p: f64,
    pub strong_scale_range: (f64, f64),
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            weak_sigma: 0.1,
            strong_sigma: 0.5,
            strong_dropout_p: 0.1,
            strong_scale_range: (0.8, 1.2),
        }
    }
}

impl AugmentationPolicy {
    /// A policy with every knob zeroed: both views are the identity.
    pub fn disabled() -> Self {
        Self {
            weak_sigma: 0.0,
            strong_sigma: 0.0,
            strong_dropout_p: 0.0,
            strong_scale_range: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weak_sigma < 0.0 || self.strong_sigma < 0.0 {
            return Err(Error::InvalidInput("noise sigmas must be non-negative".into()));
        }
        if self.weak_sigma > self.strong_sigma {
            return Err(Error::InvalidInput(format!(
                "weak_sigma {} must not exceed strong_sigma {}",
                self.weak_sigma, self.strong_sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.strong_dropout_p) {
            return Err(Error::InvalidInput("dropout probability must be in [0, 1]".into()));
        }
        let (lo, hi) = self.strong_scale_range;
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::InvalidInput("scale range must be a finite low..high interval".into()));
        }
        Ok(())
    }
}

/// Weak view: additive isotropic Gaussian noise.
pub fn weak_augment(x: &[f64], policy: &AugmentationPolicy, rng: &mut impl Rng) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let z: f64 = rng.sample(StandardNormal);
            v + policy.weak_sigma * z
        })
        .collect()
}

/// Strong view: multiplicative scale jitter, additive noise at the strong
/// sigma, then per-coordinate dropout.
pub fn strong_augment(x: &[f64], policy: &AugmentationPolicy, rng: &mut impl Rng) -> Vec<f64> {
    let (lo, hi) = policy.strong_scale_range;
    let scale = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    x.iter()
        .map(|v| {
            let z: f64 = rng.sample(StandardNormal);
            let noisy = scale * v + policy.strong_sigma * z;
            if policy.strong_dropout_p > 0.0 && rng.random_range(0.0..1.0) < policy.strong_dropout_p
            {
                0.0
            } else {
                noisy
            }
        })
        .collect()
}

/// One sample: a feature vector plus its generating class. For unlabeled
/// samples the class is hidden ground truth consulted only by diagnostics,
/// never by the trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub class: usize,
}

/// A complete synthetic benchmark: labeled set, unlabeled set with hidden
/// labels, an exactly balanced test set, and the generator parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSslDataset {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub test: Vec<Sample>,
    pub class_means: Vec<Vec<f64>>,
    pub class_sigma: f64,
    pub spec: ImbalanceSpec,
    pub dim: usize,
    pub separation: f64,
    pub test_per_class: usize,
}

impl SyntheticSslDataset {
    pub fn num_classes(&self) -> usize {
        self.spec.k
    }

    pub fn labeled_class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.spec.k];
        for s in &self.labeled {
            counts[s.class] += 1;
        }
        counts
    }

    /// Ground-truth unlabeled class counts. Diagnostics only.
    pub fn unlabeled_hidden_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.spec.k];
        for s in &self.unlabeled {
            counts[s.class] += 1;
        }
        counts
    }

    /// The true class distribution of the combined training pool
    /// (labeled plus unlabeled), computed from ground-truth labels.
    pub fn true_training_distribution(&self) -> ClassDistribution {
        let labeled = self.labeled_class_counts();
        let unlabeled = self.unlabeled_hidden_counts();
        let total: u64 = labeled.iter().sum::<u64>() + unlabeled.iter().sum::<u64>();
        let probs: Vec<f64> = labeled
            .iter()
            .zip(&unlabeled)
            .map(|(l, u)| (l + u) as f64 / total as f64)
            .collect();
        ClassDistribution::new(
            ProbVector::new(probs).expect("counts normalize to a distribution"),
            DistributionKind::TrueLabeled,
        )
    }

    /// The true unlabeled class distribution, from hidden labels.
    pub fn true_unlabeled_distribution(&self) -> ClassDistribution {
        let counts = self.unlabeled_hidden_counts();
        let total: u64 = counts.iter().sum();
        let probs: Vec<f64> = counts.iter().map(|c| *c as f64 / total as f64).collect();
        ClassDistribution::new(
            ProbVector::new(probs).expect("counts normalize to a distribution"),
            DistributionKind::TrueUnlabeled,
        )
    }
}

/// Seeds a dedicated RNG stream from a base seed and a tag path, using
/// splitmix64 steps. Streams are independent of generation order, so
/// per-sample work can run in parallel without changing results.
pub(crate) fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = seed;
    for &t in tags {
        state = splitmix64(state ^ splitmix64(t));
    }
    ChaCha8Rng::seed_from_u64(splitmix64(state))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

const STREAM_LABELED: u64 = 1;
const STREAM_UNLABELED: u64 = 2;
const STREAM_TEST: u64 = 3;

/// Class centers on a circle in the first two coordinates, scaled so the
/// closest pair sits exactly `separation` apart.
fn class_means(k: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    let radius = separation / (2.0 * (std::f64::consts::PI / k as f64).sin());
    (0..k)
        .map(|c| {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
            let mut mean = vec![0.0; dim];
            mean[0] = radius * angle.cos();
            mean[1] = radius * angle.sin();
            mean
        })
        .collect()
}

/// Generates a dataset as a pure function of `(spec, dim, separation,
/// test_per_class)`: repeated calls agree exactly.
pub fn generate(
    spec: &ImbalanceSpec,
    dim: usize,
    separation: f64,
    test_per_class: usize,
) -> Result<SyntheticSslDataset> {
    spec.validate()?;
    if dim < 2 {
        return Err(Error::InvalidInput(format!("feature dimension must be >= 2, got {dim}")));
    }
    if !separation.is_finite() || separation <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "separation must be finite and > 0, got {separation}"
        )));
    }
    if test_per_class == 0 {
        return Err(Error::InvalidInput("test_per_class must be >= 1".into()));
    }

    let means = class_means(spec.k, dim, separation);
    let labeled_counts = split_class_counts(spec.n1, spec.gamma_l, spec.k)?.counts;
    let unlabeled_counts = split_class_counts(spec.m1, spec.gamma_u, spec.k)?.counts;

    let draw_split = |stream: u64, counts: &[u64]| -> Vec<Sample> {
        let mut samples = Vec::new();
        for (class, &count) in counts.iter().enumerate() {
            let mut rng = derive_rng(spec.seed, &[stream, class as u64]);
            for _ in 0..count {
                let features = means[class]
                    .iter()
                    .map(|m| {
                        let z: f64 = rng.sample(StandardNormal);
                        m + z
                    })
                    .collect();
                samples.push(Sample { features, class });
            }
        }
        samples
    };

    let labeled = draw_split(STREAM_LABELED, &labeled_counts);
    let unlabeled = draw_split(STREAM_UNLABELED, &unlabeled_counts);
    let test = draw_split(STREAM_TEST, &vec![test_per_class as u64; spec.k]);

    Ok(SyntheticSslDataset {
        labeled,
        unlabeled,
        test,
        class_means: means,
        class_sigma: 1.0,
        spec: *spec,
        dim,
        separation,
        test_per_class,
    })
}

/// JSON sidecar stored next to the dataset CSV.
#[derive(Debug, Serialize, Deserialize)]
struct DatasetSidecar {
    schema_version: u32,
    spec: ImbalanceSpec,
    dim: usize,
    separation: f64,
    test_per_class: usize,
    labeled_counts: Vec<u64>,
    unlabeled_counts: Vec<u64>,
    class_means: Vec<Vec<f64>>,
    class_sigma: f64,
}

/// Formats a float with nine significant digits, the serialization
/// precision used across all emitted files.
pub fn format_sig9(v: f64) -> String {
    format!("{v:.8e}")
}

/// Writes `dataset.csv` (one row per sample: split, class-or-hidden-class,
/// features) and `dataset.json` (generator parameters) into `dir`.
pub fn export_dataset(ds: &SyntheticSslDataset, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join("dataset.csv");
    let json_path = dir.join("dataset.json");

    let mut writer = csv::Writer::from_path(&csv_path)?;
    let mut header = vec!["schema_version".to_string(), "split".into(), "class".into()];
    header.extend((0..ds.dim).map(|i| format!("f{i}")));
    writer.write_record(&header)?;
    for (split, samples) in
        [("labeled", &ds.labeled), ("unlabeled", &ds.unlabeled), ("test", &ds.test)]
    {
        for s in samples {
            let mut record = vec![
                DATASET_SCHEMA_VERSION.to_string(),
                split.to_string(),
                s.class.to_string(),
            ];
            record.extend(s.features.iter().map(|v| format_sig9(*v)));
            writer.write_record(&record)?;
        }
    }
    writer.flush()?;

    let sidecar = DatasetSidecar {
        schema_version: DATASET_SCHEMA_VERSION,
        spec: ds.spec,
        dim: ds.dim,
        separation: ds.separation,
        test_per_class: ds.test_per_class,
        labeled_counts: ds.labeled_class_counts(),
        unlabeled_counts: ds.unlabeled_hidden_counts(),
        class_means: ds.class_means.clone(),
        class_sigma: ds.class_sigma,
    };
    let mut file = fs::File::create(&json_path)?;
    serde_json::to_writer_pretty(&mut file, &sidecar)?;
    file.write_all(b"\n")?;
    Ok((csv_path, json_path))
}

/// Reads a dataset previously written by [`export_dataset`] from `dir`.
pub fn import_dataset(dir: &Path) -> Result<SyntheticSslDataset> {
    let csv_path = dir.join("dataset.csv");
    let json_path = dir.join("dataset.json");
    if !csv_path.is_file() || !json_path.is_file() {
        return Err(Error::Format(format!(
            "dataset files not found under {} (expected dataset.csv and dataset.json)",
            dir.display()
        )));
    }
    let sidecar: DatasetSidecar = serde_json::from_reader(fs::File::open(&json_path)?)?;
    if sidecar.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset schema version {}",
            sidecar.schema_version
        )));
    }
    sidecar.spec.validate()?;

    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    let mut test = Vec::new();
    let mut reader = csv::Reader::from_path(&csv_path)?;
    for record in reader.records() {
        let record = record?;
        if record.len() != 3 + sidecar.dim {
            return Err(Error::Format(format!(
                "dataset row has {} fields, expected {}",
                record.len(),
                3 + sidecar.dim
            )));
        }
        let class: usize = record[2]
            .parse()
            .map_err(|e| Error::Format(format!("bad class field: {e}")))?;
        if class >= sidecar.spec.k {
            return Err(Error::Format(format!("class {class} out of range")));
        }
        let features = (0..sidecar.dim)
            .map(|i| {
                record[3 + i]
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("bad feature field: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let sample = Sample { features, class };
        match &record[1] {
            "labeled" => labeled.push(sample),
            "unlabeled" => unlabeled.push(sample),
            "test" => test.push(sample),
            other => return Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }

    Ok(SyntheticSslDataset {
        labeled,
        unlabeled,
        test,
        class_means: sidecar.class_means,
        class_sigma: sidecar.class_sigma,
        spec: sidecar.spec,
        dim: sidecar.dim,
        separation: sidecar.separation,
        test_per_class: sidecar.test_per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn longtail_matches_the_benchmark_setting() {
        // N1 = 1500, gamma 100, K = 10: head 1500, tail 1500/100.
        let lt = longtail_counts(1500, 100.0, 10).unwrap();
        assert_eq!(lt.counts[0], 1500);
        assert_eq!(lt.counts[9], 15);
        assert!(!lt.clamped);
    }

    #[test]
    fn longtail_gamma_one_is_flat() {
        let lt = longtail_counts(700, 1.0, 5).unwrap();
        assert_eq!(lt.counts, vec![700; 5]);
    }

    #[test]
    fn longtail_matches_round_half_up_oracle() {
        // Frozen from evaluating 500 * 100^(-(k-1)/9) and rounding half-up.
        let lt = longtail_counts(500, 100.0, 10).unwrap();
        assert_eq!(lt.counts, vec![500, 300, 180, 108, 65, 39, 23, 14, 8, 5]);
        for pair in lt.counts.windows(2) {
            assert!(pair[0] >= pair[1]);
        }
    }

    #[test]
    fn longtail_clamps_to_one_sample() {
        let lt = longtail_counts(10, 1000.0, 10).unwrap();
        assert!(lt.clamped);
        assert!(lt.counts.iter().all(|c| *c >= 1));
        assert_eq!(lt.counts[0], 10);
    }

    #[test]
    fn reversed_gamma_flips_the_tail() {
        // gamma 1/100: class 0 holds head/100, the last class holds head.
        let lt = split_class_counts(3000, 0.01, 10).unwrap();
        assert_eq!(lt.counts[0], 30);
        assert_eq!(lt.counts[9], 3000);
        for pair in lt.counts.windows(2) {
            assert!(pair[0] <= pair[1]);
        }
    }

    fn small_spec(seed: u64) -> ImbalanceSpec {
        ImbalanceSpec { k: 3, n1: 40, m1: 60, gamma_l: 10.0, gamma_u: 1.0, seed }
    }

    #[test]
    fn generation_is_a_pure_function_of_its_inputs() {
        let a = generate(&small_spec(7), 2, 3.0, 10).unwrap();
        let b = generate(&small_spec(7), 2, 3.0, 10).unwrap();
        assert_eq!(a, b);
        let c = generate(&small_spec(8), 2, 3.0, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_unlabeled_counts_are_flat() {
        let ds = generate(&small_spec(1), 2, 3.0, 5).unwrap();
        assert_eq!(ds.unlabeled_hidden_counts(), vec![60, 60, 60]);
        assert_eq!(ds.labeled_class_counts(), split_class_counts(40, 10.0, 3).unwrap().counts);
    }

    #[test]
    fn reversed_unlabeled_counts_increase() {
        let spec = ImbalanceSpec { gamma_u: 0.01, m1: 3000, k: 10, ..small_spec(3) };
        let ds = generate(&spec, 2, 3.0, 5).unwrap();
        let counts = ds.unlabeled_hidden_counts();
        assert_eq!(counts[0], 30);
        assert_eq!(counts[9], 3000);
        for pair in counts.windows(2) {
            assert!(pair[0] <= pair[1]);
        }
    }

    #[test]
    fn test_split_is_exactly_balanced() {
        let ds = generate(&small_spec(5), 3, 2.5, 17).unwrap();
        let mut counts = vec![0usize; 3];
        for s in &ds.test {
            counts[s.class] += 1;
        }
        assert_eq!(counts, vec![17, 17, 17]);
    }

    #[test]
    fn class_means_respect_the_separation() {
        let means = class_means(5, 4, 2.0);
        for i in 0..5 {
            for j in (i + 1)..5 {
                let dist: f64 = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(dist >= 2.0 - 1e-9, "pair ({i},{j}) at distance {dist}");
            }
        }
    }

    #[test]
    fn weak_augment_zero_sigma_is_identity() {
        let policy = AugmentationPolicy { weak_sigma: 0.0, ..Default::default() };
        let mut rng = derive_rng(1, &[2, 3]);
        let x = vec![0.5, -1.5, 2.0];
        assert_eq!(weak_augment(&x, &policy, &mut rng), x);
    }

    #[test]
    fn weak_augment_is_unbiased() {
        let policy = AugmentationPolicy::default();
        let x = vec![1.0, -2.0];
        let n = 20_000;
        let mut sums = vec![0.0; 2];
        for i in 0..n {
            let mut rng = derive_rng(99, &[i]);
            for (acc, v) in sums.iter_mut().zip(weak_augment(&x, &policy, &mut rng)) {
                *acc += v;
            }
        }
        let bound = 3.0 * policy.weak_sigma / (n as f64).sqrt();
        for (acc, v) in sums.iter().zip(&x) {
            assert!((acc / n as f64 - v).abs() < bound);
        }
    }

    #[test]
    fn augmentation_is_reproducible_for_a_fixed_seed() {
        let policy = AugmentationPolicy::default();
        let x = vec![0.1, 0.2, 0.3];
        let a = weak_augment(&x, &policy, &mut derive_rng(5, &[1]));
        let b = weak_augment(&x, &policy, &mut derive_rng(5, &[1]));
        assert_eq!(a, b);
        let c = strong_augment(&x, &policy, &mut derive_rng(5, &[2]));
        let d = strong_augment(&x, &policy, &mut derive_rng(5, &[2]));
        assert_eq!(c, d);
    }

    #[test]
    fn strong_augment_with_zeroed_knobs_is_identity() {
        let policy = AugmentationPolicy::disabled();
        let mut rng = derive_rng(4, &[7]);
        let x = vec![0.5, -1.5];
        assert_eq!(strong_augment(&x, &policy, &mut rng), x);
    }

    #[test]
    fn full_dropout_zeroes_everything() {
        let policy = AugmentationPolicy { strong_dropout_p: 1.0, ..Default::default() };
        let mut rng = derive_rng(4, &[8]);
        let out = strong_augment(&[1.0, 2.0, 3.0], &policy, &mut rng);
        assert_eq!(out, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn strong_perturbation_has_more_variance_than_weak() {
        let policy = AugmentationPolicy::default();
        let x = vec![1.0, -1.0];
        let n = 10_000;
        let (mut weak_var, mut strong_var) = (0.0, 0.0);
        for i in 0..n {
            let w = weak_augment(&x, &policy, &mut derive_rng(11, &[0, i]));
            let s = strong_augment(&x, &policy, &mut derive_rng(11, &[1, i]));
            weak_var += w.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            strong_var += s.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        assert!(strong_var > weak_var * 2.0);
    }

    #[test]
    fn export_import_roundtrip_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small_spec(21), 2, 3.0, 6).unwrap();
        export_dataset(&ds, dir.path()).unwrap();
        let loaded = import_dataset(dir.path()).unwrap();
        assert_eq!(loaded.spec, ds.spec);
        assert_eq!(loaded.labeled.len(), ds.labeled.len());
        assert_eq!(loaded.unlabeled.len(), ds.unlabeled.len());
        assert_eq!(loaded.test.len(), ds.test.len());

        // Re-export of the imported dataset is byte-identical.
        let dir2 = tempfile::tempdir().unwrap();
        export_dataset(&loaded, dir2.path()).unwrap();
        let a = std::fs::read(dir.path().join("dataset.csv")).unwrap();
        let b = std::fs::read(dir2.path().join("dataset.csv")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn true_training_distribution_combines_both_pools() {
        let ds = generate(&small_spec(2), 2, 3.0, 5).unwrap();
        let labeled = ds.labeled_class_counts();
        let unlabeled = ds.unlabeled_hidden_counts();
        let total: u64 = labeled.iter().sum::<u64>() + unlabeled.iter().sum::<u64>();
        let dist = ds.true_training_distribution();
        for (i, p) in dist.probs().values().iter().enumerate() {
            assert_abs_diff_eq!(
                *p,
                (labeled[i] + unlabeled[i]) as f64 / total as f64,
                epsilon = 1e-12
            );
        }
    }

    proptest! {
        // counts[k] / counts[0] tracks gamma^(-k/(K-1)) within rounding.
        #[test]
        fn longtail_ratio_tracks_the_exponent(
            n1 in 50u64..5000,
            gamma in 1.0f64..200.0,
            k in 2usize..12,
        ) {
            let lt = longtail_counts(n1, gamma, k).unwrap();
            for (i, &c) in lt.counts.iter().enumerate() {
                let ideal = n1 as f64 * gamma.powf(-(i as f64) / (k as f64 - 1.0));
                prop_assert!((c as f64 - ideal).abs() <= 0.5 + 1e-9);
            }
            for pair in lt.counts.windows(2) {
                prop_assert!(pair[0] >= pair[1]);
            }
        }

        // The hidden unlabeled distribution equals the split counts exactly.
        #[test]
        fn hidden_distribution_matches_split_counts(
            seed in 0u64..50,
            gamma_u in prop_oneof![Just(0.1f64), Just(0.5), Just(1.0), Just(2.0), Just(10.0)],
        ) {
            let spec = ImbalanceSpec { k: 4, n1: 30, m1: 50, gamma_l: 5.0, gamma_u, seed };
            let ds = generate(&spec, 2, 3.0, 4).unwrap();
            let expected = split_class_counts(50, gamma_u, 4).unwrap().counts;
            prop_assert_eq!(ds.unlabeled_hidden_counts(), expected);
        }
    }
}
