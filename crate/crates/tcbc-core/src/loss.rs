//! Pure probability/logit operations: softmax, log-prior logit adjustment,
//! cross-entropy, confidence masking, and the combined objective terms.
//!
//! Everything here is a pure function on value types and safe to call from
//! any number of threads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to probabilities inside cross-entropy so a saturated
/// softmax can never produce an infinite loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance used when validating that probability vectors sum to one.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Unnormalized per-class scores produced by a model.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    values: Vec<f64>,
}

impl LogitVector {
    /// Wraps raw scores, rejecting non-finite entries and vectors shorter
    /// than two classes.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "logit vector needs at least 2 classes, got {}",
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite logit entry".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn num_classes(&self) -> usize {
        self.values.len()
    }
}

/// A probability vector over the class set: non-negative entries summing
/// to one within [`PROB_SUM_TOL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector {
    values: Vec<f64>,
}

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "probability vector needs at least 2 classes, got {}",
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::InvalidInput(
                "probability entries must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {sum}, expected 1 within {PROB_SUM_TOL:e}"
            )));
        }
        Ok(Self { values })
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            values: vec![1.0 / k as f64; k],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn num_classes(&self) -> usize {
        self.values.len()
    }

    pub fn max_entry(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the largest entry; ties break toward the lowest class index.
    pub fn argmax(&self) -> usize {
        argmax_slice(&self.values)
    }
}

/// Index of the largest entry with lowest-index tie-breaking.
pub(crate) fn argmax_slice(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Provenance of a class distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistributionKind {
    TrueLabeled,
    TrueUnlabeled,
    EstimatedTrain,
    PseudoLabel,
    Uniform,
}

/// A probability vector over classes tagged with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    probs: ProbVector,
    kind: DistributionKind,
}

impl ClassDistribution {
    pub fn new(probs: ProbVector, kind: DistributionKind) -> Self {
        Self { probs, kind }
    }

    /// The exactly uniform distribution over `k` classes.
    pub fn uniform(k: usize) -> Self {
        Self {
            probs: ProbVector::uniform(k),
            kind: DistributionKind::Uniform,
        }
    }

    pub fn probs(&self) -> &ProbVector {
        &self.probs
    }

    pub fn kind(&self) -> DistributionKind {
        self.kind
    }

    pub fn num_classes(&self) -> usize {
        self.probs.num_classes()
    }

    /// Whether this distribution is the uniform no-op prior. Adjusting
    /// logits by a uniform prior is a constant shift that softmax cancels,
    /// so callers skip the addition entirely for that case.
    pub fn is_uniform_kind(&self) -> bool {
        self.kind == DistributionKind::Uniform
    }

    /// Elementwise natural log, rejecting zero entries.
    pub fn log_probs(&self) -> Result<Vec<f64>> {
        if self.probs.values().iter().any(|p| *p <= 0.0) {
            return Err(Error::Domain(
                "log of class distribution requires strictly positive entries".into(),
            ));
        }
        Ok(self.probs.values().iter().map(|p| p.ln()).collect())
    }
}

/// Numerically stable softmax over a raw slice. `out` must have the same
/// length as `v`.
pub(crate) fn softmax_into(v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(v.len(), out.len());
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, x) in out.iter_mut().zip(v) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Exp-normalizes logits with max-subtraction so large scores cannot
/// overflow.
pub fn softmax(logits: &LogitVector) -> ProbVector {
    let mut out = vec![0.0; logits.num_classes()];
    softmax_into(logits.values(), &mut out);
    ProbVector { values: out }
}

/// log(sum(exp(v))) with max-subtraction.
pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Adds the elementwise log prior to the scores: `f(x) + ln prior`.
///
/// The prior must be strictly positive; smoothing is the caller's job.
pub fn adjust_logits_with_log_prior(
    logits: &LogitVector,
    prior: &ClassDistribution,
) -> Result<LogitVector> {
    if prior.num_classes() != logits.num_classes() {
        return Err(Error::Shape {
            expected: format!("{} classes", logits.num_classes()),
            got: format!("{} prior entries", prior.num_classes()),
        });
    }
    let log_prior = prior.log_probs()?;
    let values = logits
        .values()
        .iter()
        .zip(&log_prior)
        .map(|(f, lp)| f + lp)
        .collect();
    LogitVector::new(values)
}

/// A scalar loss together with a flag recording whether the probability
/// floor kicked in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub clamped: bool,
}

/// `-ln probs[target]`, clamped at [`PROB_FLOOR`] so it is never infinite.
pub fn cross_entropy(target: usize, probs: &ProbVector) -> Result<LossValue> {
    if target >= probs.num_classes() {
        return Err(Error::InvalidInput(format!(
            "target class {target} out of range for {} classes",
            probs.num_classes()
        )));
    }
    let p = probs.values()[target];
    let clamped = p < PROB_FLOOR;
    let value = -p.max(PROB_FLOOR).ln();
    Ok(LossValue { value, clamped })
}

/// True iff the most confident entry reaches the threshold. The comparison
/// is inclusive.
pub fn confidence_mask(weak_probs: &ProbVector, tau_c: f64) -> bool {
    weak_probs.max_entry() >= tau_c
}

/// A batch-level loss with bookkeeping flags.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub value: f64,
    /// Some sample hit the probability floor.
    pub clamped: bool,
    /// The batch was empty and the loss defaulted to zero.
    pub empty_batch: bool,
}

/// Mean cross-entropy over a labeled batch. The probabilities are expected
/// to already carry any prior adjustment.
pub fn supervised_loss(targets: &[usize], adjusted_probs: &[ProbVector]) -> Result<BatchLoss> {
    if targets.len() != adjusted_probs.len() {
        return Err(Error::InvalidInput(format!(
            "batch length mismatch: {} targets vs {} probability rows",
            targets.len(),
            adjusted_probs.len()
        )));
    }
    if targets.is_empty() {
        return Ok(BatchLoss {
            value: 0.0,
            clamped: false,
            empty_batch: true,
        });
    }
    let mut sum = 0.0;
    let mut clamped = false;
    for (t, p) in targets.iter().zip(adjusted_probs) {
        let loss = cross_entropy(*t, p)?;
        sum += loss.value;
        clamped |= loss.clamped;
    }
    Ok(BatchLoss {
        value: sum / targets.len() as f64,
        clamped,
        empty_batch: false,
    })
}

/// Masked mean cross-entropy over an unlabeled batch. Unmasked samples
/// contribute zero but still count in the denominator.
pub fn unsupervised_loss(
    pseudo_targets: &[usize],
    masks: &[bool],
    strong_adjusted_probs: &[ProbVector],
) -> Result<BatchLoss> {
    if pseudo_targets.len() != masks.len() || masks.len() != strong_adjusted_probs.len() {
        return Err(Error::InvalidInput(format!(
            "batch length mismatch: {} targets, {} masks, {} probability rows",
            pseudo_targets.len(),
            masks.len(),
            strong_adjusted_probs.len()
        )));
    }
    if pseudo_targets.is_empty() {
        return Ok(BatchLoss {
            value: 0.0,
            clamped: false,
            empty_batch: true,
        });
    }
    let mut sum = 0.0;
    let mut clamped = false;
    for ((t, mask), p) in pseudo_targets.iter().zip(masks).zip(strong_adjusted_probs) {
        if !mask {
            continue;
        }
        let loss = cross_entropy(*t, p)?;
        sum += loss.value;
        clamped |= loss.clamped;
    }
    Ok(BatchLoss {
        value: sum / pseudo_targets.len() as f64,
        clamped,
        empty_batch: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn logits(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    fn probs(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_symmetric_input_is_uniform() {
        let p = softmax(&logits(&[0.0, 0.0, 0.0]));
        for v in p.values() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_matches_scalar_oracle() {
        // Frozen from the direct exp/sum-exp evaluation of [1, 2, 3].
        let p = softmax(&logits(&[1.0, 2.0, 3.0]));
        let expected = [0.090030573170380, 0.244728471054798, 0.665240955774822];
        for (got, want) in p.values().iter().zip(expected) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        // Frozen from the max-subtracted oracle on [1000, 1000, 999].
        let p = softmax(&logits(&[1000.0, 1000.0, 999.0]));
        let expected = [0.422318798251518, 0.422318798251518, 0.155362403496964];
        for (got, want) in p.values().iter().zip(expected) {
            assert!(got.is_finite());
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(p.values().iter().sum::<f64>(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        assert!(LogitVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(LogitVector::new(vec![f64::INFINITY, 0.0]).is_err());
        assert!(LogitVector::new(vec![1.0]).is_err());
    }

    #[test]
    fn uniform_prior_adjustment_is_constant_shift() {
        let adjusted =
            adjust_logits_with_log_prior(&logits(&[1.0, 2.0]), &ClassDistribution::uniform(2))
                .unwrap();
        assert_abs_diff_eq!(adjusted.values()[0], 1.0 + 0.5f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(adjusted.values()[1], 2.0 + 0.5f64.ln(), epsilon = 1e-12);
        let a = softmax(&adjusted);
        let b = softmax(&logits(&[1.0, 2.0]));
        for (x, y) in a.values().iter().zip(b.values()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_logits_recover_the_prior() {
        // softmax(ln p) = p.
        let prior = ClassDistribution::new(probs(&[0.75, 0.25]), DistributionKind::EstimatedTrain);
        let adjusted = adjust_logits_with_log_prior(&logits(&[0.0, 0.0]), &prior).unwrap();
        let p = softmax(&adjusted);
        assert_abs_diff_eq!(p.values()[0], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(p.values()[1], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn adjusted_softmax_matches_scalar_oracle() {
        // Frozen from the scalar oracle for logits [1, 0], prior (0.75, 0.25).
        let prior = ClassDistribution::new(probs(&[0.75, 0.25]), DistributionKind::EstimatedTrain);
        let adjusted = adjust_logits_with_log_prior(&logits(&[1.0, 0.0]), &prior).unwrap();
        let p = softmax(&adjusted);
        assert_abs_diff_eq!(p.values()[0], 0.890768227426964, epsilon = 1e-12);
        assert_abs_diff_eq!(p.values()[1], 0.109231772573036, epsilon = 1e-12);
    }

    #[test]
    fn zero_prior_entry_is_a_domain_error() {
        let prior = ClassDistribution::new(probs(&[1.0, 0.0]), DistributionKind::PseudoLabel);
        let err = adjust_logits_with_log_prior(&logits(&[0.0, 0.0]), &prior).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn cross_entropy_examples() {
        let perfect = cross_entropy(0, &probs(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(perfect.value, 0.0);
        assert!(!perfect.clamped);

        let uniform = cross_entropy(1, &probs(&[0.5, 0.5])).unwrap();
        assert_abs_diff_eq!(uniform.value, LN2, epsilon = 1e-12);

        // Frozen: -ln(softmax([1,2,3])[2]).
        let p = softmax(&logits(&[1.0, 2.0, 3.0]));
        let loss = cross_entropy(2, &p).unwrap();
        assert_abs_diff_eq!(loss.value, 0.407605964444380, epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let loss = cross_entropy(1, &probs(&[1.0, 0.0])).unwrap();
        assert!(loss.clamped);
        assert!(loss.value.is_finite());
        assert_abs_diff_eq!(loss.value, -PROB_FLOOR.ln(), epsilon = 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        assert!(cross_entropy(2, &probs(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn confidence_mask_is_inclusive_at_the_threshold() {
        assert!(confidence_mask(&probs(&[0.97, 0.02, 0.01]), 0.95));
        assert!(!confidence_mask(&probs(&[0.5, 0.5]), 0.95));
        // Boundary case: the indicator uses >=.
        assert!(confidence_mask(&probs(&[0.95, 0.05]), 0.95));
    }

    #[test]
    fn supervised_loss_examples() {
        let one = supervised_loss(&[0], &[probs(&[1.0, 0.0])]).unwrap();
        assert_eq!(one.value, 0.0);

        let two = supervised_loss(&[0, 1], &[probs(&[0.5, 0.5]), probs(&[0.5, 0.5])]).unwrap();
        assert_abs_diff_eq!(two.value, LN2, epsilon = 1e-12);

        // Mixed batch: mean of the per-sample values, summed by hand.
        let rows = [probs(&[0.9, 0.1]), probs(&[0.25, 0.75]), probs(&[0.5, 0.5])];
        let got = supervised_loss(&[0, 1, 0], &rows).unwrap();
        let want = (-(0.9f64.ln()) + -(0.75f64.ln()) + LN2) / 3.0;
        assert_abs_diff_eq!(got.value, want, epsilon = 1e-12);
    }

    #[test]
    fn supervised_loss_empty_batch_flags() {
        let empty = supervised_loss(&[], &[]).unwrap();
        assert_eq!(empty.value, 0.0);
        assert!(empty.empty_batch);
    }

    #[test]
    fn unsupervised_loss_examples() {
        let none = unsupervised_loss(
            &[0, 1],
            &[false, false],
            &[probs(&[0.5, 0.5]), probs(&[0.5, 0.5])],
        )
        .unwrap();
        assert_eq!(none.value, 0.0);

        let perfect = unsupervised_loss(&[0], &[true], &[probs(&[1.0, 0.0])]).unwrap();
        assert_eq!(perfect.value, 0.0);

        // One of two samples masked: ln 2 / 2 by hand.
        let half = unsupervised_loss(
            &[0, 0],
            &[true, false],
            &[probs(&[0.5, 0.5]), probs(&[0.9, 0.1])],
        )
        .unwrap();
        assert_abs_diff_eq!(half.value, LN2 / 2.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            v in proptest::collection::vec(-50.0f64..50.0, 2..12),
            c in -100.0f64..100.0,
        ) {
            let p = softmax(&logits(&v));
            let sum: f64 = p.values().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);

            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&logits(&shifted));
            for (a, b) in p.values().iter().zip(q.values()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn uniform_prior_never_changes_the_prediction(
            v in proptest::collection::vec(-30.0f64..30.0, 2..10),
        ) {
            let raw = softmax(&logits(&v));
            let adjusted = adjust_logits_with_log_prior(
                &logits(&v),
                &ClassDistribution::uniform(v.len()),
            ).unwrap();
            prop_assert_eq!(softmax(&adjusted).argmax(), raw.argmax());
        }

        #[test]
        fn cross_entropy_equals_lse_minus_logit(
            v in proptest::collection::vec(-30.0f64..30.0, 2..10),
            t_raw in 0usize..10,
        ) {
            let t = t_raw % v.len();
            let loss = cross_entropy(t, &softmax(&logits(&v))).unwrap();
            let identity = log_sum_exp(&v) - v[t];
            prop_assert!((loss.value - identity).abs() < 1e-9);
        }

        #[test]
        fn batch_losses_are_permutation_invariant(
            rows in proptest::collection::vec(
                (proptest::collection::vec(-10.0f64..10.0, 3), 0usize..3, any::<bool>()),
                1..12,
            ),
        ) {
            let ps: Vec<ProbVector> = rows.iter().map(|(v, _, _)| softmax(&logits(v))).collect();
            let ts: Vec<usize> = rows.iter().map(|(_, t, _)| *t).collect();
            let ms: Vec<bool> = rows.iter().map(|(_, _, m)| *m).collect();

            let mut rev_ps = ps.clone();
            rev_ps.reverse();
            let mut rev_ts = ts.clone();
            rev_ts.reverse();
            let mut rev_ms = ms.clone();
            rev_ms.reverse();

            let s = supervised_loss(&ts, &ps).unwrap().value;
            let s_rev = supervised_loss(&rev_ts, &rev_ps).unwrap().value;
            prop_assert!((s - s_rev).abs() < 1e-9);

            let u = unsupervised_loss(&ts, &ms, &ps).unwrap().value;
            let u_rev = unsupervised_loss(&rev_ts, &rev_ms, &rev_ps).unwrap().value;
            prop_assert!((u - u_rev).abs() < 1e-9);
        }

        #[test]
        fn unmasking_a_lossy_sample_never_decreases_the_loss(
            rows in proptest::collection::vec(
                (proptest::collection::vec(-10.0f64..10.0, 3), 0usize..3, any::<bool>()),
                1..12,
            ),
            flip in 0usize..12,
        ) {
            let ps: Vec<ProbVector> = rows.iter().map(|(v, _, _)| softmax(&logits(v))).collect();
            let ts: Vec<usize> = rows.iter().map(|(_, t, _)| *t).collect();
            let mut ms: Vec<bool> = rows.iter().map(|(_, _, m)| *m).collect();

            let before = unsupervised_loss(&ts, &ms, &ps).unwrap().value;
            let idx = flip % ms.len();
            ms[idx] = true;
            let after = unsupervised_loss(&ts, &ms, &ps).unwrap().value;
            prop_assert!(after >= before - 1e-12);
        }
    }
}
