//! A minimal trainable classifier: linear softmax or a one-hidden-layer
//! relu perceptron, with explicit forward, analytic backward for the
//! prior-adjusted cross-entropy objective, plain SGD, and an EMA shadow
//! copy used for evaluation.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{argmax_slice, softmax_into, ClassDistribution, LogitVector, ProbVector, PROB_FLOOR};

/// Shape descriptor: input dimension, hidden width (0 selects the linear
/// model), and class count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl Architecture {
    pub fn linear(input_dim: usize, num_classes: usize) -> Self {
        Self { input_dim, hidden_dim: 0, num_classes }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        Self { input_dim, hidden_dim, num_classes }
    }

    pub fn is_linear(&self) -> bool {
        self.hidden_dim == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layers {
    Linear {
        w: Array2<f64>, // K x D
        b: Array1<f64>, // K
    },
    Mlp {
        w1: Array2<f64>, // H x D
        b1: Array1<f64>, // H
        w2: Array2<f64>, // K x H
        b2: Array1<f64>, // K
    },
}

/// Trainable parameters together with their architecture descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    layers: Layers,
}

impl ModelParams {
    /// All-zero parameters. For the linear model this is also the training
    /// start state; an untrained zero model predicts uniformly.
    pub fn zeros(arch: Architecture) -> Self {
        let layers = if arch.is_linear() {
            Layers::Linear {
                w: Array2::zeros((arch.num_classes, arch.input_dim)),
                b: Array1::zeros(arch.num_classes),
            }
        } else {
            Layers::Mlp {
                w1: Array2::zeros((arch.hidden_dim, arch.input_dim)),
                b1: Array1::zeros(arch.hidden_dim),
                w2: Array2::zeros((arch.num_classes, arch.hidden_dim)),
                b2: Array1::zeros(arch.num_classes),
            }
        };
        Self { arch, layers }
    }

    /// Training initialization: zeros for the linear model, scaled normal
    /// weights for the MLP (symmetry breaking).
    pub fn init(arch: Architecture, rng: &mut impl Rng) -> Self {
        if arch.is_linear() {
            return Self::zeros(arch);
        }
        let mut normal = |rows: usize, cols: usize, std: f64| {
            Array2::from_shape_fn((rows, cols), |_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
        };
        let std1 = (2.0 / arch.input_dim as f64).sqrt();
        let std2 = (2.0 / arch.hidden_dim as f64).sqrt();
        let layers = Layers::Mlp {
            w1: normal(arch.hidden_dim, arch.input_dim, std1),
            b1: Array1::zeros(arch.hidden_dim),
            w2: normal(arch.num_classes, arch.hidden_dim, std2),
            b2: Array1::zeros(arch.num_classes),
        };
        Self { arch, layers }
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    /// Named parameter arrays with their shapes, in a fixed order. Used for
    /// checkpoint serialization and exact comparisons.
    pub fn named_arrays(&self) -> Vec<(&'static str, Vec<usize>, Vec<f64>)> {
        match &self.layers {
            Layers::Linear { w, b } => vec![
                ("w", w.shape().to_vec(), w.iter().copied().collect()),
                ("b", b.shape().to_vec(), b.iter().copied().collect()),
            ],
            Layers::Mlp { w1, b1, w2, b2 } => vec![
                ("w1", w1.shape().to_vec(), w1.iter().copied().collect()),
                ("b1", b1.shape().to_vec(), b1.iter().copied().collect()),
                ("w2", w2.shape().to_vec(), w2.iter().copied().collect()),
                ("b2", b2.shape().to_vec(), b2.iter().copied().collect()),
            ],
        }
    }

    /// Rebuilds parameters from named flat arrays, validating shapes against
    /// the architecture.
    pub fn from_named_arrays(
        arch: Architecture,
        mut arrays: std::collections::HashMap<String, (Vec<usize>, Vec<f64>)>,
    ) -> Result<Self> {
        let mut take2 = |name: &str, rows: usize, cols: usize| -> Result<Array2<f64>> {
            let (shape, data) = arrays
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing parameter array {name}")))?;
            if shape != [rows, cols] {
                return Err(Error::Shape {
                    expected: format!("{name}: [{rows}, {cols}]"),
                    got: format!("{shape:?}"),
                });
            }
            Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::Format(format!("{name}: {e}")))
        };
        let layers = if arch.is_linear() {
            let w = take2("w", arch.num_classes, arch.input_dim)?;
            let (shape, data) = arrays
                .remove("b")
                .ok_or_else(|| Error::Format("missing parameter array b".into()))?;
            if shape != [arch.num_classes] {
                return Err(Error::Shape {
                    expected: format!("b: [{}]", arch.num_classes),
                    got: format!("{shape:?}"),
                });
            }
            Layers::Linear { w, b: Array1::from_vec(data) }
        } else {
            let w1 = take2("w1", arch.hidden_dim, arch.input_dim)?;
            let w2 = take2("w2", arch.num_classes, arch.hidden_dim)?;
            let mut take1 = |name: &str, len: usize| -> Result<Array1<f64>> {
                let (shape, data) = arrays
                    .remove(name)
                    .ok_or_else(|| Error::Format(format!("missing parameter array {name}")))?;
                if shape != [len] {
                    return Err(Error::Shape {
                        expected: format!("{name}: [{len}]"),
                        got: format!("{shape:?}"),
                    });
                }
                Ok(Array1::from_vec(data))
            };
            let b1 = take1("b1", arch.hidden_dim)?;
            let b2 = take1("b2", arch.num_classes)?;
            Layers::Mlp { w1, b1, w2, b2 }
        };
        Ok(Self { arch, layers })
    }

    fn check_input(&self, inputs: &ArrayView2<f64>) -> Result<()> {
        if inputs.ncols() != self.arch.input_dim {
            return Err(Error::Shape {
                expected: format!("input dim {}", self.arch.input_dim),
                got: format!("{}", inputs.ncols()),
            });
        }
        Ok(())
    }

    /// Deterministic batch forward pass: one logit row per input row.
    pub fn forward(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(inputs)?.logits)
    }

    fn forward_cached(&self, inputs: ArrayView2<f64>) -> Result<ForwardCache> {
        self.check_input(&inputs)?;
        match &self.layers {
            Layers::Linear { w, b } => {
                let logits = inputs.dot(&w.t()) + b;
                Ok(ForwardCache { logits, hidden_pre: None, hidden_act: None })
            }
            Layers::Mlp { w1, b1, w2, b2 } => {
                let pre = inputs.dot(&w1.t()) + b1;
                let act = pre.mapv(|x| x.max(0.0));
                let logits = act.dot(&w2.t()) + b2;
                Ok(ForwardCache { logits, hidden_pre: Some(pre), hidden_act: Some(act) })
            }
        }
    }

    /// Forward pass for a single sample.
    pub fn forward_single(&self, x: &[f64]) -> Result<LogitVector> {
        let view = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        let logits = self.forward(view)?;
        LogitVector::new(logits.row(0).to_vec())
    }
}

struct ForwardCache {
    logits: Array2<f64>,
    hidden_pre: Option<Array2<f64>>,
    hidden_act: Option<Array2<f64>>,
}

/// Inputs to one optimization step. Pseudo-labeled rows are the strong
/// views of the unlabeled batch.
pub struct StepBatch<'a> {
    pub labeled_inputs: ArrayView2<'a, f64>,
    pub labeled_targets: &'a [usize],
    pub unlabeled_inputs: ArrayView2<'a, f64>,
    pub pseudo_targets: &'a [usize],
    pub masks: &'a [bool],
}

/// Loss components observed by one step, before the parameter update.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub loss_s: f64,
    pub loss_u: f64,
    /// `loss_s + lambda * loss_u`.
    pub total: f64,
    /// Some sample hit the cross-entropy probability floor.
    pub clamped: bool,
}

/// One SGD step on `L_s + lambda * L_u` with prior-adjusted posteriors.
///
/// The gradient at the logit layer is `softmax(f + ln ptr) - onehot(target)`,
/// masked and scaled by the batch normalizers. A uniform-kind prior skips
/// the logit shift entirely (softmax is shift-invariant, and skipping keeps
/// degenerate modes bit-identical to the unadjusted path).
///
/// On a non-finite loss the step is aborted: parameters are left untouched
/// and an error with diagnostics is returned.
pub fn backward_step(
    params: &mut ModelParams,
    batch: &StepBatch,
    ptr: &ClassDistribution,
    lambda: f64,
    lr: f64,
    weight_decay: f64,
) -> Result<StepLosses> {
    if lr < 0.0 || !lr.is_finite() {
        return Err(Error::InvalidInput(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    if batch.labeled_targets.len() != batch.labeled_inputs.nrows() {
        return Err(Error::InvalidInput("labeled batch length mismatch".into()));
    }
    if batch.pseudo_targets.len() != batch.unlabeled_inputs.nrows()
        || batch.masks.len() != batch.pseudo_targets.len()
    {
        return Err(Error::InvalidInput("unlabeled batch length mismatch".into()));
    }
    let k = params.arch.num_classes;
    let log_prior: Option<Vec<f64>> = if ptr.is_uniform_kind() { None } else { Some(ptr.log_probs()?) };

    let mut grad = Gradients::zeros_like(params);
    let mut clamped = false;

    // Labeled pass: mean cross-entropy over |B_l|.
    let n_l = batch.labeled_targets.len();
    let mut loss_s = 0.0;
    if n_l > 0 {
        let cache = params.forward_cached(batch.labeled_inputs)?;
        let (loss, g, hit_floor) =
            logit_grads(&cache.logits, batch.labeled_targets, None, log_prior.as_deref(), 1.0, k);
        loss_s = loss / n_l as f64;
        clamped |= hit_floor;
        let g = g / n_l as f64;
        grad.accumulate(params, &cache, batch.labeled_inputs, &g);
    }

    // Unlabeled pass: masked mean over |B_u|, weighted by lambda in the
    // total objective.
    let n_u = batch.pseudo_targets.len();
    let mut loss_u = 0.0;
    if n_u > 0 {
        let cache = params.forward_cached(batch.unlabeled_inputs)?;
        let (loss, g, hit_floor) = logit_grads(
            &cache.logits,
            batch.pseudo_targets,
            Some(batch.masks),
            log_prior.as_deref(),
            lambda,
            k,
        );
        loss_u = loss / n_u as f64;
        clamped |= hit_floor;
        let g = g / n_u as f64;
        grad.accumulate(params, &cache, batch.unlabeled_inputs, &g);
    }

    let total = loss_s + lambda * loss_u;
    if !total.is_finite() {
        return Err(Error::NonFinite {
            iteration: 0,
            diagnostics: format!("loss_s={loss_s}, loss_u={loss_u}, lambda={lambda}"),
        });
    }

    grad.apply_sgd(params, lr, weight_decay);
    Ok(StepLosses { loss_s, loss_u, total, clamped })
}

/// Per-row logit-layer gradients and the summed cross-entropy loss.
///
/// Rows with a false mask contribute nothing. `scale` multiplies the
/// gradient only (the loss component is scaled by the caller).
fn logit_grads(
    logits: &Array2<f64>,
    targets: &[usize],
    masks: Option<&[bool]>,
    log_prior: Option<&[f64]>,
    scale: f64,
    k: usize,
) -> (f64, Array2<f64>, bool) {
    let n = logits.nrows();
    let mut grads = Array2::zeros((n, k));
    let mut loss_sum = 0.0;
    let mut clamped = false;
    let mut adjusted = vec![0.0; k];
    let mut probs = vec![0.0; k];
    for (i, row) in logits.outer_iter().enumerate() {
        if let Some(masks) = masks {
            if !masks[i] {
                continue;
            }
        }
        match log_prior {
            Some(lp) => {
                for ((a, f), p) in adjusted.iter_mut().zip(row.iter()).zip(lp) {
                    *a = f + p;
                }
            }
            None => adjusted.copy_from_slice(row.as_slice().expect("contiguous logit row")),
        }
        softmax_into(&adjusted, &mut probs);
        let target = targets[i];
        let p = probs[target];
        clamped |= p < PROB_FLOOR;
        loss_sum += -p.max(PROB_FLOOR).ln();
        let mut grad_row = grads.row_mut(i);
        for (g, p) in grad_row.iter_mut().zip(&probs) {
            *g = scale * p;
        }
        grad_row[target] -= scale;
    }
    (loss_sum, grads, clamped)
}

/// Gradient accumulator shaped like the parameters.
struct Gradients {
    layers: Layers,
}

impl Gradients {
    fn zeros_like(params: &ModelParams) -> Self {
        Self { layers: ModelParams::zeros(params.arch).layers }
    }

    /// Backpropagates per-row logit gradients `g` (n x K) through the model
    /// for the given inputs, adding into the accumulator.
    fn accumulate(
        &mut self,
        params: &ModelParams,
        cache: &ForwardCache,
        inputs: ArrayView2<f64>,
        g: &Array2<f64>,
    ) {
        match (&mut self.layers, &params.layers) {
            (Layers::Linear { w: gw, b: gb }, Layers::Linear { .. }) => {
                *gw += &g.t().dot(&inputs);
                *gb += &g.sum_axis(Axis(0));
            }
            (Layers::Mlp { w1: gw1, b1: gb1, w2: gw2, b2: gb2 }, Layers::Mlp { w2, .. }) => {
                let act = cache.hidden_act.as_ref().expect("mlp forward cache");
                let pre = cache.hidden_pre.as_ref().expect("mlp forward cache");
                *gw2 += &g.t().dot(act);
                *gb2 += &g.sum_axis(Axis(0));
                let mut d_hidden = g.dot(w2);
                d_hidden.zip_mut_with(pre, |d, p| {
                    if *p <= 0.0 {
                        *d = 0.0;
                    }
                });
                *gw1 += &d_hidden.t().dot(&inputs);
                *gb1 += &d_hidden.sum_axis(Axis(0));
            }
            _ => unreachable!("gradient/parameter layer mismatch"),
        }
    }

    fn apply_sgd(&self, params: &mut ModelParams, lr: f64, weight_decay: f64) {
        let update2 = |p: &mut Array2<f64>, g: &Array2<f64>| {
            p.zip_mut_with(g, |p, g| *p -= lr * (g + weight_decay * *p));
        };
        let update1 = |p: &mut Array1<f64>, g: &Array1<f64>| {
            p.zip_mut_with(g, |p, g| *p -= lr * (g + weight_decay * *p));
        };
        match (&mut params.layers, &self.layers) {
            (Layers::Linear { w, b }, Layers::Linear { w: gw, b: gb }) => {
                update2(w, gw);
                update1(b, gb);
            }
            (
                Layers::Mlp { w1, b1, w2, b2 },
                Layers::Mlp { w1: gw1, b1: gb1, w2: gw2, b2: gb2 },
            ) => {
                update2(w1, gw1);
                update1(b1, gb1);
                update2(w2, gw2);
                update1(b2, gb2);
            }
            _ => unreachable!("gradient/parameter layer mismatch"),
        }
    }
}

/// Shadow copy of the parameters tracked by exponential moving average;
/// evaluation always goes through this copy.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaParams {
    shadow: ModelParams,
    decay: f64,
}

impl EmaParams {
    /// Starts the shadow at the current parameters.
    pub fn new(params: &ModelParams, decay: f64) -> Self {
        assert!((0.0..1.0).contains(&decay), "ema decay must be in [0, 1)");
        Self { shadow: params.clone(), decay }
    }

    pub fn from_params(shadow: ModelParams, decay: f64) -> Self {
        Self { shadow, decay }
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn params(&self) -> &ModelParams {
        &self.shadow
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`, elementwise.
    pub fn update(&mut self, params: &ModelParams) {
        let d = self.decay;
        let blend2 = |s: &mut Array2<f64>, p: &Array2<f64>| {
            s.zip_mut_with(p, |s, p| *s = d * *s + (1.0 - d) * p);
        };
        let blend1 = |s: &mut Array1<f64>, p: &Array1<f64>| {
            s.zip_mut_with(p, |s, p| *s = d * *s + (1.0 - d) * p);
        };
        match (&mut self.shadow.layers, &params.layers) {
            (Layers::Linear { w, b }, Layers::Linear { w: pw, b: pb }) => {
                blend2(w, pw);
                blend1(b, pb);
            }
            (
                Layers::Mlp { w1, b1, w2, b2 },
                Layers::Mlp { w1: p1, b1: q1, w2: p2, b2: q2 },
            ) => {
                blend2(w1, p1);
                blend1(b1, q1);
                blend2(w2, p2);
                blend1(b2, q2);
            }
            _ => panic!("ema shadow architecture mismatch"),
        }
    }
}

/// Evaluation-time prediction: argmax of `softmax(f(x))` with no prior
/// added. Ties break toward the lowest class index.
pub fn predict_balanced(params: &ModelParams, x: &[f64]) -> Result<(usize, ProbVector)> {
    let logits = params.forward_single(x)?;
    let probs = crate::loss::softmax(&logits);
    Ok((argmax_slice(probs.values()), probs))
}
