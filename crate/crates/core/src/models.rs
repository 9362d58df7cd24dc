//! Softmax models over flat parameter vectors, cross-entropy loss with its
//! analytic gradient, and local mini-batch SGD.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledExample;
use crate::error::{Error, Result};
use crate::params::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Multinomial logistic regression.
    Mlr,
    /// One hidden ReLU layer.
    Mlp,
}

/// Architecture plus initialization of a model.
///
/// Parameter layout, row-major throughout:
/// MLR `[W (C x d), b (C)]`; MLP `[W1 (h x d), b1 (h), W2 (C x h), b2 (C)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    pub hidden_dim: usize,
    pub init_scale: f64,
    /// Start from the zero vector instead of `N(0, init_scale^2)`.
    pub zero_init: bool,
}

impl ModelSpec {
    pub fn mlr(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlr,
            input_dim,
            num_classes,
            hidden_dim: 0,
            init_scale: 0.01,
            zero_init: false,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_dim,
            num_classes,
            hidden_dim,
            init_scale: 0.01,
            zero_init: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim", "must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes", "must be at least 2"));
        }
        if self.kind == ModelKind::Mlp && self.hidden_dim == 0 {
            return Err(Error::invalid("hidden_dim", "an MLP needs at least 1 hidden unit"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::invalid("init_scale", "must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let (d, c, h) = (self.input_dim, self.num_classes, self.hidden_dim);
        match self.kind {
            ModelKind::Mlr => c * d + c,
            ModelKind::Mlp => h * d + h + c * h + c,
        }
    }

    /// Named ranges of the flat parameter vector.
    pub fn layout(&self) -> Vec<(&'static str, Range<usize>)> {
        let (d, c, h) = (self.input_dim, self.num_classes, self.hidden_dim);
        match self.kind {
            ModelKind::Mlr => vec![("weights", 0..c * d), ("bias", c * d..c * d + c)],
            ModelKind::Mlp => {
                let w1 = h * d;
                let b1 = w1 + h;
                let w2 = b1 + c * h;
                vec![
                    ("hidden.weights", 0..w1),
                    ("hidden.bias", w1..b1),
                    ("output.weights", b1..w2),
                    ("output.bias", w2..w2 + c),
                ]
            }
        }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamVector> {
        self.validate()?;
        if self.zero_init || self.init_scale == 0.0 {
            return Ok(ParamVector::zeros(self.num_params()));
        }
        let normal = Normal::new(0.0, self.init_scale)
            .map_err(|e| Error::invalid("init_scale", e.to_string()))?;
        Ok(ParamVector::from_vec(
            (0..self.num_params()).map(|_| normal.sample(rng)).collect(),
        ))
    }

    fn check(&self, w: &ParamVector) -> Result<()> {
        w.check_len(self.num_params())
    }

    fn check_example(&self, x: &[f64], label: Option<usize>) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        if let Some(label) = label {
            if label >= self.num_classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    num_classes: self.num_classes,
                });
            }
        }
        Ok(())
    }

    /// Logits into `out`; for an MLP the hidden activations go to `hidden`.
    fn forward(&self, w: &[f64], x: &[f64], hidden: &mut Vec<f64>, out: &mut [f64]) {
        let (d, c, h) = (self.input_dim, self.num_classes, self.hidden_dim);
        match self.kind {
            ModelKind::Mlr => affine(&w[..c * d], &w[c * d..c * d + c], x, out),
            ModelKind::Mlp => {
                hidden.resize(h, 0.0);
                let w1 = h * d;
                let b1 = w1 + h;
                let w2 = b1 + c * h;
                affine(&w[..w1], &w[w1..b1], x, hidden);
                for a in hidden.iter_mut() {
                    *a = a.max(0.0);
                }
                affine(&w[b1..w2], &w[w2..w2 + c], hidden, out);
            }
        }
    }
}

/// `out = W x + b` for row-major `W`.
fn affine(weights: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for ((o, b), row) in out.iter_mut().zip(bias).zip(weights.chunks_exact(n)) {
        *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
    }
}

/// `log Σ exp(z)` with max subtraction.
fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Softmax of `z` in place.
fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    for v in z.iter_mut() {
        *v /= total;
    }
}

/// Class probabilities for one feature vector.
pub fn predict_proba(spec: &ModelSpec, w: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    spec.check(w)?;
    spec.check_example(x, None)?;
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("input features"));
    }
    let mut logits = vec![0.0; spec.num_classes];
    spec.forward(w.as_slice(), x, &mut Vec::new(), &mut logits);
    softmax_in_place(&mut logits);
    Ok(logits)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy of `batch` and its exact gradient.
pub fn loss_and_gradient(
    spec: &ModelSpec,
    w: &ParamVector,
    batch: &[LabeledExample],
) -> Result<(f64, ParamVector)> {
    let mut grad = ParamVector::zeros(spec.num_params());
    let loss = accumulate(spec, w, batch, Some(grad.as_mut_slice()), None)?;
    let scale = 1.0 / batch.len() as f64;
    for g in grad.as_mut_slice() {
        *g *= scale;
    }
    Ok((loss, grad))
}

/// Mean cross-entropy of `data`.
pub fn mean_loss(spec: &ModelSpec, w: &ParamVector, data: &[LabeledExample]) -> Result<f64> {
    accumulate(spec, w, data, None, None)
}

/// Walks `data` once, returning the mean loss. Optionally accumulates the
/// summed (not averaged) gradient and the number of argmax hits.
fn accumulate(
    spec: &ModelSpec,
    w: &ParamVector,
    data: &[LabeledExample],
    mut grad: Option<&mut [f64]>,
    mut correct: Option<&mut usize>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("batch"));
    }
    spec.check(w)?;
    let w = w.as_slice();
    let (d, c, h) = (spec.input_dim, spec.num_classes, spec.hidden_dim);
    let mut logits = vec![0.0; c];
    let mut hidden = Vec::with_capacity(h);
    let mut back = vec![0.0; h];
    let mut total = 0.0;
    for ex in data {
        spec.check_example(&ex.features, Some(ex.label))?;
        let x = &ex.features;
        spec.forward(w, x, &mut hidden, &mut logits);
        if let Some(hits) = correct.as_deref_mut() {
            if argmax(&logits) == ex.label {
                *hits += 1;
            }
        }
        total += log_sum_exp(&logits) - logits[ex.label];
        let Some(g) = grad.as_deref_mut() else {
            continue;
        };
        // d loss / d logits = softmax - onehot
        softmax_in_place(&mut logits);
        logits[ex.label] -= 1.0;
        match spec.kind {
            ModelKind::Mlr => {
                let (gw, gb) = g.split_at_mut(c * d);
                for (k, dz) in logits.iter().enumerate() {
                    gb[k] += dz;
                    for (gv, xv) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *gv += dz * xv;
                    }
                }
            }
            ModelKind::Mlp => {
                let w1 = h * d;
                let b1 = w1 + h;
                let w2 = b1 + c * h;
                back.iter_mut().for_each(|v| *v = 0.0);
                for (k, dz) in logits.iter().enumerate() {
                    g[w2 + k] += dz;
                    let row = &w[b1 + k * h..b1 + (k + 1) * h];
                    for j in 0..h {
                        g[b1 + k * h + j] += dz * hidden[j];
                        back[j] += dz * row[j];
                    }
                }
                for j in 0..h {
                    // ReLU subgradient is 0 at 0.
                    if hidden[j] <= 0.0 {
                        continue;
                    }
                    let dz = back[j];
                    g[w1 + j] += dz;
                    for (gv, xv) in g[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *gv += dz * xv;
                    }
                }
            }
        }
    }
    let loss = total / data.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(loss)
}

/// Loss and argmax accuracy on a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

pub fn evaluate(spec: &ModelSpec, w: &ParamVector, data: &[LabeledExample]) -> Result<Evaluation> {
    let mut hits = 0usize;
    let loss = accumulate(spec, w, data, None, Some(&mut hits))?;
    Ok(Evaluation {
        loss,
        accuracy: hits as f64 / data.len() as f64,
    })
}

/// Local training schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Local steps per round for `n` training samples: `ceil(n / B) * E`.
    pub fn local_steps(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size) * self.epochs
    }
}

/// Runs `steps` mini-batch SGD steps from `start`. Each pass over `data`
/// starts with a fresh shuffle; the last batch of a pass may be short.
pub fn sgd_steps<R: Rng + ?Sized>(
    spec: &ModelSpec,
    start: &ParamVector,
    data: &[LabeledExample],
    batch_size: usize,
    learning_rate: f64,
    steps: usize,
    rng: &mut R,
) -> Result<ParamVector> {
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch_size", "must be at least 1"));
    }
    let mut w = start.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch: Vec<LabeledExample> = Vec::with_capacity(batch_size);
    let mut done = 0;
    while done < steps {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            if done == steps {
                break;
            }
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data[i].clone()));
            let (_, g) = loss_and_gradient(spec, &w, &batch)?;
            w.add_scaled(-learning_rate, &g);
            done += 1;
        }
    }
    Ok(w)
}

/// Result of a node's local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    /// `local - global`
    pub delta: ParamVector,
    pub local: ParamVector,
}

/// `E` epochs of mini-batch SGD from the global model.
pub fn local_train<R: Rng + ?Sized>(
    spec: &ModelSpec,
    global: &ParamVector,
    data: &[LabeledExample],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<LocalUpdate> {
    cfg.validate()?;
    spec.check(global)?;
    let steps = cfg.local_steps(data.len());
    let local = sgd_steps(
        spec,
        global,
        data,
        cfg.batch_size,
        cfg.learning_rate,
        steps,
        rng,
    )?;
    Ok(LocalUpdate {
        delta: local.sub(global),
        local,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};

    fn ex(features: Vec<f64>, label: usize) -> LabeledExample {
        LabeledExample { features, label }
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(ModelSpec::mlr(60, 10).num_params(), 610);
        assert_eq!(ModelSpec::mlp(4, 3, 2).num_params(), 3 * 4 + 3 + 2 * 3 + 2);
        let layout = ModelSpec::mlp(4, 3, 2).layout();
        assert_eq!(layout.last().unwrap().1.end, 23);
    }

    #[test]
    fn zero_weights_predict_uniform() {
        let spec = ModelSpec::mlr(3, 4);
        let p = predict_proba(&spec, &ParamVector::zeros(16), &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(p, vec![0.25; 4]);
    }

    #[test]
    fn softmax_closed_form_and_shift_invariance() {
        // Bias-only MLR: logits are the bias.
        let spec = ModelSpec::mlr(1, 2);
        let w = ParamVector::from_vec(vec![0.0, 0.0, 0.0, 3f64.ln()]);
        let p = predict_proba(&spec, &w, &[0.0]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        let shifted = ParamVector::from_vec(vec![0.0, 0.0, 7.0, 3f64.ln() + 7.0]);
        let q = predict_proba(&spec, &shifted, &[0.0]).unwrap();
        assert!((p[0] - q[0]).abs() < 1e-15 && (p[1] - q[1]).abs() < 1e-15);
    }

    #[test]
    fn huge_logits_do_not_overflow() {
        let spec = ModelSpec::mlr(1, 3);
        let w = ParamVector::from_vec(vec![0.0, 0.0, 0.0, 1e308, 0.0, -1e308]);
        let p = predict_proba(&spec, &w, &[0.0]).unwrap();
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
        let (loss, g) = loss_and_gradient(&spec, &w, &[ex(vec![0.0], 0)]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.is_finite());
        // A loss that truly overflows is reported, not returned as inf/NaN.
        assert!(matches!(
            loss_and_gradient(&spec, &w, &[ex(vec![0.0], 2)]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn rejects_non_finite_features() {
        let spec = ModelSpec::mlr(2, 2);
        assert!(matches!(
            predict_proba(&spec, &ParamVector::zeros(6), &[f64::NAN, 0.0]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn uniform_loss_is_ln_c() {
        let spec = ModelSpec::mlr(2, 10);
        let batch = vec![ex(vec![1.0, 2.0], 3), ex(vec![-1.0, 0.5], 9)];
        let (loss, _) = loss_and_gradient(&spec, &ParamVector::zeros(30), &batch).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_has_zero_loss_and_gradient() {
        let spec = ModelSpec::mlr(1, 2);
        let w = ParamVector::from_vec(vec![0.0, 0.0, 800.0, 0.0]);
        let (loss, g) = loss_and_gradient(&spec, &w, &[ex(vec![1.0], 0)]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn accuracy_counts_and_tie_break() {
        let spec = ModelSpec::mlr(1, 2);
        let zero = ParamVector::zeros(4);
        let data = vec![
            ex(vec![1.0], 0),
            ex(vec![1.0], 1),
            ex(vec![2.0], 0),
            ex(vec![3.0], 1),
        ];
        assert_eq!(evaluate(&spec, &zero, &data).unwrap().accuracy, 0.5);
        // Weight on class 1 for positive x: everything predicted 1 except
        // the tie at x = 0.
        let w = ParamVector::from_vec(vec![0.0, 1.0, 0.0, 0.0]);
        let data = vec![
            ex(vec![1.0], 1),
            ex(vec![2.0], 1),
            ex(vec![0.0], 0),
            ex(vec![3.0], 0),
        ];
        let e = evaluate(&spec, &w, &data).unwrap();
        assert_eq!(e.accuracy, 0.75);
        let (loss, _) = loss_and_gradient(&spec, &w, &data).unwrap();
        assert!((e.loss - loss).abs() <= 1e-12);
        assert!(matches!(evaluate(&spec, &w, &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn zero_rate_gives_zero_update() {
        let spec = ModelSpec::mlr(2, 3);
        let mut rng = substream(3, Stream::Train, 0, 0);
        let w = spec.init_params(&mut rng).unwrap();
        let data: Vec<_> = (0..7).map(|i| ex(vec![i as f64, 1.0], i % 3)).collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            learning_rate: 0.0,
        };
        let up = local_train(&spec, &w, &data, &cfg, &mut rng).unwrap();
        assert!(up.delta.as_slice().iter().all(|v| *v == 0.0));
        assert_eq!(up.local, w);
    }

    #[test]
    fn steps_per_round_keep_short_batch() {
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 20,
            learning_rate: 0.01,
        };
        assert_eq!(cfg.local_steps(160), 24);
        assert_eq!(cfg.local_steps(161), 27);
    }
}
