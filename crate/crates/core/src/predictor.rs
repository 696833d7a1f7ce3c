//! The model being explained: a generic [`Predictor`] interface, a small ReLU
//! feed-forward network with an Adam trainer, and its JSON weight format.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::rng_from_seed;
use crate::scalar::Real;

pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("weight file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Deterministic map from a feature vector to a real output.
pub trait Predictor<T: Real>: Send + Sync {
    fn n_features(&self) -> usize;

    fn predict_row(&self, x: &[T]) -> T;

    fn predict(&self, x: ArrayView2<T>) -> Result<Vec<T>, PredictorError> {
        if x.ncols() != self.n_features() {
            return Err(PredictorError::ShapeMismatch(format!(
                "input has {} columns, model expects {}",
                x.ncols(),
                self.n_features()
            )));
        }
        let mut buf = vec![T::zero(); x.ncols()];
        Ok(x
            .rows()
            .into_iter()
            .map(|row| {
                for (b, &v) in buf.iter_mut().zip(row.iter()) {
                    *b = v;
                }
                self.predict_row(&buf)
            })
            .collect())
    }
}

impl<T: Real, P: Predictor<T> + ?Sized> Predictor<T> for Arc<P> {
    fn n_features(&self) -> usize {
        (**self).n_features()
    }

    fn predict_row(&self, x: &[T]) -> T {
        (**self).predict_row(x)
    }
}

impl<T: Real, P: Predictor<T> + ?Sized> Predictor<T> for &P {
    fn n_features(&self) -> usize {
        (**self).n_features()
    }

    fn predict_row(&self, x: &[T]) -> T {
        (**self).predict_row(x)
    }
}

/// `intercept + coefficients . x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPredictor<T> {
    pub coefficients: Vec<T>,
    pub intercept: T,
}

impl<T: Real> LinearPredictor<T> {
    pub fn new(coefficients: Vec<T>, intercept: T) -> Self {
        LinearPredictor {
            coefficients,
            intercept,
        }
    }
}

impl<T: Real> Predictor<T> for LinearPredictor<T> {
    fn n_features(&self) -> usize {
        self.coefficients.len()
    }

    fn predict_row(&self, x: &[T]) -> T {
        self.coefficients
            .iter()
            .zip(x)
            .fold(self.intercept, |acc, (&c, &v)| acc + c * v)
    }
}

/// Wraps a closure, e.g. an analytic test function.
pub struct FnPredictor<F> {
    n_features: usize,
    f: F,
}

impl<F> FnPredictor<F> {
    pub fn new(n_features: usize, f: F) -> Self {
        FnPredictor { n_features, f }
    }
}

impl<T: Real, F: Fn(&[T]) -> T + Send + Sync> Predictor<T> for FnPredictor<F> {
    fn n_features(&self) -> usize {
        self.n_features
    }

    fn predict_row(&self, x: &[T]) -> T {
        (self.f)(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::Identity => z,
        }
    }
}

/// How the last layer's outputs become the scalar prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Regression,
    /// Positive-class probability: sigmoid of one logit, or softmax over two.
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    /// `out x in`.
    pub weights: Array2<T>,
    pub bias: Array1<T>,
    pub activation: Activation,
}

/// Weight and bias gradients of one layer.
pub(crate) type LayerGrad<T> = (Array2<T>, Array1<T>);

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    layers: Vec<Layer<T>>,
    head: Head,
}

impl<T: Real> Mlp<T> {
    pub fn new(layers: Vec<Layer<T>>, head: Head) -> Result<Self, PredictorError> {
        if layers.is_empty() {
            return Err(PredictorError::ShapeMismatch("network has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weights.nrows() {
                return Err(PredictorError::ShapeMismatch(format!(
                    "layer {i}: {} biases for {} outputs",
                    l.bias.len(),
                    l.weights.nrows()
                )));
            }
            if i > 0 && layers[i - 1].weights.nrows() != l.weights.ncols() {
                return Err(PredictorError::ShapeMismatch(format!(
                    "layer {i} expects {} inputs, previous layer gives {}",
                    l.weights.ncols(),
                    layers[i - 1].weights.nrows()
                )));
            }
            if l.weights.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(PredictorError::ShapeMismatch(format!("layer {i} has non-finite parameters")));
            }
        }
        let out = layers.last().expect("non-empty").weights.nrows();
        let ok = match head {
            Head::Regression => out == 1,
            Head::Binary => out == 1 || out == 2,
        };
        if !ok {
            return Err(PredictorError::ShapeMismatch(format!(
                "{head:?} head cannot read {out} outputs"
            )));
        }
        Ok(Mlp { layers, head })
    }

    /// ReLU hidden layers, linear output layer, weights drawn uniformly in
    /// `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(n_inputs: usize, hidden: &[usize], n_outputs: usize, head: Head, seed: u64) -> Result<Self, PredictorError> {
        use rand::Rng;
        let mut rng = rng_from_seed(seed);
        let mut sizes = vec![n_inputs];
        sizes.extend_from_slice(hidden);
        sizes.push(n_outputs);
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weights: Array2::from_shape_fn((fan_out, fan_in), |_| T::lit(rng.gen_range(-limit..limit))),
                    bias: Array1::zeros(fan_out),
                    activation: if i + 2 == sizes.len() {
                        Activation::Identity
                    } else {
                        Activation::Relu
                    },
                }
            })
            .collect();
        Mlp::new(layers, head)
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Network on raw inputs equal to `self` applied to `(x - mean) / std`.
    pub fn fold_input_standardization(&self, mean: &[T], std: &[T]) -> Result<Self, PredictorError> {
        let first = &self.layers[0];
        if mean.len() != first.weights.ncols() || std.len() != mean.len() {
            return Err(PredictorError::ShapeMismatch(format!(
                "standardization for {} inputs, network reads {}",
                mean.len(),
                first.weights.ncols()
            )));
        }
        if std.iter().any(|s| !(*s > T::zero())) {
            return Err(PredictorError::InvalidConfig("standard deviations must be positive".into()));
        }
        let mut layers = self.layers.clone();
        let l = &mut layers[0];
        for (c, (&m, &s)) in mean.iter().zip(std).enumerate() {
            for r in 0..l.weights.nrows() {
                let w = l.weights[[r, c]] / s;
                l.weights[[r, c]] = w;
                l.bias[r] -= w * m;
            }
        }
        Mlp::new(layers, self.head)
    }

    pub fn head(&self) -> Head {
        self.head
    }

    fn read_head(&self, out: &[T]) -> T {
        match (self.head, out.len()) {
            (Head::Regression, _) => out[0],
            (Head::Binary, 1) => sigmoid(out[0]),
            (Head::Binary, _) => {
                let m = out[0].max(out[1]);
                let (a, b) = ((out[0] - m).exp(), (out[1] - m).exp());
                b / (a + b)
            }
        }
    }

    /// Mean loss and parameter gradients `(dW, db)` per layer on a batch.
    pub(crate) fn loss_and_gradient(&self, x: ArrayView2<T>, y: &[T], loss: Loss) -> (T, Vec<LayerGrad<T>>) {
        let n = T::from_usize_lossy(x.nrows());
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for l in &self.layers {
            let mut z = a.dot(&l.weights.t());
            z += &l.bias;
            let next = z.mapv(|v| l.activation.apply(v));
            inputs.push(a);
            pre.push(z);
            a = next;
        }
        let (value, mut delta) = loss.value_and_grad(&a, y, n);
        let mut grads = Vec::with_capacity(self.layers.len());
        for (li, l) in self.layers.iter().enumerate().rev() {
            if l.activation == Activation::Relu {
                delta.zip_mut_with(&pre[li], |d, &z| {
                    if z <= T::zero() {
                        *d = T::zero();
                    }
                });
            }
            let dw = delta.t().dot(&inputs[li]);
            let db = delta.sum_axis(Axis(0));
            let prev = delta.dot(&l.weights);
            grads.push((dw, db));
            delta = prev;
        }
        grads.reverse();
        (value, grads)
    }

    pub fn to_file(&self) -> WeightsFile {
        WeightsFile {
            version: WEIGHTS_VERSION,
            layers: self
                .layers
                .iter()
                .map(|l| LayerFile {
                    rows: l.weights.nrows(),
                    cols: l.weights.ncols(),
                    weights: l.weights.iter().map(|v| v.as_f64()).collect(),
                    bias: l.bias.iter().map(|v| v.as_f64()).collect(),
                    activation: l.activation,
                })
                .collect(),
            head: self.head,
        }
    }

    pub fn from_file(file: &WeightsFile) -> Result<Self, PredictorError> {
        if file.version != WEIGHTS_VERSION {
            return Err(PredictorError::Parse(format!(
                "unsupported weight file version {} (expected {WEIGHTS_VERSION})",
                file.version
            )));
        }
        let layers = file
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let weights = Array2::from_shape_vec((l.rows, l.cols), l.weights.iter().map(|&v| T::lit(v)).collect())
                    .map_err(|_| {
                        PredictorError::ShapeMismatch(format!(
                            "layer {i}: {} weights for a {}x{} matrix",
                            l.weights.len(),
                            l.rows,
                            l.cols
                        ))
                    })?;
                Ok(Layer {
                    weights,
                    bias: l.bias.iter().map(|&v| T::lit(v)).collect(),
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>, PredictorError>>()?;
        Mlp::new(layers, file.head)
    }

    pub fn save_weights(&self, path: &Path) -> Result<(), PredictorError> {
        let text = serde_json::to_string_pretty(&self.to_file()).expect("weights serialize");
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_weights(path: &Path) -> Result<Self, PredictorError> {
        let text = std::fs::read_to_string(path)?;
        let file: WeightsFile = serde_json::from_str(&text).map_err(|e| PredictorError::Parse(e.to_string()))?;
        Mlp::from_file(&file)
    }
}

impl<T: Real> Predictor<T> for Mlp<T> {
    fn n_features(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    fn predict_row(&self, x: &[T]) -> T {
        let mut a = x.to_vec();
        for l in &self.layers {
            a = l
                .weights
                .rows()
                .into_iter()
                .zip(l.bias.iter())
                .map(|(w, &b)| l.activation.apply(w.iter().zip(&a).fold(b, |acc, (&wi, &ai)| acc + wi * ai)))
                .collect();
        }
        self.read_head(&a)
    }
}

fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    SquaredError,
    CrossEntropy,
}

impl Loss {
    pub fn head(self) -> Head {
        match self {
            Loss::SquaredError => Head::Regression,
            Loss::CrossEntropy => Head::Binary,
        }
    }

    /// Mean loss over the batch and its gradient with respect to the logits.
    fn value_and_grad<T: Real>(self, logits: &Array2<T>, y: &[T], n: T) -> (T, Array2<T>) {
        let mut grad = Array2::zeros(logits.raw_dim());
        let mut total = T::zero();
        let two = T::lit(2.0);
        let eps = T::lit(1e-12);
        for (i, row) in logits.rows().into_iter().enumerate() {
            match (self, row.len()) {
                (Loss::SquaredError, _) => {
                    let r = row[0] - y[i];
                    total += r * r;
                    grad[[i, 0]] = two * r / n;
                }
                (Loss::CrossEntropy, 1) => {
                    let s = sigmoid(row[0]);
                    total -= y[i] * (s + eps).ln() + (T::one() - y[i]) * (T::one() - s + eps).ln();
                    grad[[i, 0]] = (s - y[i]) / n;
                }
                (Loss::CrossEntropy, _) => {
                    let m = row[0].max(row[1]);
                    let (a, b) = ((row[0] - m).exp(), (row[1] - m).exp());
                    let (p0, p1) = (a / (a + b), b / (a + b));
                    total -= y[i] * (p1 + eps).ln() + (T::one() - y[i]) * (p0 + eps).ln();
                    grad[[i, 0]] = (p0 - (T::one() - y[i])) / n;
                    grad[[i, 1]] = (p1 - y[i]) / n;
                }
            }
        }
        (total / n, grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub loss: Loss,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 3e-4,
            hidden: vec![256, 256],
            loss: Loss::SquaredError,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults for a binary classifier: cross-entropy with a larger step.
    pub fn classification() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            loss: Loss::CrossEntropy,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Mlp<T>,
    /// Full-data loss before the first step.
    pub initial_loss: T,
    /// Full-data loss after each epoch.
    pub epoch_losses: Vec<T>,
}

/// Minibatch Adam (beta1 0.9, beta2 0.999, eps 1e-8) on the configured loss.
pub fn train<T: Real>(x: ArrayView2<T>, y: &[T], cfg: &TrainConfig) -> Result<TrainOutcome<T>, PredictorError> {
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(PredictorError::InvalidConfig(
            "epochs, batch size and learning rate must be positive".into(),
        ));
    }
    if x.nrows() < 2 || x.nrows() != y.len() {
        return Err(PredictorError::ShapeMismatch(format!(
            "{} feature rows and {} targets (need at least 2)",
            x.nrows(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(PredictorError::InvalidConfig("training data contains non-finite values".into()));
    }
    let n_out = 1;
    let mut model = Mlp::init(x.ncols(), &cfg.hidden, n_out, cfg.loss.head(), cfg.seed)?;
    let (initial_loss, _) = model.loss_and_gradient(x, y, cfg.loss);
    if !initial_loss.is_finite() {
        return Err(PredictorError::NonFiniteLoss { epoch: 0 });
    }

    let (b1, b2, eps) = (T::lit(0.9), T::lit(0.999), T::lit(1e-8));
    let lr = T::lit(cfg.learning_rate);
    let mut m: Vec<LayerGrad<T>> = model
        .layers
        .iter()
        .map(|l| (Array2::zeros(l.weights.raw_dim()), Array1::zeros(l.bias.len())))
        .collect();
    let mut v = m.clone();
    let mut step = 0i32;
    let mut rng = rng_from_seed(cfg.seed ^ 0xA5A5_A5A5);
    let mut idx: Vec<usize> = (0..x.nrows()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<T> = chunk.iter().map(|&i| y[i]).collect();
            let (_, grads) = model.loss_and_gradient(xb.view(), &yb, cfg.loss);
            step += 1;
            let c1 = T::one() - b1.powi(step);
            let c2 = T::one() - b2.powi(step);
            for ((layer, (gw, gb)), ((mw, mb), (vw, vb))) in model
                .layers
                .iter_mut()
                .zip(&grads)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                adam_update(&mut layer.weights, gw, mw, vw, b1, b2, lr, c1, c2, eps);
                adam_update(&mut layer.bias, gb, mb, vb, b1, b2, lr, c1, c2, eps);
            }
        }
        let (loss, _) = model.loss_and_gradient(x, y, cfg.loss);
        if !loss.is_finite() {
            return Err(PredictorError::NonFiniteLoss { epoch });
        }
        epoch_losses.push(loss);
    }
    Ok(TrainOutcome {
        model,
        initial_loss,
        epoch_losses,
    })
}

#[allow(clippy::too_many_arguments)]
fn adam_update<T: Real, D: ndarray::Dimension>(
    param: &mut ndarray::Array<T, D>,
    grad: &ndarray::Array<T, D>,
    m: &mut ndarray::Array<T, D>,
    v: &mut ndarray::Array<T, D>,
    b1: T,
    b2: T,
    lr: T,
    c1: T,
    c2: T,
    eps: T,
) {
    ndarray::Zip::from(param).and(grad).and(m).and(v).for_each(|p, &g, m, v| {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p -= lr * mh / (vh.sqrt() + eps);
    });
}

pub fn rmse<T: Real>(pred: &[T], y: &[T]) -> T {
    let n = T::from_usize_lossy(pred.len().max(1));
    (pred.iter().zip(y).map(|(&p, &t)| (p - t) * (p - t)).sum::<T>() / n).sqrt()
}

/// Weight file layout, version 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub version: u32,
    pub layers: Vec<LayerFile>,
    pub head: Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFile {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `rows * cols` values.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}
