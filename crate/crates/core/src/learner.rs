//! Shallow supervised learners trained by weighted cross-entropy.
//!
//! One model type covers multinomial logistic regression and small tanh/ReLU
//! MLPs. It is used three ways: as the classifier being calibrated, as the
//! source-vs-target discriminator, and as the optimizer behind Platt scaling.
//!
//! Training minimizes
//!
//! ```text
//! (1 / Σw) Σ_i w_i · (−log p(y_i | x_i)) + l2 · Σ ‖W‖²
//! ```
//!
//! with full-batch gradient descent and step halving, so the recorded loss
//! trace never increases. Because the loss is normalized by `Σw`, rescaling
//! the weights does not change the trajectory.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

const MAX_HALVINGS: usize = 50;
// -ln(PROB_FLOOR)
const NLL_CAP: f64 = 27.631021115928547;
const INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            // libm tanh is several times slower; absolute error stays near 1e-16
            Activation::Tanh => 1.0 - 2.0 / ((2.0 * z).exp() + 1.0),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    Linear,
    Mlp {
        hidden_units: usize,
        #[serde(default = "one")]
        hidden_layers: usize,
        activation: Activation,
    },
}

impl Architecture {
    pub fn mlp(hidden_units: usize, activation: Activation) -> Self {
        Architecture::Mlp {
            hidden_units,
            hidden_layers: 1,
            activation,
        }
    }

    fn activation(&self) -> Option<Activation> {
        match self {
            Architecture::Linear => None,
            Architecture::Mlp { activation, .. } => Some(*activation),
        }
    }

    fn layer_sizes(&self, input_dim: usize, n_classes: usize) -> Vec<usize> {
        let mut sizes = vec![input_dim];
        if let Architecture::Mlp {
            hidden_units,
            hidden_layers,
            ..
        } = self
        {
            sizes.extend(std::iter::repeat_n(*hidden_units, *hidden_layers));
        }
        sizes.push(n_classes);
        sizes
    }
}

fn default_learning_rate() -> f64 {
    1.0
}

fn default_max_epochs() -> usize {
    500
}

fn default_tolerance() -> f64 {
    1e-9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    pub architecture: Architecture,
    #[serde(default)]
    pub l2_penalty: f64,
    /// Initial step of every full-batch epoch; the fixed step for mini-batches.
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// `None` means full-batch gradient descent with backtracking.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            architecture: Architecture::Linear,
            l2_penalty: 0.0,
            learning_rate: default_learning_rate(),
            max_epochs: default_max_epochs(),
            batch_size: None,
            tolerance: default_tolerance(),
            seed: 0,
        }
    }
}

impl LearnerConfig {
    /// Checks hyperparameter domains; `prefix` is the dotted path used in errors.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |name: &str| {
            if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}.{name}")
            }
        };
        if !(self.l2_penalty >= 0.0 && self.l2_penalty.is_finite()) {
            return Err(Error::config(
                field("l2_penalty"),
                "must be finite and >= 0",
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                field("learning_rate"),
                "must be finite and > 0",
            ));
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::config(field("tolerance"), "must be finite and > 0"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::config(field("batch_size"), "must be >= 1"));
        }
        if let Architecture::Mlp {
            hidden_units,
            hidden_layers,
            ..
        } = self.architecture
        {
            if hidden_units == 0 {
                return Err(Error::config(
                    field("architecture.hidden_units"),
                    "must be >= 1",
                ));
            }
            if hidden_layers == 0 {
                return Err(Error::config(
                    field("architecture.hidden_layers"),
                    "must be >= 1",
                ));
            }
        }
        Ok(())
    }
}

/// Dense layer computing `x · Wᵀ + b`; `weights` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Self {
        Layer {
            weights: Array2::zeros(self.weights.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }
}

/// Gradient of the training objective, shaped like the model's layers.
pub type Gradient = Vec<Layer>;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilisticModel {
    architecture: Architecture,
    layers: Vec<Layer>,
    n_classes: usize,
    input_dim: usize,
    /// Objective value at initialization followed by one entry per epoch.
    pub training_loss_trace: Vec<f64>,
}

struct ForwardPass {
    /// Input to each layer; `inputs[0]` is the feature matrix.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of hidden layers.
    pre_activations: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

impl ProbabilisticModel {
    /// Freshly initialized model: weights ~ N(0, 0.1²) from `seed`, biases 0.
    pub fn initialize(
        architecture: &Architecture,
        input_dim: usize,
        n_classes: usize,
        seed: u64,
    ) -> Self {
        let sizes = architecture.layer_sizes(input_dim, n_classes);
        let mut rng = rng::stream(seed, 0);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let layers = sizes
            .windows(2)
            .map(|pair| Layer {
                weights: Array2::from_shape_simple_fn((pair[1], pair[0]), || {
                    normal.sample(&mut rng)
                }),
                bias: Array1::zeros(pair[1]),
            })
            .collect();
        ProbabilisticModel {
            architecture: architecture.clone(),
            layers,
            n_classes,
            input_dim,
            training_loss_trace: Vec::new(),
        }
    }

    /// Softmax regression with the given `K × d` weights and `K` biases.
    pub fn linear(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::Shape(format!(
                "{} weight rows but {} biases",
                weights.nrows(),
                bias.len()
            )));
        }
        if weights.nrows() < 2 {
            return Err(Error::Shape("need at least 2 classes".into()));
        }
        Ok(ProbabilisticModel {
            architecture: Architecture::Linear,
            n_classes: weights.nrows(),
            input_dim: weights.ncols(),
            layers: vec![Layer { weights, bias }],
            training_loss_trace: Vec::new(),
        })
    }

    /// Assembles a model from explicit layers, checking that shapes chain.
    pub fn from_layers(architecture: Architecture, layers: Vec<Layer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Shape("model has no layers".into()))?;
        let input_dim = first.weights.ncols();
        let n_classes = layers.last().map(|l| l.weights.nrows()).unwrap_or(0);
        let expected = architecture.layer_sizes(input_dim, n_classes);
        let actual: Vec<usize> = std::iter::once(input_dim)
            .chain(layers.iter().map(|l| l.weights.nrows()))
            .collect();
        if expected != actual {
            return Err(Error::Shape(format!(
                "layer sizes {actual:?} do not match architecture (expected {expected:?})"
            )));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.weights.nrows() {
                return Err(Error::Shape(format!("layer {i}: bias length mismatch")));
            }
            if i > 0 && layer.weights.ncols() != layers[i - 1].weights.nrows() {
                return Err(Error::Shape(format!("layer {i}: input width mismatch")));
            }
        }
        if n_classes < 2 {
            return Err(Error::Shape("need at least 2 classes".into()));
        }
        Ok(ProbabilisticModel {
            architecture,
            layers,
            n_classes,
            input_dim,
            training_loss_trace: Vec::new(),
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim {
            return Err(Error::Shape(format!(
                "model expects {} features, got {}",
                self.input_dim,
                x.ncols()
            )));
        }
        Ok(())
    }

    fn forward(&self, x: ArrayView2<f64>) -> ForwardPass {
        let activation = self.architecture.activation();
        let last = self.layers.len() - 1;
        let mut inputs = vec![x.to_owned()];
        let mut pre_activations = Vec::with_capacity(last);
        for layer in &self.layers[..last] {
            let z = inputs.last().unwrap().dot(&layer.weights.t()) + &layer.bias;
            let act = activation.expect("hidden layers imply an activation");
            let a = z.mapv(|v| act.apply(v));
            pre_activations.push(z);
            inputs.push(a);
        }
        let logits =
            inputs.last().unwrap().dot(&self.layers[last].weights.t()) + &self.layers[last].bias;
        ForwardPass {
            inputs,
            pre_activations,
            logits,
        }
    }

    pub fn predict_logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        Ok(self.forward(x).logits)
    }

    /// Input to the output layer: the last hidden activations, or `x` itself
    /// for a linear model.
    pub fn penultimate_features(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut pass = self.forward(x);
        Ok(pass.inputs.pop().expect("at least the input layer"))
    }

    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let logits = self.predict_logits(x)?;
        softmax_rows(logits.view())
    }

    fn penalty(&self, l2: f64) -> f64 {
        if l2 == 0.0 {
            return 0.0;
        }
        l2 * self
            .layers
            .iter()
            .map(|l| l.weights.iter().map(|w| w * w).sum::<f64>())
            .sum::<f64>()
    }

    /// Objective for pre-normalized weights (`Σ weights = 1`).
    fn objective(&self, x: ArrayView2<f64>, labels: &[usize], weights: &[f64], l2: f64) -> f64 {
        let logits = self.forward(x).logits;
        let mut loss = 0.0;
        for ((row, &y), &w) in logits.outer_iter().zip(labels).zip(weights) {
            if w != 0.0 {
                loss += w * row_nll(row, y);
            }
        }
        loss + self.penalty(l2)
    }

    fn objective_and_gradient(
        &self,
        x: ArrayView2<f64>,
        labels: &[usize],
        weights: &[f64],
        l2: f64,
    ) -> (f64, Gradient) {
        let pass = self.forward(x);
        let mut delta = pass.logits.clone();
        let mut loss = 0.0;
        for ((mut row, &y), &w) in delta.outer_iter_mut().zip(labels).zip(weights) {
            let nll = row_nll(row.view(), y);
            if w != 0.0 {
                loss += w * nll;
            }
            if nll >= NLL_CAP {
                // clamped: the loss is flat here
                row.fill(0.0);
                continue;
            }
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            for (k, v) in row.iter_mut().enumerate() {
                let target = if k == y { 1.0 } else { 0.0 };
                *v = w * (*v / sum - target);
            }
        }
        loss += self.penalty(l2);

        let activation = self.architecture.activation();
        let mut grads: Vec<Layer> = self.layers.iter().map(Layer::zeros_like).collect();
        for l in (0..self.layers.len()).rev() {
            grads[l].weights = delta.t().dot(&pass.inputs[l]);
            grads[l].bias = delta.sum_axis(Axis(0));
            if l2 != 0.0 {
                grads[l]
                    .weights
                    .scaled_add(2.0 * l2, &self.layers[l].weights);
            }
            if l > 0 {
                let act = activation.expect("hidden layers imply an activation");
                let mut back = delta.dot(&self.layers[l].weights);
                ndarray::Zip::from(&mut back)
                    .and(&pass.pre_activations[l - 1])
                    .and(&pass.inputs[l])
                    .for_each(|b, &z, &a| *b *= act.derivative(z, a));
                delta = back;
            }
        }
        (loss, grads)
    }

    /// Weighted objective and its analytic gradient.
    ///
    /// `weights` are raw nonnegative weights; they are normalized by their sum.
    pub fn loss_and_gradient(
        &self,
        x: ArrayView2<f64>,
        labels: &[usize],
        weights: &[f64],
        l2_penalty: f64,
    ) -> Result<(f64, Gradient)> {
        self.check_input(x)?;
        check_labels(labels, x.nrows(), self.n_classes)?;
        let normalized = normalize_weights(weights, x.nrows())?;
        Ok(self.objective_and_gradient(x, labels, &normalized, l2_penalty))
    }

    /// All parameters flattened layer by layer: weights row-major, then bias.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend(layer.weights.iter().copied());
            out.extend(layer.bias.iter().copied());
        }
        out
    }

    /// Inverse of [`parameters`](Self::parameters).
    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        let total: usize = self
            .layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum();
        if values.len() != total {
            return Err(Error::Shape(format!(
                "expected {total} parameters, got {}",
                values.len()
            )));
        }
        let mut it = values.iter().copied();
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut() {
                *w = it.next().unwrap();
            }
            for b in layer.bias.iter_mut() {
                *b = it.next().unwrap();
            }
        }
        Ok(())
    }

    fn step(&mut self, gradient: &Gradient, step: f64) {
        for (layer, grad) in self.layers.iter_mut().zip(gradient) {
            layer.weights.scaled_add(-step, &grad.weights);
            layer.bias.scaled_add(-step, &grad.bias);
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&ModelFile::from(self))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text)?;
        file.try_into()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    architecture: Architecture,
    n_classes: usize,
    input_dim: usize,
    layers: Vec<LayerFile>,
    #[serde(default)]
    training_loss_trace: Vec<f64>,
}

impl From<&ProbabilisticModel> for ModelFile {
    fn from(model: &ProbabilisticModel) -> Self {
        ModelFile {
            architecture: model.architecture.clone(),
            n_classes: model.n_classes,
            input_dim: model.input_dim,
            layers: model
                .layers
                .iter()
                .map(|l| LayerFile {
                    rows: l.weights.nrows(),
                    cols: l.weights.ncols(),
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
            training_loss_trace: model.training_loss_trace.clone(),
        }
    }
}

impl TryFrom<ModelFile> for ProbabilisticModel {
    type Error = Error;

    fn try_from(file: ModelFile) -> Result<Self> {
        let layers = file
            .layers
            .into_iter()
            .map(|l| {
                let weights = Array2::from_shape_vec((l.rows, l.cols), l.weights)
                    .map_err(|e| Error::Shape(e.to_string()))?;
                Ok(Layer {
                    weights,
                    bias: Array1::from(l.bias),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut model = ProbabilisticModel::from_layers(file.architecture, layers)?;
        if model.n_classes != file.n_classes || model.input_dim != file.input_dim {
            return Err(Error::Shape(
                "declared dimensions disagree with layers".into(),
            ));
        }
        model.training_loss_trace = file.training_loss_trace;
        Ok(model)
    }
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    if z.is_empty() {
        return Err(Error::Empty("softmax input".into()));
    }
    Ok(softmax_unchecked(ArrayView1::from(z)).to_vec())
}

fn softmax_unchecked(z: ArrayView1<f64>) -> Array1<f64> {
    let max = z.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = z.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Result<Array2<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let mut out = logits.to_owned();
    for mut row in out.outer_iter_mut() {
        let p = softmax_unchecked(row.view());
        row.assign(&p);
    }
    Ok(out)
}

/// `−log softmax(z)[y]` via log-sum-exp, clamped like [`weighted_nll`].
fn row_nll(z: ArrayView1<f64>, y: usize) -> f64 {
    let max = z.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    (lse - z[y]).min(NLL_CAP)
}

pub(crate) fn check_labels(labels: &[usize], n: usize, n_classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {n} rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::Shape(format!(
            "label {bad} outside [0, {n_classes})"
        )));
    }
    Ok(())
}

/// Validates weights and divides them by their sum.
pub(crate) fn normalize_weights(weights: &[f64], n: usize) -> Result<Vec<f64>> {
    if weights.len() != n {
        return Err(Error::Shape(format!(
            "{} weights for {n} rows",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::DegenerateWeights(
            "weights must be finite and >= 0".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateWeights("weights sum to zero".into()));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// `(1/Σw) · Σ_i w_i · (−log max(p_i[y_i], 1e-12))`.
pub fn weighted_nll(probs: ArrayView2<f64>, labels: &[usize], weights: &[f64]) -> Result<f64> {
    check_labels(labels, probs.nrows(), probs.ncols())?;
    for (i, row) in probs.outer_iter().enumerate() {
        let s = row.sum();
        if !s.is_finite() || (s - 1.0).abs() > 1e-9 {
            return Err(Error::Shape(format!(
                "row {i} of probabilities sums to {s}"
            )));
        }
    }
    let normalized = normalize_weights(weights, probs.nrows())?;
    Ok(probs
        .outer_iter()
        .zip(labels)
        .zip(&normalized)
        .map(|((row, &y), &w)| w * -row[y].max(PROB_FLOOR).ln())
        .sum())
}

/// Per-sample `−log max(p_i[y_i], 1e-12)`.
pub fn per_sample_nll(probs: ArrayView2<f64>, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(labels, probs.nrows(), probs.ncols())?;
    Ok(probs
        .outer_iter()
        .zip(labels)
        .map(|(row, &y)| -row[y].max(PROB_FLOOR).ln())
        .collect())
}

/// Fits a freshly initialized model. `n_classes` defaults to `max(2, 1 + max(y))`.
pub fn fit(
    config: &LearnerConfig,
    x: ArrayView2<f64>,
    labels: &[usize],
    weights: Option<&[f64]>,
    n_classes: Option<usize>,
) -> Result<ProbabilisticModel> {
    config.validate("")?;
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::Empty("training features".into()));
    }
    let inferred = labels.iter().copied().max().map_or(2, |m| (m + 1).max(2));
    let k = n_classes.unwrap_or(inferred);
    let init = ProbabilisticModel::initialize(&config.architecture, x.ncols(), k, config.seed);
    train(init, config, x, labels, weights)
}

/// Continues training from `model`, replacing its loss trace.
pub fn train(
    mut model: ProbabilisticModel,
    config: &LearnerConfig,
    x: ArrayView2<f64>,
    labels: &[usize],
    weights: Option<&[f64]>,
) -> Result<ProbabilisticModel> {
    config.validate("")?;
    model.check_input(x)?;
    check_labels(labels, x.nrows(), model.n_classes)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training features".into()));
    }
    let ones;
    let raw = match weights {
        Some(w) => w,
        None => {
            ones = vec![1.0; x.nrows()];
            &ones
        }
    };
    let normalized = normalize_weights(raw, x.nrows())?;
    let l2 = config.l2_penalty;

    let mut loss = model.objective(x, labels, &normalized, l2);
    if !loss.is_finite() {
        return Err(Error::Optimization {
            epoch: 0,
            message: format!("initial loss is {loss}"),
        });
    }
    let mut trace = vec![loss];

    match config.batch_size {
        Some(b) if b < x.nrows() => {
            let mut rng = rng::stream(config.seed, 1);
            let mut order: Vec<usize> = (0..x.nrows()).collect();
            for epoch in 1..=config.max_epochs {
                order.shuffle(&mut rng);
                for chunk in order.chunks(b) {
                    let xb = x.select(Axis(0), chunk);
                    let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                    let wb: Vec<f64> = chunk.iter().map(|&i| raw[i]).collect();
                    let total: f64 = wb.iter().sum();
                    if total <= 0.0 {
                        continue;
                    }
                    let wb: Vec<f64> = wb.iter().map(|w| w / total).collect();
                    let (_, grad) = model.objective_and_gradient(xb.view(), &yb, &wb, l2);
                    model.step(&grad, config.learning_rate);
                }
                let new_loss = model.objective(x, labels, &normalized, l2);
                if !new_loss.is_finite() {
                    return Err(Error::Optimization {
                        epoch,
                        message: format!("loss became {new_loss}"),
                    });
                }
                let improvement = loss - new_loss;
                loss = new_loss;
                trace.push(loss);
                if improvement.abs() < config.tolerance {
                    break;
                }
            }
        }
        _ => {
            // each epoch starts from twice the last accepted step, capped at the learning rate
            let mut last_step = config.learning_rate;
            let (mut current, mut grad) = model.objective_and_gradient(x, labels, &normalized, l2);
            for _epoch in 1..=config.max_epochs {
                let mut step = (2.0 * last_step).min(config.learning_rate);
                let mut accepted = None;
                for _ in 0..MAX_HALVINGS {
                    let mut candidate = model.clone();
                    candidate.step(&grad, step);
                    let (candidate_loss, candidate_grad) =
                        candidate.objective_and_gradient(x, labels, &normalized, l2);
                    if candidate_loss.is_finite() && candidate_loss <= current {
                        last_step = step;
                        accepted = Some((candidate, candidate_loss, candidate_grad));
                        break;
                    }
                    step *= 0.5;
                }
                let Some((candidate, new_loss, new_grad)) = accepted else {
                    break;
                };
                model = candidate;
                let improvement = current - new_loss;
                current = new_loss;
                grad = new_grad;
                trace.push(current);
                if improvement < config.tolerance {
                    break;
                }
            }
        }
    }
    model.training_loss_trace = trace;
    Ok(model)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-15);
        let p = softmax(&[1f64.ln(), 3f64.ln()]).unwrap();
        assert_abs_diff_eq!(p[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.75, epsilon = 1e-15);
        assert!(matches!(
            softmax(&[f64::NAN, 0.0]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn weighted_nll_hand_case() {
        let probs = array![[0.5, 0.5], [0.25, 0.75]];
        let v = weighted_nll(probs.view(), &[0, 1], &[1.0, 3.0]).unwrap();
        let expected = (2f64.ln() + 3.0 * (4.0f64 / 3.0).ln()) / 4.0;
        assert_abs_diff_eq!(v, expected, epsilon = 1e-15);

        let mean = weighted_nll(probs.view(), &[0, 1], &[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(
            mean,
            (2f64.ln() + (4.0f64 / 3.0).ln()) / 2.0,
            epsilon = 1e-15
        );

        let scaled = weighted_nll(probs.view(), &[0, 1], &[7.0, 21.0]).unwrap();
        assert_abs_diff_eq!(scaled, v, epsilon = 1e-15);
    }

    #[test]
    fn weighted_nll_rejects_zero_weights() {
        let probs = array![[0.5, 0.5]];
        assert!(matches!(
            weighted_nll(probs.view(), &[0], &[0.0]),
            Err(Error::DegenerateWeights(_))
        ));
    }

    #[test]
    fn weighted_nll_clamps_zero_probability() {
        let probs = array![[1.0, 0.0]];
        let v = weighted_nll(probs.view(), &[1], &[1.0]).unwrap();
        assert_abs_diff_eq!(v, -PROB_FLOOR.ln(), epsilon = 1e-12);
    }

    #[test]
    fn zero_weight_linear_model_is_uniform() {
        let model = ProbabilisticModel::linear(Array2::zeros((3, 2)), Array1::zeros(3)).unwrap();
        let p = model
            .predict_proba(array![[1.0, -2.0], [5.0, 3.0]].view())
            .unwrap();
        for v in p.iter() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn hand_set_linear_weights() {
        let model =
            ProbabilisticModel::linear(array![[1.0, 0.0], [0.0, 2.0]], array![0.5, -0.5]).unwrap();
        let p = model.predict_proba(array![[1.0, 1.0]].view()).unwrap();
        // logits: [1.5, 1.5] -> uniform
        assert_abs_diff_eq!(p[[0, 0]], 0.5, epsilon = 1e-15);
        let p = model.predict_proba(array![[2.0, 0.0]].view()).unwrap();
        // logits: [2.5, -0.5]
        let e = (3.0f64).exp();
        assert_abs_diff_eq!(p[[0, 0]], e / (e + 1.0), epsilon = 1e-15);
    }

    #[test]
    fn shape_errors() {
        let model = ProbabilisticModel::linear(Array2::zeros((2, 3)), Array1::zeros(2)).unwrap();
        assert!(matches!(
            model.predict_logits(Array2::zeros((1, 2)).view()),
            Err(Error::Shape(_))
        ));
        assert!(ProbabilisticModel::linear(Array2::zeros((2, 3)), Array1::zeros(3)).is_err());
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let config = LearnerConfig {
            architecture: Architecture::mlp(4, Activation::Tanh),
            max_epochs: 0,
            seed: 9,
            ..LearnerConfig::default()
        };
        let x = array![[0.0, 1.0], [1.0, 0.0], [2.0, 2.0]];
        let model = fit(&config, x.view(), &[0, 1, 1], None, None).unwrap();
        let init = ProbabilisticModel::initialize(&config.architecture, 2, 2, 9);
        assert_eq!(model.parameters(), init.parameters());
        assert_eq!(model.training_loss_trace.len(), 1);
        assert!(model.predict_proba(x.view()).is_ok());
    }

    #[test]
    fn separable_data_reaches_full_accuracy() {
        let x = array![
            [-2.0, -1.0],
            [-1.5, -2.0],
            [-1.0, -0.5],
            [1.0, 0.5],
            [1.5, 2.0],
            [2.0, 1.0]
        ];
        let y = [0, 0, 0, 1, 1, 1];
        let model = fit(&LearnerConfig::default(), x.view(), &y, None, None).unwrap();
        let p = model.predict_proba(x.view()).unwrap();
        for (row, &label) in p.outer_iter().zip(&y) {
            assert_eq!(argmax(row), label);
        }
    }

    #[test]
    fn full_batch_trace_is_monotone() {
        let x = array![[0.0, 1.0], [1.0, 0.2], [0.3, 0.3], [2.0, -1.0], [-1.0, 0.5]];
        let y = [0, 1, 0, 1, 0];
        let config = LearnerConfig {
            architecture: Architecture::mlp(5, Activation::Relu),
            learning_rate: 10.0,
            max_epochs: 200,
            l2_penalty: 1e-3,
            seed: 4,
            ..LearnerConfig::default()
        };
        let model = fit(
            &config,
            x.view(),
            &y,
            Some(&[1.0, 2.0, 0.5, 1.0, 3.0]),
            None,
        )
        .unwrap();
        for pair in model.training_loss_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "{pair:?}");
        }
    }

    #[test]
    fn mini_batch_training_is_seeded() {
        let x = array![[0.0, 1.0], [1.0, 0.2], [0.3, 0.3], [2.0, -1.0], [-1.0, 0.5]];
        let y = [0, 1, 0, 1, 0];
        let config = LearnerConfig {
            batch_size: Some(2),
            learning_rate: 0.1,
            max_epochs: 20,
            seed: 3,
            ..LearnerConfig::default()
        };
        let a = fit(&config, x.view(), &y, None, None).unwrap();
        let b = fit(&config, x.view(), &y, None, None).unwrap();
        assert_eq!(a.parameters(), b.parameters());
    }

    #[test]
    fn non_finite_features_are_rejected() {
        let x = array![[0.0, f64::INFINITY], [1.0, 0.0]];
        assert!(fit(&LearnerConfig::default(), x.view(), &[0, 1], None, None).is_err());
    }

    #[test]
    fn config_validation_names_the_field() {
        let config = LearnerConfig {
            learning_rate: -1.0,
            ..LearnerConfig::default()
        };
        let err = config.validate("classifier").unwrap_err();
        assert!(
            err.to_string().contains("classifier.learning_rate"),
            "{err}"
        );
    }

    #[test]
    fn json_round_trip_is_exact() {
        let config = LearnerConfig {
            architecture: Architecture::Mlp {
                hidden_units: 3,
                hidden_layers: 2,
                activation: Activation::Tanh,
            },
            max_epochs: 5,
            seed: 1,
            ..LearnerConfig::default()
        };
        let x = array![[0.1, 0.7], [0.9, -0.4], [0.3, 0.3]];
        let model = fit(&config, x.view(), &[0, 1, 2], None, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save_json(&path).unwrap();
        let loaded = ProbabilisticModel::load_json(&path).unwrap();
        assert_eq!(loaded, model);
    }

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(argmax(array![0.5, 0.5].view()), 0);
        assert_eq!(argmax(array![0.2, 0.4, 0.4].view()), 1);
    }
}
