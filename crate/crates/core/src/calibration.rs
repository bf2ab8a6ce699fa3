//! Post-hoc calibrators fit by minimizing a weighted calibration loss.
//!
//! With weights `w(x) = target(x) / source(x)`, the weighted loss on labeled
//! source data estimates the loss on the target domain, so each calibrator
//! below can be pointed at a shifted domain without target labels. Uniform
//! weights give the usual source-only fit.
//!
//! All calibrators consume classifier logits:
//!
//! - Platt: `softmax(W·z + b)` with a full `K × K` matrix, fit by weighted NLL.
//!   May change predictions.
//! - Temperature: `softmax(z / T)`, fit by golden-section search on `log T`.
//!   Never changes predictions.
//! - Isotonic: a monotone step function of `P(Y = 1)` for two classes, or of
//!   the top-label confidence otherwise, fit by weighted pool-adjacent-violators.

use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{
    self, argmax, check_labels, normalize_weights, Architecture, LearnerConfig, ProbabilisticModel,
};

pub const TEMPERATURE_MIN: f64 = 1e-2;
pub const TEMPERATURE_MAX: f64 = 1e2;
const GOLDEN_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibratorType {
    Platt,
    Temperature,
    Isotonic,
}

impl CalibratorType {
    pub fn as_str(&self) -> &'static str {
        match self {
            CalibratorType::Platt => "platt",
            CalibratorType::Temperature => "temperature",
            CalibratorType::Isotonic => "isotonic",
        }
    }
}

impl fmt::Display for CalibratorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CalibratorType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "platt" => Ok(CalibratorType::Platt),
            "temperature" => Ok(CalibratorType::Temperature),
            "isotonic" => Ok(CalibratorType::Isotonic),
            _ => Err(Error::config(
                "calibrator",
                format!("unknown calibrator `{s}`"),
            )),
        }
    }
}

/// What the isotonic map is a function of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsotonicInput {
    /// `P(Y = 1)` of a two-class model.
    PositiveClass,
    /// Largest class probability; the remaining mass is rescaled proportionally.
    TopLabel,
}

/// Non-decreasing step function: `value[i]` on `[breakpoint[i], breakpoint[i+1])`,
/// and `value[0]` below the first breakpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
}

impl StepFunction {
    pub fn eval(&self, s: f64) -> f64 {
        let idx = self.breakpoints.partition_point(|&b| b <= s);
        self.values[idx.saturating_sub(1)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CalibratorKind {
    Platt {
        /// Row-major `K × K`.
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
    Temperature {
        temperature: f64,
    },
    Isotonic {
        n_classes: usize,
        input: IsotonicInput,
        map: StepFunction,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsUsed {
    None,
    Uniform,
    Importance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub weights_used: WeightsUsed,
    pub n_fit: usize,
    pub final_loss: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibrator {
    pub kind: CalibratorKind,
    pub fit_record: FitRecord,
}

fn unfitted(kind: CalibratorKind) -> Calibrator {
    Calibrator {
        kind,
        fit_record: FitRecord {
            weights_used: WeightsUsed::None,
            n_fit: 0,
            final_loss: 0.0,
            warnings: Vec::new(),
        },
    }
}

fn weights_used(weights: &[f64]) -> WeightsUsed {
    if weights.windows(2).all(|p| p[0] == p[1]) {
        WeightsUsed::Uniform
    } else {
        WeightsUsed::Importance
    }
}

impl Calibrator {
    pub fn temperature(t: f64) -> Result<Self> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::config("temperature", "must be finite and > 0"));
        }
        Ok(unfitted(CalibratorKind::Temperature { temperature: t }))
    }

    pub fn platt(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        let k = bias.len();
        if weights.dim() != (k, k) {
            return Err(Error::Shape(format!("Platt matrix must be {k}x{k}")));
        }
        Ok(unfitted(CalibratorKind::Platt {
            weights: weights.outer_iter().map(|r| r.to_vec()).collect(),
            bias: bias.to_vec(),
        }))
    }

    pub fn calibrator_type(&self) -> CalibratorType {
        match self.kind {
            CalibratorKind::Platt { .. } => CalibratorType::Platt,
            CalibratorKind::Temperature { .. } => CalibratorType::Temperature,
            CalibratorKind::Isotonic { .. } => CalibratorType::Isotonic,
        }
    }

    /// Calibrated probabilities for a matrix of classifier logits.
    pub fn apply(&self, logits: ArrayView2<f64>) -> Result<Array2<f64>> {
        match &self.kind {
            CalibratorKind::Platt { weights, bias } => {
                let k = bias.len();
                if logits.ncols() != k {
                    return Err(Error::Shape(format!(
                        "Platt map expects {k} logits, got {}",
                        logits.ncols()
                    )));
                }
                let w = Array2::from_shape_fn((k, k), |(i, j)| weights[i][j]);
                let z = logits.dot(&w.t()) + &Array1::from(bias.clone());
                learner::softmax_rows(z.view())
            }
            CalibratorKind::Temperature { temperature } => {
                learner::softmax_rows((&logits / *temperature).view())
            }
            CalibratorKind::Isotonic {
                n_classes,
                input,
                map,
            } => {
                if logits.ncols() != *n_classes {
                    return Err(Error::Shape(format!(
                        "isotonic map expects {n_classes} classes, got {}",
                        logits.ncols()
                    )));
                }
                let mut probs = learner::softmax_rows(logits)?;
                for mut row in probs.outer_iter_mut() {
                    match input {
                        IsotonicInput::PositiveClass => {
                            let p = map.eval(row[1]);
                            row[1] = p;
                            row[0] = 1.0 - p;
                        }
                        IsotonicInput::TopLabel => {
                            let top = argmax(row.view());
                            let conf = row[top];
                            let new_conf = map.eval(conf);
                            let rest = 1.0 - conf;
                            let others = (row.len() - 1) as f64;
                            for (k, v) in row.iter_mut().enumerate() {
                                if k == top {
                                    *v = new_conf;
                                } else if rest > 0.0 {
                                    *v *= (1.0 - new_conf) / rest;
                                } else {
                                    *v = (1.0 - new_conf) / others;
                                }
                            }
                        }
                    }
                }
                Ok(probs)
            }
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn check_inputs(logits: ArrayView2<f64>, labels: &[usize], weights: &[f64]) -> Result<Vec<f64>> {
    if logits.nrows() == 0 {
        return Err(Error::Empty("calibration set".into()));
    }
    if logits.ncols() < 2 {
        return Err(Error::Shape("need at least 2 classes".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    check_labels(labels, logits.nrows(), logits.ncols())?;
    normalize_weights(weights, logits.nrows())
}

/// Optimizer settings for [`fit_platt`].
pub fn platt_learner_config() -> LearnerConfig {
    LearnerConfig {
        architecture: Architecture::Linear,
        l2_penalty: 0.0,
        learning_rate: 1.0,
        max_epochs: 2000,
        batch_size: None,
        tolerance: 1e-12,
        seed: 0,
    }
}

/// Matrix scaling on logits, started from the identity map.
pub fn fit_platt(logits: ArrayView2<f64>, labels: &[usize], weights: &[f64]) -> Result<Calibrator> {
    fit_platt_with(logits, labels, weights, &platt_learner_config())
}

pub fn fit_platt_with(
    logits: ArrayView2<f64>,
    labels: &[usize],
    weights: &[f64],
    config: &LearnerConfig,
) -> Result<Calibrator> {
    check_inputs(logits, labels, weights)?;
    let k = logits.ncols();
    let init = ProbabilisticModel::linear(Array2::eye(k), Array1::zeros(k))?;
    let model = learner::train(init, config, logits, labels, Some(weights))?;
    let layer = &model.layers()[0];
    let mut cal = Calibrator::platt(layer.weights.clone(), layer.bias.clone())?;
    cal.fit_record = FitRecord {
        weights_used: weights_used(weights),
        n_fit: logits.nrows(),
        final_loss: *model
            .training_loss_trace
            .last()
            .expect("trace has the initial loss"),
        warnings: Vec::new(),
    };
    Ok(cal)
}

/// Weighted NLL of `softmax(z / T)` for normalized weights.
fn temperature_loss(logits: ArrayView2<f64>, labels: &[usize], weights: &[f64], t: f64) -> f64 {
    logits
        .outer_iter()
        .zip(labels)
        .zip(weights)
        .map(|((row, &y), &w)| {
            if w == 0.0 {
                return 0.0;
            }
            let scaled = row.mapv(|z| z / t);
            w * scaled_nll(scaled.view(), y)
        })
        .sum()
}

fn scaled_nll(z: ArrayView1<f64>, y: usize) -> f64 {
    let max = z.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    (lse - z[y]).min(-learner::PROB_FLOOR.ln())
}

/// Golden-section minimization of a unimodal function on `[lo, hi]`.
pub fn golden_section<F: FnMut(f64) -> f64>(
    mut f: F,
    mut lo: f64,
    mut hi: f64,
    tolerance: f64,
) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    while hi - lo > tolerance {
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Single temperature minimizing the weighted NLL over `T ∈ [1e-2, 1e2]`.
pub fn fit_temperature(
    logits: ArrayView2<f64>,
    labels: &[usize],
    weights: &[f64],
) -> Result<Calibrator> {
    let normalized = check_inputs(logits, labels, weights)?;
    let (lo, hi) = (TEMPERATURE_MIN.ln(), TEMPERATURE_MAX.ln());
    let log_t = golden_section(
        |u| temperature_loss(logits, labels, &normalized, u.exp()),
        lo,
        hi,
        GOLDEN_TOLERANCE,
    );
    let t = log_t.exp();
    let mut warnings = Vec::new();
    if log_t - lo < 1e-3 || hi - log_t < 1e-3 {
        let message = format!("temperature {t} hit the search interval boundary");
        log::debug!("{message}");
        warnings.push(message);
    }
    Ok(Calibrator {
        kind: CalibratorKind::Temperature { temperature: t },
        fit_record: FitRecord {
            weights_used: weights_used(weights),
            n_fit: logits.nrows(),
            final_loss: temperature_loss(logits, labels, &normalized, t),
            warnings,
        },
    })
}

/// Weighted isotonic regression by pool-adjacent-violators.
///
/// Minimizes `Σ w_i (g(s_i) − c_i)²` over non-decreasing `g`. Equal scores are
/// pooled first; zero-weight points do not constrain the fit.
pub fn fit_isotonic(scores: &[f64], correctness: &[f64], weights: &[f64]) -> Result<StepFunction> {
    if scores.is_empty() {
        return Err(Error::Empty("isotonic regression input".into()));
    }
    if correctness.len() != scores.len() || weights.len() != scores.len() {
        return Err(Error::Shape(
            "scores, targets and weights differ in length".into(),
        ));
    }
    if scores.iter().chain(correctness).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("isotonic input".into()));
    }
    normalize_weights(weights, scores.len())?;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    struct Block {
        start: f64,
        weight: f64,
        weighted_sum: f64,
    }
    impl Block {
        fn mean(&self) -> f64 {
            self.weighted_sum / self.weight
        }
    }

    let mut stack: Vec<Block> = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut block = Block {
            start: s,
            weight: 0.0,
            weighted_sum: 0.0,
        };
        while i < order.len() && scores[order[i]] == s {
            let j = order[i];
            block.weight += weights[j];
            block.weighted_sum += weights[j] * correctness[j];
            i += 1;
        }
        if block.weight == 0.0 {
            continue;
        }
        stack.push(block);
        while stack.len() >= 2 && stack[stack.len() - 2].mean() > stack[stack.len() - 1].mean() {
            let last = stack.pop().unwrap();
            let prev = stack.last_mut().unwrap();
            prev.weight += last.weight;
            prev.weighted_sum += last.weighted_sum;
        }
    }
    Ok(StepFunction {
        breakpoints: stack.iter().map(|b| b.start).collect(),
        values: stack.iter().map(Block::mean).collect(),
    })
}

/// Isotonic calibrator on classifier logits.
pub fn fit_isotonic_calibrator(
    logits: ArrayView2<f64>,
    labels: &[usize],
    weights: &[f64],
) -> Result<Calibrator> {
    let normalized = check_inputs(logits, labels, weights)?;
    let k = logits.ncols();
    let probs = learner::softmax_rows(logits)?;
    let input = if k == 2 {
        IsotonicInput::PositiveClass
    } else {
        IsotonicInput::TopLabel
    };
    let (scores, targets): (Vec<f64>, Vec<f64>) = probs
        .outer_iter()
        .zip(labels)
        .map(|(row, &y)| match input {
            IsotonicInput::PositiveClass => (row[1], if y == 1 { 1.0 } else { 0.0 }),
            IsotonicInput::TopLabel => {
                let top = argmax(row);
                (row[top], if top == y { 1.0 } else { 0.0 })
            }
        })
        .unzip();
    let map = fit_isotonic(&scores, &targets, weights)?;
    let final_loss = scores
        .iter()
        .zip(&targets)
        .zip(&normalized)
        .map(|((&s, &c), &w)| w * (map.eval(s) - c).powi(2))
        .sum();
    Ok(Calibrator {
        kind: CalibratorKind::Isotonic {
            n_classes: k,
            input,
            map,
        },
        fit_record: FitRecord {
            weights_used: weights_used(weights),
            n_fit: logits.nrows(),
            final_loss,
            warnings: Vec::new(),
        },
    })
}

/// Fits the requested calibrator type.
pub fn fit(
    kind: CalibratorType,
    logits: ArrayView2<f64>,
    labels: &[usize],
    weights: &[f64],
) -> Result<Calibrator> {
    match kind {
        CalibratorType::Platt => fit_platt(logits, labels, weights),
        CalibratorType::Temperature => fit_temperature(logits, labels, weights),
        CalibratorType::Isotonic => fit_isotonic_calibrator(logits, labels, weights),
    }
}
