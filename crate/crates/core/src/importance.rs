//! Density ratios `target(x) / source(x)` evaluated on source samples.
//!
//! Weights come from ground truth (when the generator knows both densities) or
//! from a source-vs-target discriminator. Corrections (self-normalization,
//! flattening, clipping) trade bias for variance, and the diagnostics relate
//! the weight distribution to the variance of the weighted calibration loss.

use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::{concatenate, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{self, LearnerConfig, ProbabilisticModel};
use crate::rng;

/// Clamp on the discriminator's `P(source | x)` before forming odds.
pub const DISCRIMINATOR_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    GroundTruth,
    Discriminator,
    Noisy { sigma: f64 },
    Uniform,
}

/// Serialized as `self_normalize`, `flatten(alpha)` or `clip(max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum WeightCorrection {
    SelfNormalize,
    Flatten { alpha: f64 },
    Clip { max: f64 },
}

impl WeightCorrection {
    pub fn validate(&self, field: &str) -> Result<()> {
        match *self {
            WeightCorrection::SelfNormalize => Ok(()),
            WeightCorrection::Flatten { alpha } if (0.0..=1.0).contains(&alpha) => Ok(()),
            WeightCorrection::Flatten { .. } => {
                Err(Error::config(format!("{field}.alpha"), "must be in [0, 1]"))
            }
            WeightCorrection::Clip { max } if max > 0.0 && !max.is_nan() => Ok(()),
            WeightCorrection::Clip { .. } => {
                Err(Error::config(format!("{field}.max"), "must be > 0"))
            }
        }
    }
}

impl fmt::Display for WeightCorrection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightCorrection::SelfNormalize => write!(f, "self_normalize"),
            WeightCorrection::Flatten { alpha } => write!(f, "flatten({alpha})"),
            WeightCorrection::Clip { max } => write!(f, "clip({max})"),
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::GroundTruth => write!(f, "ground_truth"),
            Provenance::Discriminator => write!(f, "discriminator"),
            Provenance::Noisy { sigma } => write!(f, "noisy({sigma})"),
            Provenance::Uniform => write!(f, "uniform"),
        }
    }
}

fn parse_call(text: &str, name: &str) -> Option<f64> {
    text.strip_prefix(name)?
        .strip_prefix('(')?
        .strip_suffix(')')?
        .parse()
        .ok()
}

impl std::str::FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ground_truth" => Ok(Provenance::GroundTruth),
            "discriminator" => Ok(Provenance::Discriminator),
            "uniform" => Ok(Provenance::Uniform),
            _ => parse_call(s, "noisy")
                .map(|sigma| Provenance::Noisy { sigma })
                .ok_or_else(|| format!("unknown provenance `{s}`")),
        }
    }
}

impl std::str::FromStr for WeightCorrection {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "self_normalize" {
            return Ok(WeightCorrection::SelfNormalize);
        }
        if let Some(alpha) = parse_call(s, "flatten") {
            return Ok(WeightCorrection::Flatten { alpha });
        }
        if let Some(max) = parse_call(s, "clip") {
            return Ok(WeightCorrection::Clip { max });
        }
        Err(format!("unknown correction `{s}`"))
    }
}

impl TryFrom<String> for WeightCorrection {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<WeightCorrection> for String {
    fn from(c: WeightCorrection) -> String {
        c.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceWeights {
    values: Vec<f64>,
    pub provenance: Provenance,
    pub corrections: Vec<WeightCorrection>,
}

impl ImportanceWeights {
    pub fn new(values: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::DegenerateWeights(
                "importance weights must be finite and >= 0".into(),
            ));
        }
        Ok(ImportanceWeights {
            values,
            provenance,
            corrections: Vec::new(),
        })
    }

    pub fn uniform(n: usize) -> Self {
        ImportanceWeights {
            values: vec![1.0; n],
            provenance: Provenance::Uniform,
            corrections: Vec::new(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Subset in the order of `indices`.
    pub fn select(&self, indices: &[usize]) -> Self {
        ImportanceWeights {
            values: indices.iter().map(|&i| self.values[i]).collect(),
            provenance: self.provenance,
            corrections: self.corrections.clone(),
        }
    }

    fn with(&self, values: Vec<f64>, correction: WeightCorrection) -> Self {
        let mut corrections = self.corrections.clone();
        corrections.push(correction);
        ImportanceWeights {
            values,
            provenance: self.provenance,
            corrections,
        }
    }

    /// Rescales to mean one.
    pub fn self_normalize(&self) -> Result<Self> {
        let total: f64 = self.values.iter().sum();
        if total <= 0.0 || self.values.is_empty() {
            return Err(Error::DegenerateWeights(
                "cannot normalize zero weights".into(),
            ));
        }
        let n = self.values.len() as f64;
        let scale = n / total;
        Ok(self.with(
            self.values.iter().map(|v| v * scale).collect(),
            WeightCorrection::SelfNormalize,
        ))
    }

    /// Raises every weight to `alpha ∈ [0, 1]`, shrinking toward uniform.
    pub fn flatten(&self, alpha: f64) -> Result<Self> {
        WeightCorrection::Flatten { alpha }.validate("flatten")?;
        Ok(self.with(
            self.values.iter().map(|v| v.powf(alpha)).collect(),
            WeightCorrection::Flatten { alpha },
        ))
    }

    /// Caps every weight at `max`.
    pub fn clip(&self, max: f64) -> Result<Self> {
        WeightCorrection::Clip { max }.validate("clip")?;
        Ok(self.with(
            self.values.iter().map(|v| v.min(max)).collect(),
            WeightCorrection::Clip { max },
        ))
    }

    pub fn apply(&self, correction: WeightCorrection) -> Result<Self> {
        match correction {
            WeightCorrection::SelfNormalize => self.self_normalize(),
            WeightCorrection::Flatten { alpha } => self.flatten(alpha),
            WeightCorrection::Clip { max } => self.clip(max),
        }
    }

    pub fn apply_all(&self, corrections: &[WeightCorrection]) -> Result<Self> {
        corrections
            .iter()
            .try_fold(self.clone(), |w, &c| w.apply(c))
    }

    /// Adds `N(0, sigma²)` to each weight and truncates at zero.
    pub fn add_noise(&self, sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::config("sigma", "must be finite and >= 0"));
        }
        let provenance = Provenance::Noisy { sigma };
        if sigma == 0.0 {
            return Ok(ImportanceWeights {
                provenance,
                ..self.clone()
            });
        }
        let normal = Normal::new(0.0, sigma).expect("valid sigma");
        let mut rng = rng::stream(seed, 7);
        let values = self
            .values
            .iter()
            .map(|v| (v + normal.sample(&mut rng)).max(0.0))
            .collect();
        Ok(ImportanceWeights {
            values,
            provenance,
            corrections: self.corrections.clone(),
        })
    }

    /// Population variance of the weights.
    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / self.values.len() as f64
    }

    /// `(Σw)² / Σw²`.
    pub fn effective_sample_size(&self) -> f64 {
        let sum: f64 = self.values.iter().sum();
        let sum_sq: f64 = self.values.iter().map(|v| v * v).sum();
        if sum_sq == 0.0 {
            0.0
        } else {
            sum * sum / sum_sq
        }
    }

    /// Writes a header line `provenance=..;corrections=..` and one value per line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let corrections: Vec<String> = self.corrections.iter().map(|c| c.to_string()).collect();
        let mut text = format!(
            "provenance={};corrections={}\n",
            self.provenance,
            corrections.join("|")
        );
        for v in &self.values {
            text.push_str(&format!("{v}\n"));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "missing header".into(),
        })?;
        let bad_header = |message: String| Error::Parse { line: 1, message };
        let (prov, corr) = header
            .strip_prefix("provenance=")
            .and_then(|rest| rest.split_once(";corrections="))
            .ok_or_else(|| bad_header(format!("malformed header `{header}`")))?;
        let provenance: Provenance = prov.parse().map_err(bad_header)?;
        let corrections = if corr.is_empty() {
            Vec::new()
        } else {
            corr.split('|')
                .map(|c| c.parse::<WeightCorrection>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(bad_header)?
        };
        let mut values = Vec::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let v: f64 = line.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("not a number: `{line}`"),
            })?;
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("weight must be finite and >= 0, got {v}"),
                });
            }
            values.push(v);
        }
        Ok(ImportanceWeights {
            values,
            provenance,
            corrections,
        })
    }
}

/// Weight from the discriminator's `P(source | x)`:
/// `(n_source / n_target) · P(target | x) / P(source | x)`.
pub fn ratio_from_source_probability(p_source: f64, size_ratio: f64) -> f64 {
    let p = p_source.clamp(DISCRIMINATOR_CLAMP, 1.0 - DISCRIMINATOR_CLAMP);
    size_ratio * (1.0 - p) / p
}

/// Binary source-vs-target classifier turned into a density-ratio estimator.
#[derive(Debug, Clone)]
pub struct DiscriminatorRatio {
    model: ProbabilisticModel,
    size_ratio: f64,
}

/// Discriminator label of source samples; target samples are labeled 0.
const SOURCE_LABEL: usize = 1;

impl DiscriminatorRatio {
    pub fn fit(
        source: ArrayView2<f64>,
        target: ArrayView2<f64>,
        config: &LearnerConfig,
    ) -> Result<Self> {
        if source.ncols() != target.ncols() {
            return Err(Error::Shape(format!(
                "source has {} features, target {}",
                source.ncols(),
                target.ncols()
            )));
        }
        if source.nrows() == 0 || target.nrows() == 0 {
            return Err(Error::Empty(
                "discriminator needs source and target samples".into(),
            ));
        }
        let x = concatenate(Axis(0), &[source, target]).map_err(|e| Error::Shape(e.to_string()))?;
        let labels: Vec<usize> = std::iter::repeat_n(SOURCE_LABEL, source.nrows())
            .chain(std::iter::repeat_n(1 - SOURCE_LABEL, target.nrows()))
            .collect();
        let model = learner::fit(config, x.view(), &labels, None, Some(2))?;
        Ok(DiscriminatorRatio {
            model,
            size_ratio: source.nrows() as f64 / target.nrows() as f64,
        })
    }

    pub fn model(&self) -> &ProbabilisticModel {
        &self.model
    }

    /// Estimated `target(x) / source(x)` for each row of `x`.
    pub fn weights(&self, x: ArrayView2<f64>) -> Result<ImportanceWeights> {
        let probs = self.model.predict_proba(x)?;
        let values = probs
            .column(SOURCE_LABEL)
            .iter()
            .map(|&p| ratio_from_source_probability(p, self.size_ratio))
            .collect();
        ImportanceWeights::new(values, Provenance::Discriminator)
    }
}

/// Trains a discriminator and returns its weights on the source samples.
pub fn estimate_weights_discriminator(
    source: ArrayView2<f64>,
    target: ArrayView2<f64>,
    config: &LearnerConfig,
) -> Result<ImportanceWeights> {
    DiscriminatorRatio::fit(source, target, config)?.weights(source)
}

/// Closed-form `d_{α+1}(p‖q) = [Σ_k p_k^{α+1} / q_k^α]^{1/α}` for discrete
/// distributions; both inputs are normalized first.
pub fn discrete_renyi_divergence(target: &[f64], source: &[f64], alpha: f64) -> Result<f64> {
    if target.len() != source.len() || target.is_empty() {
        return Err(Error::Shape(
            "distributions must have equal, nonzero length".into(),
        ));
    }
    if !(alpha > 0.0) {
        return Err(Error::config("alpha", "must be > 0"));
    }
    let ts: f64 = target.iter().sum();
    let ss: f64 = source.iter().sum();
    if source.iter().any(|&q| q <= 0.0) || target.iter().any(|&p| p < 0.0) || ts <= 0.0 {
        return Err(Error::config("ratios", "must be positive"));
    }
    let sum: f64 = target
        .iter()
        .zip(source)
        .map(|(&p, &q)| (p / ts).powf(alpha + 1.0) / (q / ss).powf(alpha))
        .sum();
    Ok(sum.powf(1.0 / alpha))
}

/// Plug-in `d_{α+1}` estimate `(mean w^{α+1})^{1/α}` over source samples.
///
/// Returns the estimate and whether the weights had to be self-normalized.
pub fn renyi_divergence_estimate(w: &ImportanceWeights, alpha: f64) -> Result<(f64, bool)> {
    if !(alpha > 0.0) {
        return Err(Error::config("alpha", "must be > 0"));
    }
    if w.is_empty() {
        return Err(Error::Empty("weights".into()));
    }
    let needs_normalizing = (w.mean() - 1.0).abs() > 1e-12;
    let normalized;
    let w = if needs_normalizing {
        normalized = w.self_normalize()?;
        &normalized
    } else {
        w
    };
    let moment = w.values().iter().map(|v| v.powf(alpha + 1.0)).sum::<f64>() / w.len() as f64;
    Ok((moment.powf(1.0 / alpha), needs_normalizing))
}

/// How the importance weights relate to the variance of the weighted loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioDiagnostics {
    pub renyi_alpha: f64,
    pub renyi_divergence_estimate: f64,
    pub weight_variance: f64,
    pub effective_sample_size: f64,
    /// Empirical variance of `w_i · l_i` on the source sample.
    pub weighted_loss_variance: f64,
    /// `mean(w_i · l_i)`, the importance-sampling estimate of the target loss.
    pub target_loss_estimate: f64,
    /// Bound with the target loss read as the weighted estimate.
    pub variance_bound: f64,
    /// Bound with the target loss read as the plain source mean of `l_i`.
    pub variance_bound_unweighted: f64,
    pub respects_bound: bool,
    pub auto_normalized: bool,
}

/// Variance check for a weighted loss:
/// `Var(w·l) ≤ d_{α+1} · E[l]^{1 − 1/α} − E[l]²`.
///
/// The bound assumes per-sample losses in `[0, 1]`.
pub fn weighted_loss_variance_diagnostic(
    losses: &[f64],
    w: &ImportanceWeights,
    alpha: f64,
) -> Result<RatioDiagnostics> {
    if losses.len() != w.len() {
        return Err(Error::Shape(format!(
            "{} losses for {} weights",
            losses.len(),
            w.len()
        )));
    }
    let (divergence, auto_normalized) = renyi_divergence_estimate(w, alpha)?;
    let normalized = if auto_normalized {
        w.self_normalize()?
    } else {
        w.clone()
    };
    let n = losses.len() as f64;
    let weighted: Vec<f64> = losses
        .iter()
        .zip(normalized.values())
        .map(|(l, v)| l * v)
        .collect();
    let mean_weighted = weighted.iter().sum::<f64>() / n;
    let variance = weighted
        .iter()
        .map(|v| (v - mean_weighted).powi(2))
        .sum::<f64>()
        / n;
    let mean_plain = losses.iter().sum::<f64>() / n;
    let bound = |e: f64| divergence * e.powf(1.0 - 1.0 / alpha) - e * e;
    let variance_bound = bound(mean_weighted);
    Ok(RatioDiagnostics {
        renyi_alpha: alpha,
        renyi_divergence_estimate: divergence,
        weight_variance: normalized.variance(),
        effective_sample_size: normalized.effective_sample_size(),
        weighted_loss_variance: variance,
        target_loss_estimate: mean_weighted,
        variance_bound,
        variance_bound_unweighted: bound(mean_plain),
        respects_bound: variance <= variance_bound + 1e-12,
        auto_normalized,
    })
}
