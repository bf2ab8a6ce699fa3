//! Labeled source/target samples and the synthetic covariate-shift generators.
//!
//! Two generators are provided:
//!
//! - [`generate_gaussian_shift`]: source and target inputs from two Gaussians,
//!   labels from one shared rule `P(Y = 1 | x)`.
//! - [`generate_mixture_shift`]: per-class Gaussian features shared by both
//!   domains, mixed with different class proportions. The exact density ratio
//!   of a source sample of class `k` is `target_ratio[k] / source_ratio[k]`.
//!
//! Every generator is a pure function of `(config, seed)`.

use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::{ImportanceWeights, Provenance};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    n_classes: usize,
    pub domain: Domain,
    /// Seed the generator was called with; 0 when loaded from a file.
    pub seed: u64,
}

impl LabeledDataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        n_classes: usize,
        domain: Domain,
        seed: u64,
    ) -> Result<Self> {
        let (n, d) = features.dim();
        if n == 0 || d == 0 {
            return Err(Error::Empty(format!("dataset of shape {n}x{d}")));
        }
        if n_classes < 2 {
            return Err(Error::Shape(format!(
                "need at least 2 classes, got {n_classes}"
            )));
        }
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
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(LabeledDataset {
            features,
            labels,
            n_classes,
            domain,
            seed,
        })
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows in the order of `indices`. Panics on out-of-range indices.
    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            domain: self.domain,
            seed: self.seed,
        }
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = format!(
            "d={},k={},domain={}\n",
            self.dim(),
            self.n_classes,
            self.domain
        );
        for (row, y) in self.features.outer_iter().zip(&self.labels) {
            for v in row {
                // `Display` for f64 is the shortest round-trip representation
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{y}\n"));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty file".into(),
        })?;
        let (d, k, domain) = parse_header(header)?;
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 1 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {} columns, found {}", d + 1, fields.len()),
                });
            }
            for field in &fields[..d] {
                let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("not a number: `{field}`"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("non-finite value `{field}`"),
                    });
                }
                values.push(v);
            }
            let label_field = fields[d].trim();
            let y: usize = label_field.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("not a class label: `{label_field}`"),
            })?;
            if y >= k {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("label {y} outside [0, {k})"),
                });
            }
            labels.push(y);
        }
        if labels.is_empty() {
            return Err(Error::Parse {
                line: 2,
                message: "no samples".into(),
            });
        }
        let features = Array2::from_shape_vec((labels.len(), d), values)
            .map_err(|e| Error::Shape(e.to_string()))?;
        LabeledDataset::new(features, labels, k, domain, 0)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }
}

fn parse_header(header: &str) -> Result<(usize, usize, Domain)> {
    let bad = |message: String| Error::Parse { line: 1, message };
    let mut d = None;
    let mut k = None;
    let mut domain = None;
    for part in header.trim().split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed header field `{part}`")))?;
        match key {
            "d" => d = value.parse::<usize>().ok(),
            "k" => k = value.parse::<usize>().ok(),
            "domain" => {
                domain = match value {
                    "source" => Some(Domain::Source),
                    "target" => Some(Domain::Target),
                    _ => return Err(bad(format!("unknown domain `{value}`"))),
                }
            }
            _ => return Err(bad(format!("unknown header key `{key}`"))),
        }
    }
    match (d, k, domain) {
        (Some(d), Some(k), Some(domain)) if d >= 1 && k >= 2 => Ok((d, k, domain)),
        _ => Err(bad(format!(
            "header must be `d=<d>,k=<k>,domain=<source|target>` with d >= 1 and k >= 2, got `{header}`"
        ))),
    }
}

/// Random partition into `floor(fraction · n)` and the remaining rows.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let left = if fraction > 0.0 && fraction < 1.0 {
        (fraction * n as f64).floor() as usize
    } else {
        0
    };
    let right = n.saturating_sub(left);
    if !(fraction > 0.0 && fraction < 1.0) || left == 0 || right == 0 {
        return Err(Error::Split {
            n,
            fraction,
            left,
            right,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, 30));
    let mut a = order[..left].to_vec();
    let mut b = order[left..].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    Ok((a, b))
}

pub fn split(
    ds: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let (a, b) = split_indices(ds.len(), fraction, seed)?;
    Ok((ds.select(&a), ds.select(&b)))
}

/// Conditional label rule `P(Y = 1 | x)`, a function of the first coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LabelRule {
    /// `sigmoid(slope · x₁ + intercept)`
    Sigmoid {
        slope: f64,
        intercept: f64,
    },
    /// Linear from 0 at `low` to 1 at `high`, clamped.
    Ramp {
        low: f64,
        high: f64,
    },
    Constant {
        p: f64,
    },
}

impl Default for LabelRule {
    fn default() -> Self {
        LabelRule::Sigmoid {
            slope: 1.0,
            intercept: 0.0,
        }
    }
}

impl LabelRule {
    pub fn positive_probability(&self, x: ArrayView1<f64>) -> f64 {
        let x1 = x[0];
        match *self {
            LabelRule::Sigmoid { slope, intercept } => {
                1.0 / (1.0 + (-(slope * x1 + intercept)).exp())
            }
            LabelRule::Ramp { low, high } => ((x1 - low) / (high - low)).clamp(0.0, 1.0),
            LabelRule::Constant { p } => p,
        }
    }

    fn validate(&self, field: &str) -> Result<()> {
        match *self {
            LabelRule::Sigmoid { slope, intercept }
                if slope.is_finite() && intercept.is_finite() =>
            {
                Ok(())
            }
            LabelRule::Ramp { low, high } if low.is_finite() && high.is_finite() && low < high => {
                Ok(())
            }
            LabelRule::Constant { p } if (0.0..=1.0).contains(&p) => Ok(()),
            _ => Err(Error::config(field, format!("invalid label rule {self:?}"))),
        }
    }
}

/// Gaussian with a precomputed Cholesky factor.
#[derive(Debug, Clone)]
pub(crate) struct Gaussian {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
    log_norm: f64,
}

impl Gaussian {
    pub(crate) fn new(mean: &[f64], cov: &[Vec<f64>], field: &str) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::config(field, "mean must be non-empty"));
        }
        if cov.len() != d || cov.iter().any(|row| row.len() != d) {
            return Err(Error::config(field, format!("covariance must be {d}x{d}")));
        }
        let m = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
        if m.iter().any(|v| !v.is_finite()) || mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(field, "non-finite entries"));
        }
        for i in 0..d {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * (1.0 + m[(i, j)].abs()) {
                    return Err(Error::config(field, "covariance is not symmetric"));
                }
            }
        }
        let chol = m
            .cholesky()
            .ok_or_else(|| Error::config(field, "covariance is not positive definite"))?
            .l();
        let log_det_half: f64 = (0..d).map(|i| chol[(i, i)].ln()).sum();
        Ok(Gaussian {
            mean: DVector::from_column_slice(mean),
            log_norm: -log_det_half - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln(),
            chol,
        })
    }

    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn sample_into(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        let z: DVector<f64> = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        let x = &self.mean + &self.chol * z;
        out.copy_from_slice(x.as_slice());
    }

    pub(crate) fn log_density(&self, x: ArrayView1<f64>) -> f64 {
        let diff = DVector::from_iterator(self.dim(), x.iter().copied()) - &self.mean;
        let z = self
            .chol
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        self.log_norm - 0.5 * z.norm_squared()
    }
}

fn default_n() -> usize {
    5000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianShiftConfig {
    pub source_mean: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub source_cov: Vec<Vec<f64>>,
    pub target_cov: Vec<Vec<f64>>,
    #[serde(default)]
    pub label_rule: LabelRule,
    #[serde(default = "default_n")]
    pub n_source: usize,
    #[serde(default = "default_n")]
    pub n_target: usize,
}

impl Default for GaussianShiftConfig {
    /// Two-dimensional demo: correlated source inputs and a tighter target
    /// cloud shifted across the correlation axis, so the density ratio stays
    /// moderate.
    fn default() -> Self {
        GaussianShiftConfig {
            source_mean: vec![0.0, 0.0],
            target_mean: vec![0.3, -0.3],
            source_cov: vec![vec![1.0, 0.7], vec![0.7, 1.0]],
            target_cov: vec![vec![0.5, 0.2], vec![0.2, 0.5]],
            label_rule: LabelRule::default(),
            n_source: 5000,
            n_target: 5000,
        }
    }
}

/// Prepared Gaussian-shift generator; also evaluates the exact density ratio.
#[derive(Debug, Clone)]
pub struct GaussianShift {
    config: GaussianShiftConfig,
    source: Gaussian,
    target: Gaussian,
}

impl GaussianShift {
    pub fn new(config: &GaussianShiftConfig) -> Result<Self> {
        config.validate("generator")?;
        Ok(GaussianShift {
            source: Gaussian::new(
                &config.source_mean,
                &config.source_cov,
                "generator.source_cov",
            )?,
            target: Gaussian::new(
                &config.target_mean,
                &config.target_cov,
                "generator.target_cov",
            )?,
            config: config.clone(),
        })
    }

    /// `N_target(x) / N_source(x)` for each row.
    pub fn density_ratio(&self, x: ArrayView2<f64>) -> Result<ImportanceWeights> {
        if x.ncols() != self.source.dim() {
            return Err(Error::Shape(format!(
                "expected {} features, got {}",
                self.source.dim(),
                x.ncols()
            )));
        }
        let values = x
            .outer_iter()
            .map(|row| (self.target.log_density(row) - self.source.log_density(row)).exp())
            .collect();
        ImportanceWeights::new(values, Provenance::GroundTruth)
    }

    fn draw(
        &self,
        gaussian: &Gaussian,
        n: usize,
        domain: Domain,
        seed: u64,
        stream: u64,
    ) -> Result<LabeledDataset> {
        let d = gaussian.dim();
        let mut rng = rng::stream(seed, stream);
        let mut features = Array2::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        for mut row in features.outer_iter_mut() {
            gaussian.sample_into(&mut rng, row.as_slice_mut().expect("standard layout"));
            let p = self.config.label_rule.positive_probability(row.view());
            let u: f64 = rng.random();
            labels.push(usize::from(u < p));
        }
        LabeledDataset::new(features, labels, 2, domain, seed)
    }

    pub fn generate(&self, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        Ok((
            self.draw(&self.source, self.config.n_source, Domain::Source, seed, 10)?,
            self.draw(&self.target, self.config.n_target, Domain::Target, seed, 11)?,
        ))
    }
}

impl GaussianShiftConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let d = self.source_mean.len();
        if d == 0 {
            return Err(Error::config(
                format!("{prefix}.source_mean"),
                "must be non-empty",
            ));
        }
        if self.target_mean.len() != d {
            return Err(Error::config(
                format!("{prefix}.target_mean"),
                format!("must have length {d}"),
            ));
        }
        if self.n_source == 0 {
            return Err(Error::config(format!("{prefix}.n_source"), "must be >= 1"));
        }
        if self.n_target == 0 {
            return Err(Error::config(format!("{prefix}.n_target"), "must be >= 1"));
        }
        self.label_rule.validate(&format!("{prefix}.label_rule"))?;
        Gaussian::new(
            &self.source_mean,
            &self.source_cov,
            &format!("{prefix}.source_cov"),
        )?;
        Gaussian::new(
            &self.target_mean,
            &self.target_cov,
            &format!("{prefix}.target_cov"),
        )?;
        Ok(())
    }
}

/// Source and target samples from two Gaussians, labeled by one shared rule.
pub fn generate_gaussian_shift(
    config: &GaussianShiftConfig,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    GaussianShift::new(config)?.generate(seed)
}

/// Per-class feature distributions, shared by both domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClassFeatures {
    /// Unit-covariance Gaussians whose means are pairwise `distance` apart,
    /// randomly oriented from `seed`. Needs `dim >= n_classes`.
    Separated {
        dim: usize,
        distance: f64,
        seed: u64,
    },
    /// Explicit means; covariances default to identity.
    Gaussian {
        means: Vec<Vec<f64>>,
        #[serde(default)]
        covariances: Option<Vec<Vec<Vec<f64>>>>,
    },
}

impl Default for ClassFeatures {
    fn default() -> Self {
        ClassFeatures::Separated {
            dim: 8,
            distance: 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureShiftConfig {
    #[serde(default)]
    pub class_features: ClassFeatures,
    pub source_ratio: Vec<f64>,
    pub target_ratio: Vec<f64>,
    #[serde(default = "default_n")]
    pub n_source: usize,
    #[serde(default = "default_n")]
    pub n_target: usize,
}

impl MixtureShiftConfig {
    /// Default class features with the given mixing ratios.
    pub fn with_ratios(source_ratio: Vec<f64>, target_ratio: Vec<f64>) -> Self {
        MixtureShiftConfig {
            class_features: ClassFeatures::default(),
            source_ratio,
            target_ratio,
            n_source: default_n(),
            n_target: default_n(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.source_ratio.len()
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        let k = self.source_ratio.len();
        if k < 2 {
            return Err(Error::config(
                format!("{prefix}.source_ratio"),
                "need at least 2 classes",
            ));
        }
        if self.target_ratio.len() != k {
            return Err(Error::config(
                format!("{prefix}.target_ratio"),
                format!("must have length {k}"),
            ));
        }
        for (name, ratio) in [
            ("source_ratio", &self.source_ratio),
            ("target_ratio", &self.target_ratio),
        ] {
            if ratio.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
                return Err(Error::config(
                    format!("{prefix}.{name}"),
                    "entries must be positive",
                ));
            }
        }
        if self.n_source == 0 {
            return Err(Error::config(format!("{prefix}.n_source"), "must be >= 1"));
        }
        if self.n_target == 0 {
            return Err(Error::config(format!("{prefix}.n_target"), "must be >= 1"));
        }
        self.class_distributions(prefix).map(|_| ())
    }

    fn class_distributions(&self, prefix: &str) -> Result<Vec<Gaussian>> {
        let k = self.n_classes();
        let field = format!("{prefix}.class_features");
        match &self.class_features {
            ClassFeatures::Separated {
                dim,
                distance,
                seed,
            } => {
                if *dim < k {
                    return Err(Error::config(
                        format!("{field}.dim"),
                        format!("must be >= {k} classes"),
                    ));
                }
                if !(*distance > 0.0 && distance.is_finite()) {
                    return Err(Error::config(format!("{field}.distance"), "must be > 0"));
                }
                let means = separated_means(k, *dim, *distance, *seed);
                let identity = identity(*dim);
                means
                    .iter()
                    .map(|m| Gaussian::new(m, &identity, &field))
                    .collect()
            }
            ClassFeatures::Gaussian { means, covariances } => {
                if means.len() != k {
                    return Err(Error::config(
                        format!("{field}.means"),
                        format!("need {k} class means"),
                    ));
                }
                if let Some(covs) = covariances {
                    if covs.len() != k {
                        return Err(Error::config(
                            format!("{field}.covariances"),
                            format!("need {k} matrices"),
                        ));
                    }
                }
                let d = means[0].len();
                means
                    .iter()
                    .enumerate()
                    .map(|(c, m)| {
                        if m.len() != d {
                            return Err(Error::config(
                                format!("{field}.means"),
                                "unequal dimensions",
                            ));
                        }
                        let cov = covariances
                            .as_ref()
                            .map_or_else(|| identity(d), |covs| covs[c].clone());
                        Gaussian::new(m, &cov, &format!("{field}.covariances[{c}]"))
                    })
                    .collect()
            }
        }
    }

    /// `target_ratio[k] / source_ratio[k]` after normalizing both to sum 1.
    pub fn class_weights(&self) -> Vec<f64> {
        let s = normalized(&self.source_ratio);
        let t = normalized(&self.target_ratio);
        t.iter().zip(&s).map(|(t, s)| t / s).collect()
    }

    /// Exact weights for labeled source samples.
    pub fn ground_truth_weights(&self, labels: &[usize]) -> Result<ImportanceWeights> {
        let per_class = self.class_weights();
        let values = labels
            .iter()
            .map(|&y| {
                per_class
                    .get(y)
                    .copied()
                    .ok_or_else(|| Error::Shape(format!("label {y} outside mixture classes")))
            })
            .collect::<Result<Vec<_>>>()?;
        ImportanceWeights::new(values, Provenance::GroundTruth)
    }
}

fn identity(d: usize) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

pub(crate) fn normalized(ratio: &[f64]) -> Vec<f64> {
    let total: f64 = ratio.iter().sum();
    ratio.iter().map(|r| r / total).collect()
}

/// Scaled simplex vertices `distance/√2 · e_k`, rotated by a random orthogonal matrix.
fn separated_means(k: usize, dim: usize, distance: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(seed, 40);
    let g: DMatrix<f64> = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut rng));
    let q = g.qr().q();
    let scale = distance / std::f64::consts::SQRT_2;
    (0..k)
        .map(|c| (0..dim).map(|i| scale * q[(i, c)]).collect())
        .collect()
}

fn draw_mixture(
    classes: &[Gaussian],
    ratio: &[f64],
    n: usize,
    domain: Domain,
    seed: u64,
    stream: u64,
) -> Result<LabeledDataset> {
    let d = classes[0].dim();
    let mut rng = rng::stream(seed, stream);
    let picker =
        WeightedIndex::new(normalized(ratio)).map_err(|e| Error::config("ratio", e.to_string()))?;
    let mut features = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for mut row in features.outer_iter_mut() {
        let y = picker.sample(&mut rng);
        classes[y].sample_into(&mut rng, row.as_slice_mut().expect("standard layout"));
        labels.push(y);
    }
    LabeledDataset::new(features, labels, classes.len(), domain, seed)
}

/// Source and target drawn from one set of class distributions with different
/// class proportions, plus exact ground-truth weights for the source samples.
pub fn generate_mixture_shift(
    config: &MixtureShiftConfig,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset, ImportanceWeights)> {
    config.validate("generator")?;
    let classes = config.class_distributions("generator")?;
    let source = draw_mixture(
        &classes,
        &config.source_ratio,
        config.n_source,
        Domain::Source,
        seed,
        20,
    )?;
    let target = draw_mixture(
        &classes,
        &config.target_ratio,
        config.n_target,
        Domain::Target,
        seed,
        21,
    )?;
    let weights = config.ground_truth_weights(source.labels())?;
    Ok((source, target, weights))
}
