//! The source/target evaluation protocol.
//!
//! One replication:
//!
//! 1. generate (or load) source and target data;
//! 2. split source into train/validation and target into validation/test;
//! 3. train the classifier on source-train;
//! 4. compute importance weights for the source-validation samples;
//! 5. fit each calibrator three ways (uniform source weights, importance
//!    weights, target-validation labels) and evaluate all of them plus the raw
//!    classifier on target-test.
//!
//! Replications use seeds `seed, seed + 1, ...` and are aggregated into
//! means and standard deviations. Sweeps rerun the experiment along one axis.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{self, Calibrator, CalibratorType};
use crate::dataset::{
    self, GaussianShift, GaussianShiftConfig, LabeledDataset, MixtureShiftConfig,
};
use crate::error::{Error, Result};
use crate::importance::{
    self, DiscriminatorRatio, ImportanceWeights, RatioDiagnostics, WeightCorrection,
};
use crate::learner::{self, Activation, Architecture, LearnerConfig, ProbabilisticModel};
use crate::metrics::{self, EvaluationReport, Method, ReliabilityBins};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorConfig {
    GaussianShift {
        #[serde(flatten)]
        config: GaussianShiftConfig,
    },
    MixtureShift {
        #[serde(flatten)]
        config: MixtureShiftConfig,
    },
    /// Pre-generated CSV files. Ground-truth weights, when given, must cover
    /// every row of the source file.
    Files {
        source: PathBuf,
        target: PathBuf,
        #[serde(default)]
        weights: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightsMode {
    GroundTruth,
    Discriminator {
        learner: LearnerConfig,
        #[serde(default)]
        features: DiscriminatorFeatures,
    },
    NoisyGroundTruth {
        sigma: f64,
    },
}

/// Inputs given to the discriminator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorFeatures {
    #[default]
    Raw,
    /// Activations feeding the classifier's output layer.
    ClassifierPenultimate,
}

fn default_calibrators() -> Vec<CalibratorType> {
    vec![CalibratorType::Platt, CalibratorType::Temperature]
}

fn default_corrections() -> Vec<WeightCorrection> {
    vec![WeightCorrection::SelfNormalize]
}

fn default_split() -> f64 {
    0.7
}

fn default_bins() -> usize {
    metrics::DEFAULT_BINS
}

fn default_replications() -> usize {
    10
}

fn default_weights_mode() -> WeightsMode {
    WeightsMode::GroundTruth
}

pub fn default_classifier() -> LearnerConfig {
    LearnerConfig {
        architecture: Architecture::Linear,
        l2_penalty: 1e-4,
        learning_rate: 1.0,
        max_epochs: 300,
        batch_size: None,
        tolerance: 1e-9,
        seed: 0,
    }
}

pub fn default_discriminator() -> LearnerConfig {
    LearnerConfig {
        architecture: Architecture::mlp(16, Activation::Tanh),
        l2_penalty: 1e-4,
        learning_rate: 1.0,
        max_epochs: 500,
        batch_size: None,
        tolerance: 1e-9,
        seed: 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    #[serde(default = "default_classifier")]
    pub classifier: LearnerConfig,
    #[serde(default = "default_calibrators")]
    pub calibrators: Vec<CalibratorType>,
    #[serde(default = "default_weights_mode")]
    pub weights_mode: WeightsMode,
    #[serde(default = "default_corrections")]
    pub corrections: Vec<WeightCorrection>,
    /// Source fraction used for classifier training; the target is split the
    /// other way round (validation gets `1 − split_fraction`).
    #[serde(default = "default_split")]
    pub split_fraction: f64,
    #[serde(default = "default_bins")]
    pub m_bins: usize,
    #[serde(default = "default_replications")]
    pub n_replications: usize,
    #[serde(default)]
    pub seed: u64,
    /// Caps both validation sets (source and target) at this many samples.
    #[serde(default)]
    pub validation_size: Option<usize>,
}

impl ExperimentConfig {
    pub fn new(generator: GeneratorConfig) -> Self {
        ExperimentConfig {
            generator,
            classifier: default_classifier(),
            calibrators: default_calibrators(),
            weights_mode: default_weights_mode(),
            corrections: default_corrections(),
            split_fraction: default_split(),
            m_bins: default_bins(),
            n_replications: default_replications(),
            seed: 0,
            validation_size: None,
        }
    }

    pub fn mixture(source_ratio: Vec<f64>, target_ratio: Vec<f64>) -> Self {
        Self::new(GeneratorConfig::MixtureShift {
            config: MixtureShiftConfig::with_ratios(source_ratio, target_ratio),
        })
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |name: &str| {
            if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}.{name}")
            }
        };
        match &self.generator {
            GeneratorConfig::GaussianShift { config } => config.validate(&field("generator"))?,
            GeneratorConfig::MixtureShift { config } => config.validate(&field("generator"))?,
            GeneratorConfig::Files { .. } => {}
        }
        self.classifier.validate(&field("classifier"))?;
        if self.calibrators.is_empty() {
            return Err(Error::config(
                field("calibrators"),
                "must list at least one calibrator",
            ));
        }
        match &self.weights_mode {
            WeightsMode::GroundTruth => {}
            WeightsMode::Discriminator { learner, .. } => {
                learner.validate(&field("weights_mode.learner"))?
            }
            WeightsMode::NoisyGroundTruth { sigma } => {
                if !(*sigma >= 0.0 && sigma.is_finite()) {
                    return Err(Error::config(
                        field("weights_mode.sigma"),
                        "must be finite and >= 0",
                    ));
                }
            }
        }
        for (i, c) in self.corrections.iter().enumerate() {
            c.validate(&field(&format!("corrections[{i}]")))?;
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::config(field("split_fraction"), "must be in (0, 1)"));
        }
        if self.m_bins == 0 {
            return Err(Error::config(field("m_bins"), "must be >= 1"));
        }
        if self.n_replications == 0 {
            return Err(Error::config(field("n_replications"), "must be >= 1"));
        }
        if self.validation_size == Some(0) {
            return Err(Error::config(field("validation_size"), "must be >= 1"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Seeds used by one replication, all derived from `seed + index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplicationSeeds {
    pub data: u64,
    pub source_split: u64,
    pub target_split: u64,
    pub classifier: u64,
    pub weights: u64,
}

impl ReplicationSeeds {
    pub fn new(config: &ExperimentConfig, replication: usize) -> Self {
        let s = config.seed.wrapping_add(replication as u64);
        ReplicationSeeds {
            data: s,
            source_split: rng::mix(s, 1),
            target_split: rng::mix(s, 2),
            classifier: rng::mix(s, 3).wrapping_add(config.classifier.seed),
            weights: rng::mix(s, 4),
        }
    }
}

/// Source/target data with the ground-truth weights of the source rows.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub source: LabeledDataset,
    pub target: LabeledDataset,
    pub ground_truth: Option<ImportanceWeights>,
}

pub fn generate_data(generator: &GeneratorConfig, seed: u64) -> Result<GeneratedData> {
    match generator {
        GeneratorConfig::GaussianShift { config } => {
            let shift = GaussianShift::new(config)?;
            let (source, target) = shift.generate(seed)?;
            let ground_truth = shift.density_ratio(source.features())?;
            Ok(GeneratedData {
                source,
                target,
                ground_truth: Some(ground_truth),
            })
        }
        GeneratorConfig::MixtureShift { config } => {
            let (source, target, weights) = dataset::generate_mixture_shift(config, seed)?;
            Ok(GeneratedData {
                source,
                target,
                ground_truth: Some(weights),
            })
        }
        GeneratorConfig::Files {
            source,
            target,
            weights,
        } => {
            let source = LabeledDataset::read_csv(source)?;
            let target = LabeledDataset::read_csv(target)?;
            if source.dim() != target.dim() || source.n_classes() != target.n_classes() {
                return Err(Error::Shape(
                    "source and target files disagree on d or k".into(),
                ));
            }
            let ground_truth = weights
                .as_deref()
                .map(ImportanceWeights::read_csv)
                .transpose()?;
            if let Some(w) = &ground_truth {
                if w.len() != source.len() {
                    return Err(Error::Shape(format!(
                        "{} ground-truth weights for {} source rows",
                        w.len(),
                        source.len()
                    )));
                }
            }
            Ok(GeneratedData {
                source,
                target,
                ground_truth,
            })
        }
    }
}

/// Row indices of the four protocol subsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub source_train: Vec<usize>,
    pub source_validation: Vec<usize>,
    pub target_validation: Vec<usize>,
    pub target_test: Vec<usize>,
}

pub fn make_splits(
    config: &ExperimentConfig,
    data: &GeneratedData,
    seeds: &ReplicationSeeds,
) -> Result<Splits> {
    let (source_train, mut source_validation) =
        dataset::split_indices(data.source.len(), config.split_fraction, seeds.source_split)?;
    let (mut target_validation, target_test) = dataset::split_indices(
        data.target.len(),
        1.0 - config.split_fraction,
        seeds.target_split,
    )?;
    if let Some(cap) = config.validation_size {
        source_validation.truncate(cap);
        target_validation.truncate(cap);
    }
    if target_validation
        .iter()
        .any(|i| target_test.binary_search(i).is_ok())
    {
        return Err(Error::Shape("target validation and test overlap".into()));
    }
    Ok(Splits {
        source_train,
        source_validation,
        target_validation,
        target_test,
    })
}

pub fn train_classifier(
    config: &ExperimentConfig,
    train: &LabeledDataset,
    seeds: &ReplicationSeeds,
) -> Result<ProbabilisticModel> {
    let classifier = LearnerConfig {
        seed: seeds.classifier,
        ..config.classifier.clone()
    };
    learner::fit(
        &classifier,
        train.features(),
        train.labels(),
        None,
        Some(train.n_classes()),
    )
}

/// Importance weights for the source-validation rows, before corrections.
/// The classifier is only needed for [`DiscriminatorFeatures::ClassifierPenultimate`].
pub fn raw_validation_weights(
    config: &ExperimentConfig,
    data: &GeneratedData,
    splits: &Splits,
    classifier: Option<&ProbabilisticModel>,
    seeds: &ReplicationSeeds,
) -> Result<ImportanceWeights> {
    let ground_truth = || {
        data.ground_truth
            .as_ref()
            .map(|w| w.select(&splits.source_validation))
            .ok_or_else(|| {
                Error::config(
                    "weights_mode",
                    "ground-truth weights are not available for this generator",
                )
            })
    };
    match &config.weights_mode {
        WeightsMode::GroundTruth => ground_truth(),
        WeightsMode::NoisyGroundTruth { sigma } => ground_truth()?.add_noise(*sigma, seeds.weights),
        WeightsMode::Discriminator { learner, features } => {
            let source_train = data.source.select(&splits.source_train);
            let source_val = data.source.select(&splits.source_validation);
            let target_val = data.target.select(&splits.target_validation);
            let project = |x: ArrayView2<f64>| -> Result<Array2<f64>> {
                match features {
                    DiscriminatorFeatures::Raw => Ok(x.to_owned()),
                    DiscriminatorFeatures::ClassifierPenultimate => classifier
                        .ok_or_else(|| {
                            Error::config(
                                "weights_mode.features",
                                "penultimate features need a trained classifier",
                            )
                        })?
                        .penultimate_features(x),
                }
            };
            let learner = LearnerConfig {
                seed: seeds.weights.wrapping_add(learner.seed),
                ..learner.clone()
            };
            let ratio = DiscriminatorRatio::fit(
                project(source_train.features())?.view(),
                project(target_val.features())?.view(),
                &learner,
            )?;
            ratio.weights(project(source_val.features())?.view())
        }
    }
}

/// Everything measured in one replication.
#[derive(Debug, Clone)]
pub struct ReplicationResult {
    pub replication: usize,
    pub seeds: ReplicationSeeds,
    pub reports: BTreeMap<CalibratorType, BTreeMap<Method, EvaluationReport>>,
    pub calibrators: BTreeMap<CalibratorType, BTreeMap<Method, Calibrator>>,
    pub weights: ImportanceWeights,
    pub diagnostics: RatioDiagnostics,
    /// Classifier logits on target-test.
    pub test_logits: Array2<f64>,
    pub splits: Splits,
}

/// Per-sample squared error `(1 − p[y])²`, a loss in `[0, 1]`.
fn squared_error_losses(probs: ArrayView2<f64>, labels: &[usize]) -> Vec<f64> {
    probs
        .outer_iter()
        .zip(labels)
        .map(|(row, &y)| (1.0 - row[y]).powi(2))
        .collect()
}

pub fn run_replication(config: &ExperimentConfig, replication: usize) -> Result<ReplicationResult> {
    let seeds = ReplicationSeeds::new(config, replication);
    let data = generate_data(&config.generator, seeds.data)?;
    let splits = make_splits(config, &data, &seeds)?;
    let source_train = data.source.select(&splits.source_train);
    let source_val = data.source.select(&splits.source_validation);
    let target_val = data.target.select(&splits.target_validation);
    let target_test = data.target.select(&splits.target_test);

    let classifier = train_classifier(config, &source_train, &seeds)?;
    let weights = raw_validation_weights(config, &data, &splits, Some(&classifier), &seeds)?
        .apply_all(&config.corrections)?;

    let source_logits = classifier.predict_logits(source_val.features())?;
    let target_val_logits = classifier.predict_logits(target_val.features())?;
    let test_logits = classifier.predict_logits(target_test.features())?;
    let raw_test = learner::softmax_rows(test_logits.view())?;
    let uncalibrated = EvaluationReport::evaluate(
        raw_test.view(),
        target_test.labels(),
        config.m_bins,
        Method::Uncalibrated,
    )?;

    let uniform = vec![1.0; source_val.len()];
    let uniform_target = vec![1.0; target_val.len()];
    let mut reports = BTreeMap::new();
    let mut calibrators = BTreeMap::new();
    for &kind in &config.calibrators {
        let mut per_method = BTreeMap::new();
        let mut fitted = BTreeMap::new();
        per_method.insert(Method::Uncalibrated, uncalibrated.clone());
        let fits = [
            (
                Method::Unweighted,
                source_logits.view(),
                source_val.labels(),
                uniform.as_slice(),
            ),
            (
                Method::Weighted,
                source_logits.view(),
                source_val.labels(),
                weights.values(),
            ),
            (
                Method::UsingTarget,
                target_val_logits.view(),
                target_val.labels(),
                uniform_target.as_slice(),
            ),
        ];
        for (method, logits, labels, w) in fits {
            let cal = calibration::fit(kind, logits, labels, w)?;
            let probs = cal.apply(test_logits.view())?;
            per_method.insert(
                method,
                EvaluationReport::evaluate(
                    probs.view(),
                    target_test.labels(),
                    config.m_bins,
                    method,
                )?,
            );
            fitted.insert(method, cal);
        }
        reports.insert(kind, per_method);
        calibrators.insert(kind, fitted);
    }

    let source_probs = learner::softmax_rows(source_logits.view())?;
    let losses = squared_error_losses(source_probs.view(), source_val.labels());
    let diagnostics = importance::weighted_loss_variance_diagnostic(&losses, &weights, 1.0)?;

    Ok(ReplicationResult {
        replication,
        seeds,
        reports,
        calibrators,
        weights,
        diagnostics,
        test_logits,
        splits,
    })
}

/// Mean and sample standard deviation over replications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub ece_mean: f64,
    pub ece_std: f64,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub nll_mean: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    if sorted.len() < 2 {
        return (mean, 0.0);
    }
    let mut sq: Vec<f64> = sorted.iter().map(|v| (v - mean).powi(2)).collect();
    sq.sort_by(f64::total_cmp);
    (mean, (sq.iter().sum::<f64>() / (n - 1.0)).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub renyi_alpha: f64,
    pub renyi_divergence_mean: f64,
    pub effective_sample_size_mean: f64,
    pub weight_variance_mean: f64,
    pub weighted_loss_variance_mean: f64,
    pub variance_bound_mean: f64,
    /// Replications whose weighted-loss variance respected the bound.
    pub bound_respected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedReplication {
    pub replication: usize,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub config_digest: String,
    pub n_replications: usize,
    pub per_method: BTreeMap<Method, BTreeMap<CalibratorType, Summary>>,
    pub diagnostics: DiagnosticsSummary,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub failed_replications: Vec<FailedReplication>,
    #[serde(skip)]
    pub replications: Vec<ReplicationResult>,
}

impl ExperimentReport {
    pub fn summary(&self, method: Method, calibrator: CalibratorType) -> Option<&Summary> {
        self.per_method.get(&method)?.get(&calibrator)
    }

    /// Per-replication ECE values in replication order.
    pub fn ece_values(&self, method: Method, calibrator: CalibratorType) -> Vec<f64> {
        self.replications
            .iter()
            .filter_map(|r| r.reports.get(&calibrator)?.get(&method).map(|e| e.ece))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn aggregate(
    config: &ExperimentConfig,
    results: Vec<Result<ReplicationResult>>,
) -> Result<ExperimentReport> {
    let mut replications = Vec::new();
    let mut failed = Vec::new();
    let mut first_error = None;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(r) => replications.push(r),
            Err(e) => {
                log::warn!("replication {i} failed: {e}");
                failed.push(FailedReplication {
                    replication: i,
                    error: e.to_string(),
                });
                first_error.get_or_insert(Error::Replication {
                    replication: i,
                    source: Box::new(e),
                });
            }
        }
    }
    if replications.is_empty() {
        return Err(first_error.expect("at least one replication ran"));
    }

    let mut per_method: BTreeMap<Method, BTreeMap<CalibratorType, Summary>> = BTreeMap::new();
    for &kind in &config.calibrators {
        for method in Method::ALL {
            let pick = |f: fn(&EvaluationReport) -> f64| -> Vec<f64> {
                replications
                    .iter()
                    .map(|r| f(&r.reports[&kind][&method]))
                    .collect()
            };
            let (ece_mean, ece_std) = mean_std(&pick(|e| e.ece));
            let (acc_mean, acc_std) = mean_std(&pick(|e| e.accuracy));
            let (nll_mean, _) = mean_std(&pick(|e| e.nll));
            per_method.entry(method).or_default().insert(
                kind,
                Summary {
                    ece_mean,
                    ece_std,
                    acc_mean,
                    acc_std,
                    nll_mean,
                },
            );
        }
    }
    let diag = |f: fn(&RatioDiagnostics) -> f64| {
        mean_std(
            &replications
                .iter()
                .map(|r| f(&r.diagnostics))
                .collect::<Vec<_>>(),
        )
        .0
    };
    let diagnostics = DiagnosticsSummary {
        renyi_alpha: replications[0].diagnostics.renyi_alpha,
        renyi_divergence_mean: diag(|d| d.renyi_divergence_estimate),
        effective_sample_size_mean: diag(|d| d.effective_sample_size),
        weight_variance_mean: diag(|d| d.weight_variance),
        weighted_loss_variance_mean: diag(|d| d.weighted_loss_variance),
        variance_bound_mean: diag(|d| d.variance_bound),
        bound_respected: replications
            .iter()
            .filter(|r| r.diagnostics.respects_bound)
            .count(),
    };
    Ok(ExperimentReport {
        config_digest: config.digest(),
        n_replications: config.n_replications,
        per_method,
        diagnostics,
        failed_replications: failed,
        replications,
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment_with_jobs(config, 1)
}

/// Runs replications on up to `jobs` threads; the report does not depend on `jobs`.
pub fn run_experiment_with_jobs(
    config: &ExperimentConfig,
    jobs: usize,
) -> Result<ExperimentReport> {
    config.validate("experiment")?;
    let results: Vec<Result<ReplicationResult>> = if jobs <= 1 {
        (0..config.n_replications)
            .map(|r| run_replication(config, r))
            .collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::config("jobs", e.to_string()))?;
        pool.install(|| {
            (0..config.n_replications)
                .into_par_iter()
                .map(|r| run_replication(config, r))
                .collect()
        })
    };
    aggregate(config, results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SweepAxis {
    /// Target mixing ratios; requires a mixture generator. The axis value is
    /// the closed-form `d₂` divergence of target from source class proportions.
    Divergence { target_ratios: Vec<Vec<f64>> },
    /// Cap on the number of validation samples.
    ValidationSize { sizes: Vec<usize> },
    /// Standard deviation of noise added to ground-truth weights.
    WeightNoise { sigmas: Vec<f64> },
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Divergence { .. } => "divergence",
            SweepAxis::ValidationSize { .. } => "validation_size",
            SweepAxis::WeightNoise { .. } => "weight_noise",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub base: ExperimentConfig,
}

impl SweepSpec {
    /// Experiment config and axis value of every grid point.
    pub fn grid(&self) -> Result<Vec<(f64, ExperimentConfig)>> {
        self.base.validate("sweep.base")?;
        let points: Vec<(f64, ExperimentConfig)> = match &self.axis {
            SweepAxis::Divergence { target_ratios } => {
                let GeneratorConfig::MixtureShift { config } = &self.base.generator else {
                    return Err(Error::config(
                        "sweep.axis",
                        "divergence sweeps need a mixture_shift generator",
                    ));
                };
                target_ratios
                    .iter()
                    .map(|ratio| {
                        let mut mixture = config.clone();
                        mixture.target_ratio = ratio.clone();
                        mixture.validate("sweep.axis.target_ratios")?;
                        let value = importance::discrete_renyi_divergence(
                            ratio,
                            &config.source_ratio,
                            1.0,
                        )?;
                        let mut point = self.base.clone();
                        point.generator = GeneratorConfig::MixtureShift { config: mixture };
                        Ok((value, point))
                    })
                    .collect::<Result<_>>()?
            }
            SweepAxis::ValidationSize { sizes } => sizes
                .iter()
                .map(|&size| {
                    let mut point = self.base.clone();
                    point.validation_size = Some(size);
                    (size as f64, point)
                })
                .collect(),
            SweepAxis::WeightNoise { sigmas } => {
                if self.base.weights_mode != WeightsMode::GroundTruth {
                    return Err(Error::config(
                        "sweep.base.weights_mode",
                        "weight-noise sweeps start from ground_truth",
                    ));
                }
                sigmas
                    .iter()
                    .map(|&sigma| {
                        let mut point = self.base.clone();
                        point.weights_mode = WeightsMode::NoisyGroundTruth { sigma };
                        (sigma, point)
                    })
                    .collect()
            }
        };
        if points.is_empty() {
            return Err(Error::config("sweep.axis", "grid must not be empty"));
        }
        if points.windows(2).any(|p| !(p[1].0 > p[0].0)) {
            return Err(Error::config(
                "sweep.axis",
                "grid must be strictly increasing",
            ));
        }
        for (_, p) in &points {
            p.validate("sweep.base")?;
        }
        Ok(points)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub axis_value: f64,
    pub report: ExperimentReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub axis: String,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    /// Long format: `axis_value,method,calibrator,ece_mean,ece_std`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis_value,method,calibrator,ece_mean,ece_std\n");
        for point in &self.points {
            for (method, per_cal) in &point.report.per_method {
                for (cal, s) in per_cal {
                    writeln!(
                        out,
                        "{},{},{},{},{}",
                        point.axis_value, method, cal, s.ece_mean, s.ece_std
                    )
                    .expect("writing to a String");
                }
            }
        }
        out
    }

    pub fn series(&self, method: Method, calibrator: CalibratorType) -> Vec<Summary> {
        self.points
            .iter()
            .filter_map(|p| p.report.summary(method, calibrator).copied())
            .collect()
    }
}

pub fn run_sweep(spec: &SweepSpec) -> Result<SweepReport> {
    run_sweep_with_jobs(spec, 1)
}

pub fn run_sweep_with_jobs(spec: &SweepSpec, jobs: usize) -> Result<SweepReport> {
    let points = spec
        .grid()?
        .into_iter()
        .map(|(axis_value, config)| {
            Ok(SweepPoint {
                axis_value,
                report: run_experiment_with_jobs(&config, jobs)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        axis: spec.axis.name().to_string(),
        points,
    })
}

/// Settings for the two-Gaussian isotonic demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Figure2Options {
    /// Heavily penalized linear model. On correlated source inputs the penalty
    /// spreads its score onto the second coordinate, which carries no label signal.
    pub classifier: LearnerConfig,
    pub mesh_points: usize,
    pub m_bins: usize,
    pub split_fraction: f64,
    pub seed: u64,
}

impl Default for Figure2Options {
    fn default() -> Self {
        Figure2Options {
            classifier: LearnerConfig {
                architecture: Architecture::Linear,
                l2_penalty: 0.5,
                learning_rate: 1.0,
                max_epochs: 500,
                batch_size: None,
                tolerance: 1e-9,
                seed: 0,
            },
            mesh_points: 60,
            m_bins: 10,
            split_fraction: 0.7,
            seed: 0,
        }
    }
}

/// Outputs of [`replicate_figure2`]. Surfaces hold calibrated `P(Y = 1 | x)`
/// on the mesh, row-major with `x₁` varying fastest.
#[derive(Debug, Clone)]
pub struct Figure2Bundle {
    pub source: LabeledDataset,
    pub target: LabeledDataset,
    pub mesh_x: Vec<f64>,
    pub mesh_y: Vec<f64>,
    pub surfaces: BTreeMap<String, Vec<f64>>,
    pub reliability: BTreeMap<Method, ReliabilityBins>,
    /// Mean |surface − target-calibrated| over target-test points.
    pub deviation_from_target: BTreeMap<Method, f64>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Two-Gaussian demo: isotonic calibration fit on source, on target, and on
/// source with exact density-ratio weights, compared on the target domain.
pub fn replicate_figure2(
    config: &GaussianShiftConfig,
    options: &Figure2Options,
) -> Result<Figure2Bundle> {
    if config.source_mean.len() != 2 {
        return Err(Error::config(
            "generator.source_mean",
            "the demo is two-dimensional",
        ));
    }
    if options.mesh_points == 0 {
        return Err(Error::config("mesh_points", "must be >= 1"));
    }
    let shift = GaussianShift::new(config)?;
    let (source, target) = shift.generate(options.seed)?;
    let (train_idx, val_idx) = dataset::split_indices(
        source.len(),
        options.split_fraction,
        rng::mix(options.seed, 1),
    )?;
    let (tval_idx, test_idx) = dataset::split_indices(
        target.len(),
        1.0 - options.split_fraction,
        rng::mix(options.seed, 2),
    )?;
    let train = source.select(&train_idx);
    let val = source.select(&val_idx);
    let target_val = target.select(&tval_idx);
    let test = target.select(&test_idx);

    let classifier = learner::fit(
        &options.classifier,
        train.features(),
        train.labels(),
        None,
        Some(2),
    )?;
    let weights = shift.density_ratio(val.features())?.self_normalize()?;
    let val_logits = classifier.predict_logits(val.features())?;
    let tval_logits = classifier.predict_logits(target_val.features())?;

    let fitted = [
        (
            Method::Unweighted,
            calibration::fit_isotonic_calibrator(
                val_logits.view(),
                val.labels(),
                &vec![1.0; val.len()],
            )?,
        ),
        (
            Method::Weighted,
            calibration::fit_isotonic_calibrator(
                val_logits.view(),
                val.labels(),
                weights.values(),
            )?,
        ),
        (
            Method::UsingTarget,
            calibration::fit_isotonic_calibrator(
                tval_logits.view(),
                target_val.labels(),
                &vec![1.0; target_val.len()],
            )?,
        ),
    ];

    let all = ndarray::concatenate(ndarray::Axis(0), &[source.features(), target.features()])
        .map_err(|e| Error::Shape(e.to_string()))?;
    let bounds = |c: usize| {
        let col = all.column(c);
        (
            col.fold(f64::INFINITY, |m, &v| m.min(v)),
            col.fold(f64::NEG_INFINITY, |m, &v| m.max(v)),
        )
    };
    let (x_lo, x_hi) = bounds(0);
    let (y_lo, y_hi) = bounds(1);
    let mesh_x = linspace(x_lo, x_hi, options.mesh_points);
    let mesh_y = linspace(y_lo, y_hi, options.mesh_points);
    let mesh = Array2::from_shape_fn((mesh_x.len() * mesh_y.len(), 2), |(i, c)| {
        if c == 0 {
            mesh_x[i % mesh_x.len()]
        } else {
            mesh_y[i / mesh_x.len()]
        }
    });
    let mesh_logits = classifier.predict_logits(mesh.view())?;
    let test_logits = classifier.predict_logits(test.features())?;

    let mut surfaces = BTreeMap::new();
    surfaces.insert(
        "true".to_string(),
        mesh.outer_iter()
            .map(|x| config.label_rule.positive_probability(x))
            .collect(),
    );
    surfaces.insert(
        "classifier".to_string(),
        learner::softmax_rows(mesh_logits.view())?
            .column(1)
            .to_vec(),
    );
    let raw_test = learner::softmax_rows(test_logits.view())?;
    let mut reliability = BTreeMap::new();
    reliability.insert(
        Method::Uncalibrated,
        metrics::reliability_bins(raw_test.view(), test.labels(), options.m_bins)?,
    );
    let mut test_surfaces = BTreeMap::new();
    for (method, cal) in &fitted {
        surfaces.insert(
            method.to_string(),
            cal.apply(mesh_logits.view())?.column(1).to_vec(),
        );
        let probs = cal.apply(test_logits.view())?;
        reliability.insert(
            *method,
            metrics::reliability_bins(probs.view(), test.labels(), options.m_bins)?,
        );
        test_surfaces.insert(*method, probs.column(1).to_vec());
    }
    let reference = &test_surfaces[&Method::UsingTarget];
    let deviation_from_target = [Method::Unweighted, Method::Weighted]
        .into_iter()
        .map(|m| {
            let mad = test_surfaces[&m]
                .iter()
                .zip(reference)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / reference.len() as f64;
            (m, mad)
        })
        .collect();

    Ok(Figure2Bundle {
        source,
        target,
        mesh_x,
        mesh_y,
        surfaces,
        reliability,
        deviation_from_target,
    })
}

impl Figure2Bundle {
    /// Writes `scatter.csv`, `surfaces.csv` and one `reliability_<method>.csv` per method.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut scatter = String::from("domain,x1,x2,label\n");
        for ds in [&self.source, &self.target] {
            for (row, y) in ds.features().outer_iter().zip(ds.labels()) {
                writeln!(scatter, "{},{},{},{}", ds.domain, row[0], row[1], y)
                    .expect("writing to a String");
            }
        }
        let names: Vec<&String> = self.surfaces.keys().collect();
        let mut surfaces = format!(
            "x1,x2,{}\n",
            names
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(",")
        );
        for i in 0..self.mesh_x.len() * self.mesh_y.len() {
            let x = self.mesh_x[i % self.mesh_x.len()];
            let y = self.mesh_y[i / self.mesh_x.len()];
            let values: Vec<String> = names
                .iter()
                .map(|n| self.surfaces[*n][i].to_string())
                .collect();
            writeln!(surfaces, "{x},{y},{}", values.join(",")).expect("writing to a String");
        }
        let write = |name: &str, text: &str| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(path, e))
        };
        write("scatter.csv", &scatter)?;
        write("surfaces.csv", &surfaces)?;
        for (method, bins) in &self.reliability {
            write(&format!("reliability_{method}.csv"), &bins.to_csv())?;
        }
        Ok(())
    }
}
