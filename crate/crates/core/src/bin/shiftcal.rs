//! Command-line driver for the calibration pipeline.
//!
//! Exit codes: 0 on success, 1 on invalid input or configuration, 2 on
//! runtime failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use shiftcal::calibration::{self, CalibratorType};
use shiftcal::config::CliConfig;
use shiftcal::dataset::LabeledDataset;
use shiftcal::harness::{self, GeneratedData, ReplicationSeeds, Splits};
use shiftcal::importance::{self, Provenance};
use shiftcal::learner;
use shiftcal::metrics::{self, EvaluationReport, Method};
use shiftcal::{Calibrator, Error, ImportanceWeights, ProbabilisticModel, Result};

#[derive(Parser)]
#[command(
    name = "shiftcal",
    version,
    about = "Importance-weighted calibration under covariate shift"
)]
struct Cli {
    /// Print errors to stderr as a JSON object.
    #[arg(long, global = true)]
    json_errors: bool,

    /// Override a configuration leaf, e.g. `--set experiment.seed=3`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON configuration document.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate source/target CSVs, ground-truth weights, and replication-0 splits.
    Generate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the classifier on the source-train split.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Importance weights for the source-validation rows, corrections applied.
    EstimateWeights {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        /// Needed when the discriminator reads classifier features.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one calibrator in one mode.
    Calibrate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Weights from `estimate-weights`; required for `--mode weighted`.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Defaults to the first calibrator listed in the configuration.
        #[arg(long)]
        calibrator: Option<CalibratorType>,
        #[arg(long, value_enum)]
        mode: Option<FitMode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model, optionally calibrated, on the target-test split.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calibrator: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = metrics::DEFAULT_BINS)]
        bins: usize,
        /// Label stored in the report; inferred from the calibrator when omitted.
        #[arg(long, value_enum)]
        method: Option<FitMode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full protocol over all replications.
    Experiment {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the experiment at every point of the document's sweep axis.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FitMode {
    Unweighted,
    Weighted,
    #[value(name = "using_target", alias = "using-target")]
    UsingTarget,
}

impl From<FitMode> for Method {
    fn from(mode: FitMode) -> Self {
        match mode {
            FitMode::Unweighted => Method::Unweighted,
            FitMode::Weighted => Method::Weighted,
            FitMode::UsingTarget => Method::UsingTarget,
        }
    }
}

const SOURCE_CSV: &str = "source.csv";
const TARGET_CSV: &str = "target.csv";
const WEIGHTS_CSV: &str = "weights.csv";
const SPLITS_JSON: &str = "splits.json";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_splits(data: &Path) -> Result<Splits> {
    let path = data.join(SPLITS_JSON);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Data written by `generate`, in the same form the harness produces it.
fn read_data(data: &Path) -> Result<GeneratedData> {
    let weights = data.join(WEIGHTS_CSV);
    Ok(GeneratedData {
        source: LabeledDataset::read_csv(&data.join(SOURCE_CSV))?,
        target: LabeledDataset::read_csv(&data.join(TARGET_CSV))?,
        ground_truth: if weights.exists() {
            Some(ImportanceWeights::read_csv(&weights)?)
        } else {
            None
        },
    })
}

fn generate(config: &CliConfig, out: &Path) -> Result<()> {
    let experiment = &config.experiment;
    let seeds = ReplicationSeeds::new(experiment, 0);
    let data = harness::generate_data(&experiment.generator, seeds.data)?;
    let splits = harness::make_splits(experiment, &data, &seeds)?;
    create_dir(out)?;
    data.source.write_csv(&out.join(SOURCE_CSV))?;
    data.target.write_csv(&out.join(TARGET_CSV))?;
    if let Some(w) = &data.ground_truth {
        w.write_csv(&out.join(WEIGHTS_CSV))?;
    }
    write_text(&out.join(SPLITS_JSON), &serde_json::to_string(&splits)?)?;
    println!(
        "source: {} rows, target: {} rows, d = {}, k = {}",
        data.source.len(),
        data.target.len(),
        data.source.dim(),
        data.source.n_classes()
    );
    Ok(())
}

fn train(config: &CliConfig, data_dir: &Path, out: &Path) -> Result<()> {
    let experiment = &config.experiment;
    let seeds = ReplicationSeeds::new(experiment, 0);
    let data = read_data(data_dir)?;
    let splits = read_splits(data_dir)?;
    let train = data.source.select(&splits.source_train);
    let val = data.source.select(&splits.source_validation);
    let model = harness::train_classifier(experiment, &train, &seeds)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    model.save_json(out)?;
    let train_acc = metrics::accuracy(
        model.predict_proba(train.features())?.view(),
        train.labels(),
    )?;
    let val_acc = metrics::accuracy(model.predict_proba(val.features())?.view(), val.labels())?;
    println!("train accuracy {train_acc:.4}, validation accuracy {val_acc:.4}");
    Ok(())
}

fn estimate_weights(
    config: &CliConfig,
    data_dir: &Path,
    model: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let experiment = &config.experiment;
    let seeds = ReplicationSeeds::new(experiment, 0);
    let data = read_data(data_dir)?;
    let splits = read_splits(data_dir)?;
    let model = model.map(ProbabilisticModel::load_json).transpose()?;
    let weights =
        harness::raw_validation_weights(experiment, &data, &splits, model.as_ref(), &seeds)?
            .apply_all(&experiment.corrections)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    weights.write_csv(out)?;

    let labels = data
        .source
        .select(&splits.source_validation)
        .labels()
        .to_vec();
    let mut per_class: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (&w, &y) in weights.values().iter().zip(&labels) {
        let entry = per_class.entry(y).or_default();
        entry.0 += w;
        entry.1 += 1;
    }
    let (renyi, _) = importance::renyi_divergence_estimate(&weights, 1.0)?;
    println!(
        "provenance {}, {} weights",
        weights.provenance,
        weights.len()
    );
    println!(
        "effective sample size {:.1}",
        weights.effective_sample_size()
    );
    println!("divergence estimate (alpha = 1) {renyi:.4}");
    for (class, (sum, n)) in per_class {
        println!(
            "class {class}: mean weight {:.4} over {n} samples",
            sum / n as f64
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn calibrate(
    config: &CliConfig,
    model: &Path,
    data_dir: &Path,
    weights: Option<&Path>,
    kind: Option<CalibratorType>,
    mode: Option<FitMode>,
    out: &Path,
) -> Result<()> {
    let kind = kind.unwrap_or(config.experiment.calibrators[0]);
    let model = ProbabilisticModel::load_json(model)?;
    let data = read_data(data_dir)?;
    let splits = read_splits(data_dir)?;
    let mode = mode.unwrap_or(if weights.is_some() {
        FitMode::Weighted
    } else {
        FitMode::Unweighted
    });
    let fit_set = match mode {
        FitMode::UsingTarget => data.target.select(&splits.target_validation),
        _ => data.source.select(&splits.source_validation),
    };
    let values = match (mode, weights) {
        (FitMode::Weighted, Some(path)) => {
            let w = ImportanceWeights::read_csv(path)?;
            if w.provenance == Provenance::Uniform {
                log::warn!("weights file is marked uniform");
            }
            w.values().to_vec()
        }
        (FitMode::Weighted, None) => {
            return Err(Error::config("--weights", "required for --mode weighted"))
        }
        (_, Some(_)) => return Err(Error::config("--weights", "only used with --mode weighted")),
        (_, None) => vec![1.0; fit_set.len()],
    };
    if values.len() != fit_set.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} validation rows",
            values.len(),
            fit_set.len()
        )));
    }
    let logits = model.predict_logits(fit_set.features())?;
    let calibrator = calibration::fit(kind, logits.view(), fit_set.labels(), &values)?;
    for warning in &calibrator.fit_record.warnings {
        log::warn!("{warning}");
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    calibrator.save_json(out)?;
    println!(
        "{kind} calibrator fit on {} rows, final loss {:.6}",
        calibrator.fit_record.n_fit, calibrator.fit_record.final_loss
    );
    Ok(())
}

fn evaluate(
    model: &Path,
    calibrator: Option<&Path>,
    data_dir: &Path,
    bins: usize,
    method: Option<FitMode>,
    out: &Path,
) -> Result<()> {
    if bins == 0 {
        return Err(Error::config("--bins", "must be >= 1"));
    }
    let model = ProbabilisticModel::load_json(model)?;
    let data = read_data(data_dir)?;
    let splits = read_splits(data_dir)?;
    let test = data.target.select(&splits.target_test);
    let logits = model.predict_logits(test.features())?;
    let (probs, method) = match calibrator {
        None => (learner::softmax_rows(logits.view())?, Method::Uncalibrated),
        Some(path) => {
            let cal = Calibrator::load_json(path)?;
            let inferred = match cal.fit_record.weights_used {
                calibration::WeightsUsed::Importance => Method::Weighted,
                _ => Method::Unweighted,
            };
            (
                cal.apply(logits.view())?,
                method.map(Method::from).unwrap_or(inferred),
            )
        }
    };
    let report = EvaluationReport::evaluate(probs.view(), test.labels(), bins, method)?;
    create_dir(out)?;
    write_text(
        &out.join("report.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    write_text(&out.join("reliability.csv"), &report.bins.to_csv())?;
    println!(
        "{method}: ece {:.4}, accuracy {:.4}, nll {:.4} on {} target-test rows",
        report.ece,
        report.accuracy,
        report.nll,
        test.len()
    );
    Ok(())
}

fn print_table(report: &harness::ExperimentReport) {
    println!(
        "{:<14} {:<12} {:>10} {:>10} {:>10}",
        "method", "calibrator", "ece", "ece_std", "accuracy"
    );
    for (method, per_cal) in &report.per_method {
        for (cal, s) in per_cal {
            println!(
                "{:<14} {:<12} {:>10.4} {:>10.4} {:>10.4}",
                method.as_str(),
                cal.as_str(),
                s.ece_mean,
                s.ece_std,
                s.acc_mean
            );
        }
    }
}

fn experiment(config: &CliConfig, out: &Path, jobs: usize) -> Result<()> {
    let report = harness::run_experiment_with_jobs(&config.experiment, jobs)?;
    create_dir(out)?;
    write_text(&out.join("report.json"), &report.to_json()?)?;
    print_table(&report);
    if !report.failed_replications.is_empty() {
        eprintln!("{} replication(s) failed", report.failed_replications.len());
    }
    Ok(())
}

fn sweep(config: &CliConfig, out: &Path, jobs: usize) -> Result<()> {
    let report = harness::run_sweep_with_jobs(&config.sweep_spec()?, jobs)?;
    create_dir(out)?;
    write_text(
        &out.join("report.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    let csv = report.to_csv();
    write_text(&out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let load = |c: &ConfigArg| CliConfig::load(&c.config, &cli.overrides);
    match &cli.command {
        Command::Generate { config, out } => generate(&load(config)?, out),
        Command::Train { config, data, out } => train(&load(config)?, data, out),
        Command::EstimateWeights {
            config,
            data,
            model,
            out,
        } => estimate_weights(&load(config)?, data, model.as_deref(), out),
        Command::Calibrate {
            config,
            model,
            data,
            weights,
            calibrator,
            mode,
            out,
        } => calibrate(
            &load(config)?,
            model,
            data,
            weights.as_deref(),
            *calibrator,
            *mode,
            out,
        ),
        Command::Evaluate {
            model,
            calibrator,
            data,
            bins,
            method,
            out,
        } => {
            if !cli.overrides.is_empty() {
                return Err(Error::config("--set", "evaluate takes no configuration"));
            }
            evaluate(model, calibrator.as_deref(), data, *bins, *method, out)
        }
        Command::Experiment { config, out, jobs } => experiment(&load(config)?, out, *jobs),
        Command::Sweep { config, out, jobs } => sweep(&load(config)?, out, *jobs),
    }
}

fn report_error(json_errors: bool, kind: &str, message: &str, field: Option<&str>) {
    if json_errors {
        eprintln!(
            "{}",
            json!({"error": {"kind": kind, "message": message, "field": field}})
        );
    } else {
        eprintln!("error: {message}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let json_errors = std::env::args().any(|a| a == "--json-errors");
            if json_errors {
                report_error(true, "validation", e.to_string().trim(), None);
            } else {
                let _ = e.print();
            }
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let field = match &e {
                Error::Config { field, .. } => Some(field.as_str()),
                _ => None,
            };
            let (kind, code) = if e.is_validation() {
                ("validation", 1)
            } else {
                ("runtime", 2)
            };
            report_error(cli.json_errors, kind, &e.to_string(), field);
            ExitCode::from(code)
        }
    }
}
