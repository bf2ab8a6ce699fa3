//! Multiclass Platt scaling: a K x K affine map of the logits fit by
//! weighted cross-entropy. Three classes, source 1:1:4, target 4:1:1.

use shiftcal::calibration::{fit_platt, CalibratorKind};
use shiftcal::dataset::{generate_mixture_shift, split_indices, ClassFeatures};
use shiftcal::harness::default_classifier;
use shiftcal::{learner, EvaluationReport, Method, MixtureShiftConfig};

fn main() -> shiftcal::Result<()> {
    let mut config = MixtureShiftConfig::with_ratios(vec![1.0, 1.0, 4.0], vec![4.0, 1.0, 1.0]);
    config.class_features = ClassFeatures::Separated {
        dim: 3,
        distance: 2.5,
        seed: 4,
    };
    let (source, target, weights) = generate_mixture_shift(&config, 5)?;
    let (train_idx, val_idx) = split_indices(source.len(), 0.7, 6)?;
    let (train, val) = (source.select(&train_idx), source.select(&val_idx));

    let model = learner::fit(
        &default_classifier(),
        train.features(),
        train.labels(),
        None,
        None,
    )?;
    let val_logits = model.predict_logits(val.features())?;
    let test_logits = model.predict_logits(target.features())?;

    let raw = learner::softmax_rows(test_logits.view())?;
    let report = EvaluationReport::evaluate(raw.view(), target.labels(), 15, Method::Uncalibrated)?;
    println!(
        "uncalibrated  ECE {:.4}  acc {:.3}  NLL {:.4}",
        report.ece, report.accuracy, report.nll
    );

    let w = weights.select(&val_idx).self_normalize()?;
    let cal = fit_platt(val_logits.view(), val.labels(), w.values())?;
    let probs = cal.apply(test_logits.view())?;
    let report = EvaluationReport::evaluate(probs.view(), target.labels(), 15, Method::Weighted)?;
    println!(
        "weighted      ECE {:.4}  acc {:.3}  NLL {:.4}",
        report.ece, report.accuracy, report.nll
    );

    if let CalibratorKind::Platt { weights, bias } = &cal.kind {
        for (row, b) in weights.iter().zip(bias) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:7.3}")).collect();
            println!("  [{}] + {b:7.3}", cells.join(" "));
        }
    }
    Ok(())
}
