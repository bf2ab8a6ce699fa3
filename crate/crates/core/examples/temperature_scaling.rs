//! Temperature scaling of an overconfident classifier under label shift,
//! with and without importance weights on the source validation set.

use shiftcal::calibration::{fit_temperature, CalibratorKind};
use shiftcal::dataset::{generate_mixture_shift, split_indices};
use shiftcal::learner::{self, softmax_rows};
use shiftcal::{metrics, LearnerConfig, MixtureShiftConfig};

fn main() -> shiftcal::Result<()> {
    let config = MixtureShiftConfig::with_ratios(vec![1.0, 4.0], vec![4.0, 1.0]);
    let (source, target, weights) = generate_mixture_shift(&config, 3)?;
    let (train_idx, val_idx) = split_indices(source.len(), 0.7, 1)?;
    let (train, val) = (source.select(&train_idx), source.select(&val_idx));

    // no penalty and many epochs: the logits grow too large
    let classifier = LearnerConfig {
        l2_penalty: 0.0,
        max_epochs: 2000,
        ..LearnerConfig::default()
    };
    let model = learner::fit(&classifier, train.features(), train.labels(), None, None)?;

    let val_logits = model.predict_logits(val.features())?;
    let test_logits = model.predict_logits(target.features())?;
    let w = weights.select(&val_idx).self_normalize()?;

    let raw = softmax_rows(test_logits.view())?;
    println!("{:<12} {:>6} {:>8}", "fit", "T", "ECE");
    println!(
        "{:<12} {:>6} {:>8.4}",
        "none",
        "1",
        metrics::ece(raw.view(), target.labels(), 15)?
    );
    for (name, fit_weights) in [
        ("unweighted", vec![1.0; val.len()]),
        ("weighted", w.values().to_vec()),
    ] {
        let cal = fit_temperature(val_logits.view(), val.labels(), &fit_weights)?;
        let CalibratorKind::Temperature { temperature } = cal.kind else {
            unreachable!()
        };
        let probs = cal.apply(test_logits.view())?;
        let ece = metrics::ece(probs.view(), target.labels(), 15)?;
        println!("{name:<12} {temperature:>6.3} {ece:>8.4}");
    }
    Ok(())
}
