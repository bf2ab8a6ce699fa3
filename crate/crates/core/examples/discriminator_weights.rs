//! Density ratios from a source-vs-target classifier, checked against the
//! known class-proportion ratios (4 for class 0, 1/4 for class 1).

use shiftcal::dataset::{generate_mixture_shift, ClassFeatures};
use shiftcal::harness::default_discriminator;
use shiftcal::importance::DiscriminatorRatio;
use shiftcal::MixtureShiftConfig;

fn main() -> shiftcal::Result<()> {
    let mut config = MixtureShiftConfig::with_ratios(vec![1.0, 4.0], vec![4.0, 1.0]);
    config.class_features = ClassFeatures::Separated {
        dim: 2,
        distance: 5.0,
        seed: 0,
    };
    config.n_source = 5000;
    config.n_target = 5000;
    let (source, target, truth) = generate_mixture_shift(&config, 1)?;

    let ratio = DiscriminatorRatio::fit(
        source.features(),
        target.features(),
        &default_discriminator(),
    )?;
    let estimated = ratio.weights(source.features())?;

    for class in 0..2 {
        let (mut est, mut exact, mut n) = (0.0, 0.0, 0.0);
        for i in (0..source.len()).filter(|&i| source.labels()[i] == class) {
            est += estimated.values()[i];
            exact += truth.values()[i];
            n += 1.0;
        }
        println!(
            "class {class}: mean estimated weight {:.3}, exact {:.3}",
            est / n,
            exact / n
        );
    }
    let corrected = estimated.self_normalize()?.clip(20.0)?;
    println!(
        "ESS after self_normalize + clip(20): {:.0}",
        corrected.effective_sample_size()
    );
    Ok(())
}
