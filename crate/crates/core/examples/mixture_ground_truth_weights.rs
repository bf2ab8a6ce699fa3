//! Class-proportion shift with exact importance weights.
//!
//! Source classes are mixed 1:4 and target 4:1, so every source sample of
//! class 0 has weight 4 and every sample of class 1 has weight 1/4.

use shiftcal::dataset::generate_mixture_shift;
use shiftcal::importance::{discrete_renyi_divergence, renyi_divergence_estimate};
use shiftcal::MixtureShiftConfig;

fn main() -> shiftcal::Result<()> {
    let config = MixtureShiftConfig::with_ratios(vec![1.0, 4.0], vec![4.0, 1.0]);
    let (source, target, weights) = generate_mixture_shift(&config, 7)?;

    println!("class weights {:?}", config.class_weights());
    for (name, ds) in [("source", &source), ("target", &target)] {
        let ones = ds.labels().iter().filter(|&&y| y == 1).count();
        println!(
            "{name}: n = {}, class-1 share {:.3}",
            ds.len(),
            ones as f64 / ds.len() as f64
        );
    }

    let (estimate, normalized) = renyi_divergence_estimate(&weights, 1.0)?;
    let exact = discrete_renyi_divergence(&config.target_ratio, &config.source_ratio, 1.0)?;
    println!("d_2 plug-in {estimate:.3} (self-normalized: {normalized}), closed form {exact:.3}");
    println!(
        "mean weight {:.3}, effective sample size {:.0} of {}",
        weights.mean(),
        weights.effective_sample_size(),
        weights.len()
    );
    Ok(())
}
