//! Corrections applied to heavy-tailed weights and their effect on the
//! effective sample size and the Renyi estimate.

use shiftcal::importance::renyi_divergence_estimate;
use shiftcal::{ImportanceWeights, Provenance, WeightCorrection};

fn main() -> shiftcal::Result<()> {
    let raw: Vec<f64> = (0..1000)
        .map(|i| (-3.0 + 6.0 * i as f64 / 999.0_f64).exp())
        .collect();
    let w = ImportanceWeights::new(raw, Provenance::GroundTruth)?;

    let chains = [
        vec!["self_normalize"],
        vec!["flatten(0.5)", "self_normalize"],
        vec!["clip(5)", "self_normalize"],
        vec!["flatten(0)"],
    ];
    println!(
        "{:<36} {:>8} {:>8} {:>8}",
        "corrections", "max", "ESS", "d_2"
    );
    for names in chains {
        let chain = names
            .iter()
            .map(|s| {
                s.parse()
                    .map_err(|e: String| shiftcal::Error::config("corrections", e))
            })
            .collect::<shiftcal::Result<Vec<WeightCorrection>>>()?;
        let c = w.apply_all(&chain)?;
        let max = c.values().iter().cloned().fold(0.0, f64::max);
        let (d, _) = renyi_divergence_estimate(&c, 1.0)?;
        let name: Vec<String> = chain.iter().map(|k| k.to_string()).collect();
        println!(
            "{:<36} {max:>8.2} {:>8.0} {d:>8.3}",
            name.join(" + "),
            c.effective_sample_size()
        );
    }
    Ok(())
}
