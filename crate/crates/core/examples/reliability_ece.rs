//! Reliability table and expected calibration error for synthetic
//! predictions whose true accuracy is confidence^2.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shiftcal::metrics::ReliabilityBins;

fn main() -> shiftcal::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 20_000;
    let confidences: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..=1.0)).collect();
    let correct: Vec<bool> = confidences
        .iter()
        .map(|c| rng.random::<f64>() < c * c)
        .collect();

    let bins = ReliabilityBins::from_confidences(&confidences, &correct, 15)?;
    print!("{}", bins.to_csv());
    println!("ECE = {:.4}", bins.ece());

    let expected: f64 = confidences.iter().map(|c| c - c * c).sum::<f64>() / n as f64;
    println!("mean overconfidence = {expected:.4}");
    Ok(())
}
