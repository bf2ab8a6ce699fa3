//! Weighted pool-adjacent-violators on a small hand-made sample.

use shiftcal::calibration::fit_isotonic;

fn main() -> shiftcal::Result<()> {
    let scores = [0.1, 0.2, 0.2, 0.35, 0.5, 0.6, 0.7, 0.9];
    let correct = [0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0];
    let weights = [1.0, 2.0, 1.0, 3.0, 1.0, 1.0, 0.5, 2.0];

    let map = fit_isotonic(&scores, &correct, &weights)?;
    println!("{:>10} {:>8}", "from", "value");
    for (b, v) in map.breakpoints.iter().zip(&map.values) {
        println!("{b:>10.2} {v:>8.4}");
    }
    for s in [0.0, 0.2, 0.4, 0.65, 1.0] {
        println!("f({s:.2}) = {:.4}", map.eval(s));
    }

    let fitted: f64 = scores
        .iter()
        .zip(&weights)
        .map(|(&s, w)| w * map.eval(s))
        .sum();
    let observed: f64 = correct.iter().zip(&weights).map(|(c, w)| w * c).sum();
    println!("weighted totals: fitted {fitted:.4}, observed {observed:.4}");
    Ok(())
}
