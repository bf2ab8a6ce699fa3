//! Divergence sweep: ECE of each method as the target class proportions
//! move away from a fixed 8:1 source.

use shiftcal::calibration::CalibratorType;
use shiftcal::harness::{self, ExperimentConfig, SweepAxis, SweepSpec};
use shiftcal::Method;

fn main() -> shiftcal::Result<()> {
    let mut base = ExperimentConfig::mixture(vec![8.0, 1.0], vec![8.0, 1.0]);
    base.calibrators = vec![CalibratorType::Temperature];
    base.n_replications = 5;
    let spec = SweepSpec {
        axis: SweepAxis::Divergence {
            target_ratios: vec![
                vec![8.0, 1.0],
                vec![2.0, 1.0],
                vec![1.0, 1.0],
                vec![1.0, 4.0],
            ],
        },
        base,
    };
    let sweep = harness::run_sweep(&spec)?;

    print!("{:>8}", "d_2");
    for m in Method::ALL {
        print!(" {:>13}", m.to_string());
    }
    println!();
    for point in &sweep.points {
        print!("{:>8.3}", point.axis_value);
        for m in Method::ALL {
            print!(
                " {:>13.4}",
                point
                    .report
                    .summary(m, CalibratorType::Temperature)
                    .unwrap()
                    .ece_mean
            );
        }
        println!();
    }
    Ok(())
}
