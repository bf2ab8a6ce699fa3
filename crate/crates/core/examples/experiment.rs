//! Runs a full experiment from a JSON config and prints mean ± std ECE per
//! calibrator and method.
//!
//! ```text
//! cargo run --release --example experiment -- examples/configs/null_shift.json
//! ```

use std::path::PathBuf;

use shiftcal::config::CliConfig;
use shiftcal::harness;
use shiftcal::Method;

fn main() -> shiftcal::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            PathBuf::from(env!("CARGO_MANIFEST_DIR"))
                .join("examples/configs/mixture_1to4_4to1.json")
        });
    let config = CliConfig::load(&path, &[])?;
    let report = harness::run_experiment(&config.experiment)?;

    println!(
        "{} replications, config {}",
        report.n_replications,
        &report.config_digest[..12]
    );
    for calibrator in &config.experiment.calibrators {
        println!("{calibrator}");
        for method in Method::ALL {
            if let Some(s) = report.summary(method, *calibrator) {
                println!(
                    "  {:<14} ECE {:.4} ± {:.4}  acc {:.3}",
                    method.to_string(),
                    s.ece_mean,
                    s.ece_std,
                    s.acc_mean
                );
            }
        }
    }
    let d = &report.diagnostics;
    println!(
        "d_2 estimate {:.3}, ESS {:.0}, bound respected {}/{}",
        d.renyi_divergence_mean,
        d.effective_sample_size_mean,
        d.bound_respected,
        report.n_replications
    );
    Ok(())
}
