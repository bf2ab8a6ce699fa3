//! Acceptance criteria, run in sequence so each one's wall-clock time is its own.
//! Prints one PASS/FAIL line per criterion and fails if any criterion fails.

use std::io::Write;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use shiftcal::calibration::{self, CalibratorType};
use shiftcal::dataset::{self, ClassFeatures, MixtureShiftConfig};
use shiftcal::harness::{
    self, ExperimentConfig, ExperimentReport, SweepAxis, SweepSpec, WeightsMode,
};
use shiftcal::importance::DiscriminatorRatio;
use shiftcal::learner::{self, Activation, Architecture, ProbabilisticModel};
use shiftcal::metrics::{self, Method};

type Outcome = Result<String, String>;

struct Criterion {
    id: usize,
    name: &'static str,
    limit: Option<Duration>,
}

fn pooled(a: f64, b: f64) -> f64 {
    ((a * a + b * b) / 2.0).sqrt()
}

fn ece(report: &ExperimentReport, method: Method) -> (f64, f64) {
    let s = report
        .summary(method, CalibratorType::Temperature)
        .expect("temperature row");
    (s.ece_mean, s.ece_std)
}

fn temperature_config(source: Vec<f64>, target: Vec<f64>) -> ExperimentConfig {
    let mut config = ExperimentConfig::mixture(source, target);
    config.calibrators = vec![CalibratorType::Temperature];
    config
}

/// Every temperature-scaled prediction keeps the classifier's argmax.
struct ArgmaxAudit {
    checked: usize,
    violations: usize,
}

impl ArgmaxAudit {
    fn record(&mut self, report: &ExperimentReport) {
        for rep in &report.replications {
            let Some(fitted) = rep.calibrators.get(&CalibratorType::Temperature) else {
                continue;
            };
            for cal in fitted.values() {
                let probs = cal.apply(rep.test_logits.view()).unwrap();
                for (p, z) in probs.outer_iter().zip(rep.test_logits.outer_iter()) {
                    self.checked += 1;
                    if learner::argmax(p) != learner::argmax(z) {
                        self.violations += 1;
                    }
                }
            }
        }
    }
}

fn mixture_ordering(audit: &mut ArgmaxAudit) -> Outcome {
    let report = harness::run_experiment(&temperature_config(vec![1.0, 4.0], vec![4.0, 1.0]))
        .map_err(|e| e.to_string())?;
    audit.record(&report);
    let (u, su) = ece(&report, Method::Unweighted);
    let (w, sw) = ece(&report, Method::Weighted);
    let (t, st) = ece(&report, Method::UsingTarget);
    let detail =
        format!("unweighted {u:.4}±{su:.4}, weighted {w:.4}±{sw:.4}, using_target {t:.4}±{st:.4}");
    if w < u && u - w > 2.0 * pooled(su, sw) && (w - t).abs() <= 2.0 * pooled(sw, st) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mild_shift_null(audit: &mut ArgmaxAudit) -> Outcome {
    let report = harness::run_experiment(&temperature_config(vec![2.0, 5.0], vec![3.0, 4.0]))
        .map_err(|e| e.to_string())?;
    audit.record(&report);
    let (u, su) = ece(&report, Method::Unweighted);
    let (w, sw) = ece(&report, Method::Weighted);
    let detail = format!("unweighted {u:.4}±{su:.4}, weighted {w:.4}±{sw:.4}");
    if (u - w).abs() <= 2.0 * pooled(su, sw) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn divergence_trend(audit: &mut ArgmaxAudit) -> Outcome {
    let spec = SweepSpec {
        axis: SweepAxis::Divergence {
            target_ratios: vec![
                vec![8.0, 1.0],
                vec![4.0, 1.0],
                vec![1.0, 1.0],
                vec![1.0, 4.0],
                vec![1.0, 8.0],
            ],
        },
        base: temperature_config(vec![8.0, 1.0], vec![8.0, 1.0]),
    };
    let sweep = harness::run_sweep(&spec).map_err(|e| e.to_string())?;
    let mut gaps = Vec::new();
    let mut tracking = true;
    for point in &sweep.points {
        audit.record(&point.report);
        let (u, _) = ece(&point.report, Method::Unweighted);
        let (w, sw) = ece(&point.report, Method::Weighted);
        let (t, st) = ece(&point.report, Method::UsingTarget);
        gaps.push(u - t);
        tracking &= (w - t).abs() <= 2.0 * pooled(sw, st);
    }
    let inversions = gaps.windows(2).filter(|g| g[1] < g[0]).count();
    let detail = format!(
        "gaps {:?}, {inversions} inversion(s), weighted tracks target: {tracking}",
        gaps.iter().map(|g| format!("{g:.4}")).collect::<Vec<_>>()
    );
    if inversions <= 1 && tracking {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn noise_trend(audit: &mut ArgmaxAudit) -> Outcome {
    let mut base = temperature_config(vec![1.0, 4.0], vec![4.0, 1.0]);
    // an underconfident source model, so source-fitted temperatures hurt on target
    base.classifier.l2_penalty = 0.05;
    let spec = SweepSpec {
        axis: SweepAxis::WeightNoise {
            sigmas: vec![0.0, 1.0, 2.0, 4.0, 8.0],
        },
        base,
    };
    let sweep = harness::run_sweep(&spec).map_err(|e| e.to_string())?;
    for point in &sweep.points {
        audit.record(&point.report);
    }
    let series: Vec<String> = sweep
        .points
        .iter()
        .map(|p| format!("{}:{:.4}", p.axis_value, ece(&p.report, Method::Weighted).0))
        .collect();
    let last = &sweep.points.last().unwrap().report;
    let (w, _) = ece(last, Method::Weighted);
    let (raw, _) = ece(last, Method::Uncalibrated);
    let detail = format!(
        "weighted by sigma [{}], uncalibrated {raw:.4}",
        series.join(", ")
    );
    if w > raw {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn discriminator_recovery() -> Outcome {
    let mut config = MixtureShiftConfig::with_ratios(vec![1.0, 4.0], vec![4.0, 1.0]);
    config.class_features = ClassFeatures::Separated {
        dim: 8,
        distance: 5.0,
        seed: 0,
    };
    let mut passed = 0;
    let mut means = Vec::new();
    for seed in 0..10u64 {
        let (source, target, _) =
            dataset::generate_mixture_shift(&config, seed).map_err(|e| e.to_string())?;
        let mut learner = harness::default_discriminator();
        learner.seed = seed;
        let ratio = DiscriminatorRatio::fit(source.features(), target.features(), &learner)
            .map_err(|e| e.to_string())?;
        let w = ratio
            .weights(source.features())
            .map_err(|e| e.to_string())?;
        let mut sum = [0.0; 2];
        let mut count = [0.0; 2];
        for (&wi, &y) in w.values().iter().zip(source.labels()) {
            sum[y] += wi;
            count[y] += 1.0;
        }
        let (m0, m1) = (sum[0] / count[0], sum[1] / count[1]);
        if (3.0..=5.0).contains(&m0) && (0.18..=0.33).contains(&m1) {
            passed += 1;
        }
        means.push(format!("({m0:.2}, {m1:.3})"));
    }
    let detail = format!(
        "{passed}/10 seeds in range; class means {}",
        means.join(" ")
    );
    if passed >= 9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_probs(rng: &mut ChaCha8Rng, n: usize, k: usize, m_bins: usize) -> Array2<f64> {
    let mut probs = Array2::zeros((n, k));
    for mut row in probs.outer_iter_mut() {
        if rng.random_bool(0.3) {
            // a confidence sitting exactly on a bin edge (or at 1)
            let edge = rng.random_range(1..=m_bins) as f64 / m_bins as f64;
            let top = edge.max(1.0 / k as f64);
            let j = rng.random_range(0..k);
            for (i, v) in row.iter_mut().enumerate() {
                *v = if i == j {
                    top
                } else {
                    (1.0 - top) / (k - 1) as f64
                };
            }
        } else {
            let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
            let total: f64 = raw.iter().sum();
            for (v, r) in row.iter_mut().zip(&raw) {
                *v = r / total;
            }
        }
    }
    probs
}

/// Sum over bins of |Σ (correct − confidence)| / n, scanning edges directly.
fn brute_force_ece(probs: &Array2<f64>, labels: &[usize], m_bins: usize) -> f64 {
    let n = labels.len() as f64;
    let mut total = 0.0;
    for m in 1..=m_bins {
        let lo = (m - 1) as f64 / m_bins as f64;
        let hi = m as f64 / m_bins as f64;
        let mut gap = 0.0;
        for (row, &y) in probs.outer_iter().zip(labels) {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            let c = row[best];
            let inside = (c > lo || (m == 1 && c >= 0.0)) && c <= hi;
            if inside {
                gap += (best == y) as u8 as f64 - c;
            }
        }
        total += gap.abs() / n;
    }
    total
}

fn ece_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=8);
        let k = rng.random_range(2..=4);
        let m_bins = rng.random_range(1..=4);
        let probs = random_probs(&mut rng, n, k, m_bins);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let got = metrics::ece(probs.view(), &labels, m_bins).map_err(|e| e.to_string())?;
        worst = worst.max((got - brute_force_ece(&probs, &labels, m_bins)).abs());
    }
    let detail = format!("1000 cases, max |difference| {worst:e}");
    if worst <= 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Weighted least squares under a monotone constraint, by enumerating every
/// split of the sorted tie groups into contiguous blocks.
fn brute_force_isotonic(scores: &[f64], y: &[f64], w: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for &i in &order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    let g = groups.len();
    let mut best = (f64::INFINITY, vec![0.0; scores.len()]);
    for mask in 0..(1u32 << (g - 1)) {
        let mut fitted = vec![0.0; scores.len()];
        let mut previous = f64::NEG_INFINITY;
        let mut feasible = true;
        let mut objective = 0.0;
        let mut start = 0;
        for end in 1..=g {
            let cut = end == g || mask & (1 << (end - 1)) != 0;
            if !cut {
                continue;
            }
            let members: Vec<usize> = groups[start..end].iter().flatten().copied().collect();
            let weight: f64 = members.iter().map(|&i| w[i]).sum();
            let mean = members.iter().map(|&i| w[i] * y[i]).sum::<f64>() / weight;
            if mean < previous - 1e-15 {
                feasible = false;
                break;
            }
            previous = mean;
            for &i in &members {
                fitted[i] = mean;
                objective += w[i] * (y[i] - mean).powi(2);
            }
            start = end;
        }
        if feasible && objective < best.0 - 1e-15 {
            best = (objective, fitted);
        }
    }
    best.1
}

fn pav_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for case in 0..500 {
        let n = rng.random_range(1..=6);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..4) as f64 * 0.25)
            .collect();
        let y: Vec<f64> = if case % 2 == 0 {
            (0..n).map(|_| rng.random_range(0..2) as f64).collect()
        } else {
            (0..n).map(|_| rng.random::<f64>()).collect()
        };
        let w: Vec<f64> = (0..n)
            .map(|_| [1.0, 2.0, 5.0][rng.random_range(0..3)])
            .collect();
        let step = calibration::fit_isotonic(&scores, &y, &w).map_err(|e| e.to_string())?;
        let expected = brute_force_isotonic(&scores, &y, &w);
        for (s, e) in scores.iter().zip(&expected) {
            worst = worst.max((step.eval(*s) - e).abs());
        }
    }
    let detail = format!("500 cases, max |difference| {worst:e}");
    if worst <= 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_checks() -> Outcome {
    let architectures = [
        ("linear", Architecture::Linear),
        ("mlp-tanh", Architecture::mlp(4, Activation::Tanh)),
        ("mlp-relu", Architecture::mlp(4, Activation::Relu)),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, arch) in architectures {
        let mut worst: f64 = 0.0;
        for case in 0..200u64 {
            let n = rng.random_range(2..=6);
            let d = rng.random_range(1..=3);
            let k = rng.random_range(2..=4);
            let x: Array2<f64> = Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut rng));
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
            let l2 = if case % 2 == 0 { 0.0 } else { 0.1 };
            let mut model = ProbabilisticModel::initialize(&arch, d, k, case);
            // larger parameters than the training initialization
            let params: Vec<f64> = model
                .parameters()
                .iter()
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            model.set_parameters(&params).unwrap();
            let (_, grad) = model
                .loss_and_gradient(x.view(), &labels, &weights, l2)
                .map_err(|e| e.to_string())?;
            let analytic: Vec<f64> = grad
                .iter()
                .flat_map(|layer| {
                    layer
                        .weights
                        .iter()
                        .chain(layer.bias.iter())
                        .copied()
                        .collect::<Vec<_>>()
                })
                .collect();
            let h = 1e-6;
            let mut numeric = Vec::with_capacity(params.len());
            for i in 0..params.len() {
                let mut probe = params.clone();
                probe[i] = params[i] + h;
                model.set_parameters(&probe).unwrap();
                let up = model
                    .loss_and_gradient(x.view(), &labels, &weights, l2)
                    .unwrap()
                    .0;
                probe[i] = params[i] - h;
                model.set_parameters(&probe).unwrap();
                let down = model
                    .loss_and_gradient(x.view(), &labels, &weights, l2)
                    .unwrap()
                    .0;
                numeric.push((up - down) / (2.0 * h));
            }
            model.set_parameters(&params).unwrap();
            let diff = analytic
                .iter()
                .zip(&numeric)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let scale = norm(&analytic).max(norm(&numeric));
            let rel = if scale < 1e-8 { diff } else { diff / scale };
            worst = worst.max(rel);
        }
        ok &= worst <= 1e-4;
        lines.push(format!("{name} max rel. err {worst:.2e}"));
    }
    let detail = format!("200 instances each: {}", lines.join(", "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Labels drawn from softmax(z); logits presented as `t_true · z`, so the
/// best temperature is `t_true`.
fn temperature_recovery(t_true: f64, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k) = (20000, 3);
    let z = Array2::from_shape_fn((n, k), |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        2.0 * v
    });
    let probs = learner::softmax_rows(z.view()).unwrap();
    let labels: Vec<usize> = probs
        .outer_iter()
        .map(|p| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (j, v) in p.iter().enumerate() {
                acc += v;
                if u < acc {
                    return j;
                }
            }
            k - 1
        })
        .collect();
    let scaled = &z * t_true;
    let cal = calibration::fit_temperature(scaled.view(), &labels, &vec![1.0; n])
        .map_err(|e| e.to_string())?;
    match cal.kind {
        shiftcal::CalibratorKind::Temperature { temperature } => Ok(temperature),
        _ => Err("not a temperature calibrator".into()),
    }
}

fn temperature_invariants(audit: &ArgmaxAudit) -> Outcome {
    let mut recovered = Vec::new();
    let mut ok = audit.violations == 0 && audit.checked > 0;
    for (t_true, seed) in [(2.5, 1), (0.5, 2), (1.0, 3)] {
        let t = temperature_recovery(t_true, seed)?;
        ok &= ((t - t_true) / t_true).abs() <= 0.05;
        recovered.push(format!("{t_true} -> {t:.4}"));
    }
    let detail = format!(
        "argmax kept on {}/{} predictions; recovered {}",
        audit.checked - audit.violations,
        audit.checked,
        recovered.join(", ")
    );
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn importance_identity() -> Outcome {
    let config = MixtureShiftConfig::with_ratios(vec![1.0, 4.0], vec![4.0, 1.0]);
    let experiment = ExperimentConfig::new(harness::GeneratorConfig::MixtureShift { config });
    let mut differences = Vec::new();
    for r in 0..20 {
        let seeds = harness::ReplicationSeeds::new(&experiment, r);
        let data =
            harness::generate_data(&experiment.generator, seeds.data).map_err(|e| e.to_string())?;
        let splits = harness::make_splits(&experiment, &data, &seeds).map_err(|e| e.to_string())?;
        let train = data.source.select(&splits.source_train);
        let model =
            harness::train_classifier(&experiment, &train, &seeds).map_err(|e| e.to_string())?;
        let val = data.source.select(&splits.source_validation);
        let test = data.target.select(&splits.target_test);
        let w = data
            .ground_truth
            .as_ref()
            .unwrap()
            .select(&splits.source_validation);
        let source_losses = learner::per_sample_nll(
            model.predict_proba(val.features()).unwrap().view(),
            val.labels(),
        )
        .map_err(|e| e.to_string())?;
        let target_losses = learner::per_sample_nll(
            model.predict_proba(test.features()).unwrap().view(),
            test.labels(),
        )
        .map_err(|e| e.to_string())?;
        let weighted = source_losses
            .iter()
            .zip(w.values())
            .map(|(l, w)| l * w)
            .sum::<f64>()
            / val.len() as f64;
        let target = target_losses.iter().sum::<f64>() / test.len() as f64;
        differences.push(weighted - target);
    }
    let (mean, std) = harness::mean_std(&differences);
    let se = std / (differences.len() as f64).sqrt();
    let detail = format!("mean difference {mean:.5}, standard error {se:.5}");
    if mean.abs() <= 3.0 * se {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn determinism() -> Outcome {
    let mut config = ExperimentConfig::mixture(vec![1.0, 4.0], vec![4.0, 1.0]);
    if let harness::GeneratorConfig::MixtureShift { config: m } = &mut config.generator {
        m.n_source = 1000;
        m.n_target = 1000;
    }
    config.calibrators = vec![
        CalibratorType::Platt,
        CalibratorType::Temperature,
        CalibratorType::Isotonic,
    ];
    config.weights_mode = WeightsMode::Discriminator {
        learner: harness::default_discriminator(),
        features: Default::default(),
    };
    config.n_replications = 3;
    let first = harness::run_experiment(&config)
        .and_then(|r| r.to_json())
        .map_err(|e| e.to_string())?;
    let second = harness::run_experiment(&config)
        .and_then(|r| r.to_json())
        .map_err(|e| e.to_string())?;
    let threaded = harness::run_experiment_with_jobs(&config, 3)
        .and_then(|r| r.to_json())
        .map_err(|e| e.to_string())?;
    let detail = format!(
        "{} bytes; repeat identical: {}, 3 jobs identical: {}",
        first.len(),
        first == second,
        first == threaded
    );
    if first == second && first == threaded {
        Ok(detail)
    } else {
        Err(detail)
    }
}

#[test]
fn acceptance() {
    let mut audit = ArgmaxAudit {
        checked: 0,
        violations: 0,
    };
    let mut failures = Vec::new();
    let mut run = |c: Criterion, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = f();
        let elapsed = start.elapsed();
        let over_time = c.limit.is_some_and(|limit| elapsed > limit);
        let (status, detail) = match &outcome {
            Ok(d) if !over_time => ("PASS", d.clone()),
            Ok(d) => (
                "FAIL",
                format!("{d} (over the {:?} limit)", c.limit.unwrap()),
            ),
            Err(d) => ("FAIL", d.clone()),
        };
        // written to the raw handle so the line shows even when output is captured
        let _ = writeln!(
            std::io::stderr(),
            "[{status}] criterion {:>2} {}: {detail} ({:.1}s)",
            c.id,
            c.name,
            elapsed.as_secs_f64()
        );
        if status == "FAIL" {
            failures.push(c.id);
        }
    };
    let minute = Duration::from_secs(60);
    run(
        Criterion {
            id: 1,
            name: "mixture-shift ordering",
            limit: Some(2 * minute),
        },
        &mut || mixture_ordering(&mut audit),
    );
    run(
        Criterion {
            id: 2,
            name: "mild-shift null result",
            limit: None,
        },
        &mut || mild_shift_null(&mut audit),
    );
    run(
        Criterion {
            id: 3,
            name: "divergence trend",
            limit: None,
        },
        &mut || divergence_trend(&mut audit),
    );
    run(
        Criterion {
            id: 4,
            name: "weight-noise trend",
            limit: None,
        },
        &mut || noise_trend(&mut audit),
    );
    run(
        Criterion {
            id: 5,
            name: "discriminator weight recovery",
            limit: Some(minute),
        },
        &mut discriminator_recovery,
    );
    run(
        Criterion {
            id: 6,
            name: "ECE oracle",
            limit: None,
        },
        &mut ece_oracle,
    );
    run(
        Criterion {
            id: 7,
            name: "PAV oracle",
            limit: None,
        },
        &mut pav_oracle,
    );
    run(
        Criterion {
            id: 8,
            name: "gradient checks",
            limit: None,
        },
        &mut gradient_checks,
    );
    run(
        Criterion {
            id: 10,
            name: "importance-weighted loss identity",
            limit: None,
        },
        &mut importance_identity,
    );
    run(
        Criterion {
            id: 11,
            name: "determinism",
            limit: None,
        },
        &mut determinism,
    );
    // last, so the argmax audit covers every run above
    run(
        Criterion {
            id: 9,
            name: "temperature invariants",
            limit: None,
        },
        &mut || temperature_invariants(&audit),
    );
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
