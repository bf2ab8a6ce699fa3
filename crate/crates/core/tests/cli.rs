use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn shiftcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shiftcal"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("examples/configs")
        .join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL_MIXTURE: &str = r#"{
  "command": "experiment",
  "experiment": {
    "generator": {"kind": "mixture_shift", "source_ratio": [1, 4], "target_ratio": [4, 1], "n_source": 1500, "n_target": 1500},
    "calibrators": ["temperature", "isotonic"],
    "n_replications": 1,
    "seed": 11
  }
}"#;

#[test]
fn version_and_help() {
    let out = shiftcal(&["--version"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains(env!("CARGO_PKG_VERSION")));
    for sub in [
        "generate",
        "train",
        "estimate-weights",
        "calibrate",
        "evaluate",
        "experiment",
        "sweep",
    ] {
        let out = shiftcal(&[sub, "--help"]);
        assert!(out.status.success(), "{sub}");
        assert!(stdout(&out).contains("Usage"), "{sub}");
    }
}

#[test]
fn negative_learning_rate_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let config = bundled("null_shift.json");
    let args = [
        "experiment",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--set",
        "experiment.classifier.learning_rate=-0.5",
    ];
    let out = shiftcal(&args);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("experiment.classifier.learning_rate"),
        "{}",
        stderr(&out)
    );
    assert!(!out_dir.exists());

    let mut json_args = args.to_vec();
    json_args.push("--json-errors");
    let out = shiftcal(&json_args);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_str(stderr(&out).trim()).unwrap();
    assert_eq!(err["error"]["kind"], "validation");
    assert_eq!(err["error"]["field"], "experiment.classifier.learning_rate");
}

#[test]
fn unknown_keys_and_bad_flags_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    fs::write(
        &config,
        SMALL_MIXTURE.replace("\"seed\": 11", "\"seed\": 11, \"typo\": 1"),
    )
    .unwrap();
    let out = shiftcal(&[
        "experiment",
        "--config",
        config.to_str().unwrap(),
        "--out",
        "unused",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("typo"));

    let out = shiftcal(&["experiment", "--bogus-flag", "--json-errors"]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_str(stderr(&out).trim()).unwrap();
    assert_eq!(err["error"]["kind"], "validation");
}

#[test]
fn missing_inputs_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    fs::write(&config, SMALL_MIXTURE).unwrap();
    let out = shiftcal(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data",
        dir.path().join("nowhere").to_str().unwrap(),
        "--out",
        dir.path().join("m.json").to_str().unwrap(),
        "--json-errors",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_str(stderr(&out).trim()).unwrap();
    assert_eq!(err["error"]["kind"], "runtime");
}

#[test]
fn null_shift_methods_agree() {
    let dir = tempfile::tempdir().unwrap();
    let out = shiftcal(&[
        "experiment",
        "--config",
        bundled("null_shift.json").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "experiment.calibrators=[\"temperature\"]",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report = read_json(&dir.path().join("report.json"));
    let rows: Vec<(f64, f64)> = ["uncalibrated", "unweighted", "weighted", "using_target"]
        .iter()
        .map(|m| {
            let s = &report["per_method"][m]["temperature"];
            (
                s["ece_mean"].as_f64().unwrap(),
                s["ece_std"].as_f64().unwrap(),
            )
        })
        .collect();
    for a in &rows {
        for b in &rows {
            let pooled = ((a.1 * a.1 + b.1 * b.1) / 2.0).sqrt();
            assert!((a.0 - b.0).abs() <= 2.0 * pooled, "{rows:?}");
        }
    }
}

/// generate → train → estimate-weights → calibrate → evaluate reproduces `experiment`.
#[test]
fn step_by_step_pipeline_matches_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let config = p("config.json");
    fs::write(&config, SMALL_MIXTURE).unwrap();
    let run = |args: &[&str]| {
        let out = shiftcal(args);
        assert!(out.status.success(), "{args:?}: {}", stderr(&out));
        out
    };
    run(&["experiment", "--config", &config, "--out", &p("exp")]);
    run(&["generate", "--config", &config, "--out", &p("data")]);
    run(&[
        "train",
        "--config",
        &config,
        "--data",
        &p("data"),
        "--out",
        &p("model.json"),
    ]);
    run(&[
        "estimate-weights",
        "--config",
        &config,
        "--data",
        &p("data"),
        "--out",
        &p("w.csv"),
    ]);
    let report = read_json(&dir.path().join("exp/report.json"));

    let cases: [(&str, &str, Option<&str>); 4] = [
        ("temperature", "weighted", Some("w.csv")),
        ("temperature", "unweighted", None),
        ("isotonic", "weighted", Some("w.csv")),
        ("isotonic", "using_target", None),
    ];
    let (model, data) = (p("model.json"), p("data"));
    for (calibrator, mode, weights) in cases {
        let cal = p(&format!("{calibrator}-{mode}.json"));
        let mut args = vec![
            "calibrate",
            "--config",
            &config,
            "--model",
            &model,
            "--data",
            &data,
            "--calibrator",
            calibrator,
            "--mode",
            mode,
            "--out",
            &cal,
        ];
        let weights_path;
        if let Some(w) = weights {
            weights_path = p(w);
            args.extend(["--weights", &weights_path]);
        }
        run(&args);
        let eval_dir = p(&format!("eval-{calibrator}-{mode}"));
        run(&[
            "evaluate",
            "--model",
            &p("model.json"),
            "--calibrator",
            &cal,
            "--data",
            &p("data"),
            "--method",
            mode,
            "--out",
            &eval_dir,
        ]);
        let single = read_json(&Path::new(&eval_dir).join("report.json"));
        let summary = &report["per_method"][mode][calibrator];
        assert_eq!(single["ece"], summary["ece_mean"], "{calibrator}/{mode}");
        assert_eq!(
            single["accuracy"], summary["acc_mean"],
            "{calibrator}/{mode}"
        );
        assert_eq!(single["nll"], summary["nll_mean"], "{calibrator}/{mode}");
        let csv = fs::read_to_string(Path::new(&eval_dir).join("reliability.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 15);
    }
    let eval_dir = p("eval-raw");
    run(&[
        "evaluate",
        "--model",
        &p("model.json"),
        "--data",
        &p("data"),
        "--out",
        &eval_dir,
    ]);
    let raw = read_json(&Path::new(&eval_dir).join("report.json"));
    assert_eq!(
        raw["ece"],
        report["per_method"]["uncalibrated"]["temperature"]["ece_mean"]
    );
}

#[test]
fn estimate_weights_recovers_class_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let config = bundled("mixture_1to4_4to1.json");
    let config = config.to_str().unwrap();
    let data = dir.path().join("data");
    let data = data.to_str().unwrap();
    assert!(shiftcal(&["generate", "--config", config, "--out", data])
        .status
        .success());
    let weights = dir.path().join("w.csv");
    let out = shiftcal(&[
        "estimate-weights",
        "--config",
        config,
        "--data",
        data,
        "--out",
        weights.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let mean = |class: usize| -> f64 {
        let line = text
            .lines()
            .find(|l| l.starts_with(&format!("class {class}:")))
            .unwrap();
        line.split_whitespace().nth(4).unwrap().parse().unwrap()
    };
    assert!((3.0..=5.0).contains(&mean(0)), "{text}");
    assert!((0.18..=0.33).contains(&mean(1)), "{text}");
    assert!(fs::read_to_string(&weights)
        .unwrap()
        .starts_with("provenance=discriminator;corrections=self_normalize"));
}

#[test]
fn sweep_writes_long_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = shiftcal(&[
        "sweep",
        "--config",
        bundled("sweep_weight_noise.json").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "experiment.n_replications=2",
        "--set",
        "experiment.generator.n_source=800",
        "--set",
        "experiment.generator.n_target=800",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("axis_value,method,calibrator,ece_mean,ece_std")
    );
    assert_eq!(lines.count(), 5 * 4);
    assert!(dir.path().join("report.json").exists());
}
