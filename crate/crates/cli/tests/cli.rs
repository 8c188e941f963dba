use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use favi_cli::parse_config;

fn favi(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_favi"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../metaclf/tests/data")
        .join(name)
        .display()
        .to_string()
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const TINY_FORECAST: &[&str] = &[
    "--set",
    "forecast.epochs=1",
    "--set",
    "forecast.samples_per_epoch=200",
    "--set",
    "forecast.batch_size=50",
    "--set",
    "forecast.channels=8",
    "--set",
    "forecast.n_obs=16",
    "--set",
    "forecast.ensemble=20",
    "--set",
    "forecast.bootstrap_reps=100",
    "--set",
    "forecast.calibration_records=20",
    "--set",
    "forecast.posterior_points=64",
];

#[test]
fn missing_seed_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = favi(&["oracle-suite"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing required key `seed`"), "{}", stderr(&o));

    fs::write(dir.path().join("bad.cfg"), "seed = abc\n[forecast]\nfoo = 1\n").unwrap();
    let o = favi(&["--config", "bad.cfg", "forecast", "train"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(
        err.contains("type mismatch for `seed`") && err.contains("unknown key `forecast.foo`"),
        "{err}"
    );
}

#[test]
fn eval_without_checkpoint_says_so() {
    let dir = tempfile::tempdir().unwrap();
    let o = favi(&["forecast", "eval", "--trials", "3", "--seed", "1"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checkpoint missing"), "{}", stderr(&o));
    let o = favi(&["metaclf", "eval", "--seed", "1"], dir.path());
    assert!(stderr(&o).contains("checkpoint missing"), "{}", stderr(&o));
}

#[test]
fn forecast_runs_are_byte_identical_and_manifest_reproduces_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = format!("out_{run}");
        let ckpt = format!("ckpt_{run}");
        let mut train = vec![
            "forecast",
            "train",
            "--seed",
            "5",
            "--out",
            &out,
            "--checkpoint-dir",
            &ckpt,
        ];
        train.extend_from_slice(TINY_FORECAST);
        let o = favi(&train, dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
        let mut eval = vec![
            "forecast",
            "eval",
            "--trials",
            "6",
            "--seed",
            "5",
            "--out",
            &out,
            "--checkpoint-dir",
            &ckpt,
        ];
        eval.extend_from_slice(TINY_FORECAST);
        let o = favi(&eval, dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push(dir.path().join(&out));
    }
    let a = csv_files(&outputs[0]);
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        ["calibration.csv", "posterior.csv", "scores.csv", "training_trace.csv"]
    );
    assert_eq!(a, csv_files(&outputs[1]));
    assert_eq!(
        fs::read(dir.path().join("ckpt_a/forecaster.ckpt")).unwrap(),
        fs::read(dir.path().join("ckpt_b/forecaster.ckpt")).unwrap()
    );

    let scores = String::from_utf8(a[2].1.clone()).unwrap();
    assert!(scores.starts_with("trial,ekf_prob,favi_prob\n"));
    assert_eq!(scores.lines().count(), 7);
    assert!(String::from_utf8_lossy(&a[1].1).starts_with("grid,density\n"));

    let m = manifest(&outputs[0].join("eval_manifest.json"));
    assert_eq!(m["seed"], 5);
    assert_eq!(m["experiment"], "forecast");
    assert!(m["version"].as_str().unwrap().starts_with(env!("CARGO_PKG_VERSION")));
    assert!(m["wall_time_seconds"].as_f64().unwrap() >= 0.0);
    assert_eq!(m["config"]["forecast.trials"], "6");
    let echoed = parse_config(m["config_text"].as_str().unwrap()).unwrap();
    assert_eq!(echoed.forecast.trials, 6);
    assert_eq!(echoed.seed, 5);
    assert!(echoed.output_dir.is_absolute());
    assert!(outputs[0].join("train_manifest.json").exists());
}

#[test]
fn metaclf_trains_then_evaluates_a_csv_without_retraining() {
    let dir = tempfile::tempdir().unwrap();
    let common = [
        "--seed",
        "2",
        "--set",
        "metaclf.epochs=1",
        "--set",
        "metaclf.samples_per_epoch=200",
        "--set",
        "metaclf.batch_size=50",
        "--set",
        "metaclf.width=8",
        "--set",
        "metaclf.ensemble_size=4",
        "--set",
        "metaclf.heldout=20",
    ];
    let mut train = vec!["metaclf", "train"];
    train.extend_from_slice(&common);
    let o = favi(&train, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = dir.path().join("checkpoints/metaclassifier.ckpt");
    let before = fs::read(&ckpt).unwrap();

    let data = fixture("breast_cancer.csv");
    let mut eval = vec![
        "metaclf",
        "eval",
        "--data",
        &data,
        "--label-col",
        "malignant_or_benign",
        "--n-min",
        "4",
        "--n-max",
        "14",
        "--repeats",
        "10",
    ];
    eval.extend_from_slice(&common);
    let o = favi(&eval, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&ckpt).unwrap(), before);

    let acc = fs::read_to_string(dir.path().join("out/accuracy.csv")).unwrap();
    let mut lines = acc.lines();
    assert_eq!(lines.next(), Some("predictor,N,accuracy,stderr"));
    // Two sizes (4, 14) times four predictors.
    assert_eq!(lines.count(), 8);
    let oracle = fs::read_to_string(dir.path().join("out/oracle_comparison.csv")).unwrap();
    assert_eq!(oracle.lines().count(), 3);

    let o = favi(
        &[
            "metaclf",
            "eval",
            "--data",
            &data,
            "--seed",
            "2",
            "--set",
            "metaclf.ensemble_size=0",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("label_col"), "{}", stderr(&o));
}

#[test]
fn oracle_suite_and_comparison_write_their_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "experiment = oracle-suite\nseed = 4\n[oracle]\njoints = 2\nchain_epochs = 2\n";
    fs::write(dir.path().join("run.cfg"), cfg).unwrap();
    let o = favi(&["--config", "run.cfg", "oracle-suite"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["theorem1_report.csv", "theorem2_report.csv", "manifest.json"] {
        assert!(dir.path().join("out").join(f).exists(), "{f}");
    }
    let m = manifest(&dir.path().join("out/manifest.json"));
    assert_eq!(m["summary"]["discrete"]["joints"], 3);
    assert!(m["summary"]["discrete"]["max_tabular_tv"].as_f64().unwrap() < 1e-8);

    let o = favi(
        &[
            "compare-vi",
            "--seed",
            "4",
            "--out",
            "vi",
            "--set",
            "compare.epochs=1",
            "--set",
            "compare.data_points=500",
            "--set",
            "compare.eval_draws=40",
            "--set",
            "compare.bootstrap_reps=100",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let names: Vec<String> = csv_files(&dir.path().join("vi")).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["mean_field_contrast.csv", "reconstruction_errors.csv"]);
}
