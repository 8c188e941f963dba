//! Executes a validated [`RunConfig`] and writes its CSV outputs plus a JSON manifest.
//!
//! All randomness derives from the config seed through named substreams, so a config and
//! seed reproduce every CSV byte for byte. Only the manifest's wall time varies.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use favi_core::experiments::{
    compare_vi, mean_field_contrast, theorem1_suite, theorem2_suite, write_compare_csv, write_theorem1_csv,
    write_theorem2_csv,
};
use favi_core::favi::Simulator;
use favi_core::rng::substream;
use favi_core::stats::{self, Interval};
use favi_lorenz::forecaster::{train_forecaster, Forecaster};
use favi_lorenz::scoring::{calibration, compare_forecasters, is_bimodal, write_posterior_csv, write_scores_csv};
use favi_lorenz::{simulate_record, LorenzError, RecordSimulator};
use favi_metaclf::baselines::{Classifier, Knn, Logistic, Majority};
use favi_metaclf::data::{evaluate_small_data, ingest_csv, write_accuracy_csv, IngestOptions};
use favi_metaclf::encoder::MetaClassifier;
use favi_metaclf::oracle::{compare_with_oracle, write_oracle_csv};
use favi_metaclf::train::train_metaclassifier;
use favi_metaclf::{EnsembleConfig, FiniteEnsemble, MetaError};
use serde_json::{json, Map, Value};

use crate::config::{Experiment, RunConfig, Stage};

pub const FORECASTER_CHECKPOINT: &str = "forecaster.ckpt";
pub const METACLASSIFIER_CHECKPOINT: &str = "metaclassifier.ckpt";
pub const CALIBRATION_RADII: [f64; 3] = [1.0, 3.0, 10.0];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] favi_core::Error),
    #[error(transparent)]
    Lorenz(#[from] LorenzError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<CliError>,
    },
}

impl CliError {
    /// The innermost error, without experiment context.
    pub fn root(&self) -> &CliError {
        match self {
            CliError::Context { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// `<package version>+<git describe>` of the build.
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("FAVI_GIT_DESCRIBE"));

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub manifest: PathBuf,
    /// Files written, relative to the output directory.
    pub outputs: Vec<String>,
    pub summary: Value,
}

pub fn manifest_name(config: &RunConfig) -> String {
    match (config.experiment.staged(), config.stage) {
        (true, Stage::Train | Stage::Eval) => format!("{}_manifest.json", config.stage.name()),
        _ => "manifest.json".into(),
    }
}

pub fn run(config: &RunConfig) -> Result<RunOutcome> {
    let start = Instant::now();
    let context = if config.experiment.staged() {
        format!("{} {}", config.experiment.name(), config.stage.name())
    } else {
        config.experiment.name().to_string()
    };
    let wrap = |e: CliError| CliError::Context {
        context: context.clone(),
        source: Box::new(e),
    };
    fs::create_dir_all(&config.output_dir).map_err(|e| wrap(e.into()))?;
    let mut outputs = Outputs {
        dir: config.output_dir.clone(),
        files: Vec::new(),
    };
    let summary = match config.experiment {
        Experiment::OracleSuite => oracle_suite(config, &mut outputs),
        Experiment::FaviVsReverse => favi_vs_reverse(config, &mut outputs),
        Experiment::Forecast => forecast(config, &mut outputs),
        Experiment::Metaclf => metaclf(config, &mut outputs),
    }
    .map_err(wrap)?;

    let config_echo: Map<String, Value> = config
        .entries()
        .into_iter()
        .map(|(k, v)| (k, Value::String(v)))
        .collect();
    let manifest = json!({
        "experiment": config.experiment.name(),
        "stage": config.stage.name(),
        "seed": config.seed,
        "version": VERSION,
        "wall_time_seconds": start.elapsed().as_secs_f64(),
        "config": config_echo,
        "config_text": config.to_text(),
        "outputs": outputs.files,
        "summary": summary,
    });
    let path = config.output_dir.join(manifest_name(config));
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(RunOutcome {
        manifest: path,
        outputs: outputs.files,
        summary,
    })
}

struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }
}

fn interval(i: &Interval) -> Value {
    json!({ "estimate": i.estimate, "lower": i.lower, "upper": i.upper })
}

fn write_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss"])?;
    for (i, l) in trace.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn oracle_suite(config: &RunConfig, out: &mut Outputs) -> Result<Value> {
    let t1 = theorem1_suite(&config.theorem1_config())?;
    write_theorem1_csv(&out.path("theorem1_report.csv"), &t1)?;
    let t2 = theorem2_suite(&config.theorem2_config())?;
    write_theorem2_csv(&out.path("theorem2_report.csv"), &t2)?;
    let max = |v: Vec<f64>| v.into_iter().fold(0.0, f64::max);
    Ok(json!({
        "discrete": {
            "joints": t1.len(),
            "max_tabular_tv": max(t1.iter().map(|r| r.tabular_tv()).collect()),
            "max_neural_tv": max(t1.iter().map(|r| r.neural_tv()).collect()),
        },
        "marginalization": {
            "max_mean_error": max(t2.iter().map(|r| (r.ignoring_mean - r.exact_mean).abs()).collect()),
            "max_sd_relative_error": max(t2.iter().map(|r| (r.ignoring_sd / r.exact_sd - 1.0).abs()).collect()),
            "max_tv_between_runs": max(t2.iter().map(|r| r.tv_between).collect()),
        },
    }))
}

fn favi_vs_reverse(config: &RunConfig, out: &mut Outputs) -> Result<Value> {
    let contrast = mean_field_contrast(&config.contrast_config())?;
    let mut w = csv::Writer::from_path(out.path("mean_field_contrast.csv"))?;
    w.write_record([
        "coord",
        "reverse_kl_sd",
        "favi_sd",
        "reverse_kl_fixed_point_sd",
        "true_marginal_sd",
    ])?;
    for k in 0..contrast.favi_sd.len() {
        w.write_record([
            k.to_string(),
            contrast.reverse_kl_sd[k].to_string(),
            contrast.favi_sd[k].to_string(),
            contrast.reverse_kl_fixed_point_sd[k].to_string(),
            contrast.true_marginal_sd[k].to_string(),
        ])?;
    }
    w.flush()?;
    let report = compare_vi(&config.vi_compare_config())?;
    write_compare_csv(&out.path("reconstruction_errors.csv"), &report)?;
    Ok(json!({
        "mean_field": {
            "rho": contrast.rho,
            "reverse_kl_sd": contrast.reverse_kl_sd,
            "favi_sd": contrast.favi_sd,
            "reverse_kl_fixed_point_sd": contrast.reverse_kl_fixed_point_sd,
            "true_marginal_sd": contrast.true_marginal_sd,
        },
        "reconstruction": {
            "favi_latent_mean": stats::mean(&report.favi_latent),
            "reverse_latent_mean": stats::mean(&report.reverse_latent),
            "latent_gap_reverse_minus_favi": interval(&report.latent_gap),
            "favi_observable_mean": stats::mean(&report.favi_observable),
            "reverse_observable_mean": stats::mean(&report.reverse_observable),
            "observable_gap_reverse_minus_favi": interval(&report.observable_gap),
        },
    }))
}

fn forecast(config: &RunConfig, out: &mut Outputs) -> Result<Value> {
    let checkpoint = config.checkpoint_dir.join(FORECASTER_CHECKPOINT);
    let mut summary = Map::new();
    if matches!(config.stage, Stage::Train | Stage::All) {
        let (model, report) = train_forecaster(&config.forecaster_config())?;
        fs::create_dir_all(&config.checkpoint_dir)?;
        model.save(&checkpoint)?;
        write_trace(&out.path("training_trace.csv"), &report.trace)?;
        summary.insert(
            "train".into(),
            json!({
                "steps": report.trace.len(),
                "final_loss": report.smoothed_final_loss(),
                "checkpoint": checkpoint.display().to_string(),
            }),
        );
    }
    if matches!(config.stage, Stage::Eval | Stage::All) {
        let model = Forecaster::load(&checkpoint)?;
        if model.window() != config.forecast.n_obs {
            return Err(CliError::Invalid(format!(
                "checkpoint was trained on {} observations but forecast.n_obs is {}",
                model.window(),
                config.forecast.n_obs
            )));
        }
        let compare = compare_forecasters(&model, &config.forecast_compare_config())?;
        write_scores_csv(&out.path("scores.csv"), &compare.scores)?;

        let record = config.record_config();
        let shown = simulate_record(&mut substream(config.seed, "posterior"), &record)?;
        write_posterior_csv(
            &out.path("posterior.csv"),
            &model.predictive(&shown.observations)?,
            config.forecast.posterior_points,
        )?;

        let sim = RecordSimulator { config: record };
        let records = sim.draw_batch(
            config.forecast.calibration_records,
            &mut substream(config.seed, "calibration"),
        )?;
        let rows = calibration(&model, &records, &CALIBRATION_RADII)?;
        let mut w = csv::Writer::from_path(out.path("calibration.csv"))?;
        w.write_record(["radius", "predicted", "observed"])?;
        for r in &rows {
            w.write_record([r.radius.to_string(), r.predicted.to_string(), r.observed.to_string()])?;
        }
        w.flush()?;
        let mut bimodal = 0usize;
        for r in &records {
            bimodal += usize::from(is_bimodal(&model.predictive(&r.observations)?));
        }
        summary.insert(
            "eval".into(),
            json!({
                "trials": compare.scores.len(),
                "ratio_favi_over_ekf": interval(&compare.ratio),
                "gap_favi_minus_ekf": interval(&compare.gap),
                "ekf_failures": compare.ekf_failures,
                "calibration": rows.iter().map(|r| json!({
                    "radius": r.radius, "predicted": r.predicted, "observed": r.observed
                })).collect::<Vec<_>>(),
                "bimodal_fraction": bimodal as f64 / records.len() as f64,
                "posterior_target": shown.target,
            }),
        );
    }
    Ok(Value::Object(summary))
}

fn frozen_ensemble(config: &RunConfig) -> Result<Option<Arc<FiniteEnsemble>>> {
    let m = &config.metaclf;
    if m.ensemble_size == 0 {
        return Ok(None);
    }
    let mut rng = substream(m.ensemble_seed, "ensemble");
    Ok(Some(Arc::new(FiniteEnsemble::sample(
        &EnsembleConfig::default(),
        m.ensemble_size,
        &mut rng,
    )?)))
}

fn metaclf(config: &RunConfig, out: &mut Outputs) -> Result<Value> {
    let m = &config.metaclf;
    let checkpoint = config.checkpoint_dir.join(METACLASSIFIER_CHECKPOINT);
    let ensemble = frozen_ensemble(config)?;
    let mut summary = Map::new();
    if matches!(config.stage, Stage::Train | Stage::All) {
        let mut sim = config.task_simulator();
        sim.ensemble = ensemble.clone();
        let (model, report) = train_metaclassifier(&sim, &config.meta_train_config())?;
        fs::create_dir_all(&config.checkpoint_dir)?;
        model.save(&checkpoint)?;
        write_trace(&out.path("training_trace.csv"), &report.trace)?;
        summary.insert(
            "train".into(),
            json!({
                "steps": report.trace.len(),
                "final_loss": report.smoothed_final_loss(),
                "checkpoint": checkpoint.display().to_string(),
            }),
        );
    }
    if matches!(config.stage, Stage::Eval | Stage::All) {
        let model = MetaClassifier::load(&checkpoint)?;
        if ensemble.is_none() && m.data.is_none() {
            return Err(CliError::Invalid(
                "nothing to evaluate: set metaclf.data or a positive metaclf.ensemble_size".into(),
            ));
        }
        let mut eval = Map::new();
        if let Some(ensemble) = &ensemble {
            let mut rng = substream(config.seed, "heldout");
            let rows = m
                .n_values()
                .into_iter()
                .map(|n| compare_with_oracle(&model, ensemble, n, m.heldout, &mut rng))
                .collect::<Result<Vec<_>, _>>()?;
            write_oracle_csv(&out.path("oracle_comparison.csv"), &rows)?;
            let worst = |f: &dyn Fn(&favi_metaclf::oracle::OracleGap) -> f64| {
                rows.iter().map(f).fold(f64::NEG_INFINITY, f64::max)
            };
            eval.insert(
                "oracle".into(),
                json!({
                    "max_log_loss_regret": worst(&|r| r.regret()),
                    "max_accuracy_shortfall": worst(&|r| r.oracle_accuracy - r.accuracy),
                }),
            );
        }
        if let Some(data_path) = &m.data {
            let label = m
                .label_col
                .clone()
                .ok_or_else(|| CliError::Invalid("metaclf.data needs metaclf.label_col".into()))?;
            let options = IngestOptions {
                label_column: label,
                feature_columns: None,
                label_rule: m.label_rule,
                standardize: m.standardize,
            };
            let data = ingest_csv(data_path, &options)?;
            let logistic = Logistic::default();
            let knn = Knn { k: m.knn_k };
            let predictors: [&dyn Classifier; 4] = [&model, &logistic, &knn, &Majority];
            let rows = evaluate_small_data(
                &data,
                &predictors,
                &m.n_values(),
                m.repeats,
                &mut substream(config.seed, "harness"),
            )?;
            write_accuracy_csv(&out.path("accuracy.csv"), &rows)?;
            eval.insert(
                "small_data".into(),
                json!({
                    "rows": data.len(),
                    "features": data.feature_names,
                    "accuracy": rows.iter().map(|r| json!({
                        "predictor": r.predictor, "N": r.n, "accuracy": r.accuracy, "stderr": r.stderr
                    })).collect::<Vec<_>>(),
                }),
            );
        }
        summary.insert("eval".into(), Value::Object(eval));
    }
    Ok(Value::Object(summary))
}
