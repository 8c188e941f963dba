//! Run configuration in a line-based `key = value` format.
//!
//! ```text
//! experiment = forecast      # oracle-suite | favi-vs-reverse | forecast | metaclf
//! seed = 7
//! output_dir = out
//!
//! [forecast]
//! horizon = 1.5
//! epochs = 40
//! ```
//!
//! Top-level keys come before any `[section]` header. `#` starts a comment. Every problem in
//! the text is reported, not just the first.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use favi_core::adam::AdamConfig;
use favi_core::experiments::{CompareConfig as ViCompareConfig, ContrastConfig, Theorem1Config, Theorem2Config};
use favi_core::favi::TrainConfig;
use favi_lorenz::forecaster::ForecasterConfig;
use favi_lorenz::scoring::CompareConfig as ForecastCompareConfig;
use favi_lorenz::RecordConfig;
use favi_metaclf::data::LabelRule;
use favi_metaclf::encoder::{EncoderConfig, EncoderKind};
use favi_metaclf::train::{MetaTrainConfig, TaskSimulator};
use favi_metaclf::EnsembleConfig;

pub const SECTIONS: [&str; 4] = ["oracle", "compare", "forecast", "metaclf"];
pub const REQUIRED: [&str; 2] = ["experiment", "seed"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    OracleSuite,
    FaviVsReverse,
    Forecast,
    Metaclf,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [
        Experiment::OracleSuite,
        Experiment::FaviVsReverse,
        Experiment::Forecast,
        Experiment::Metaclf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::OracleSuite => "oracle-suite",
            Experiment::FaviVsReverse => "favi-vs-reverse",
            Experiment::Forecast => "forecast",
            Experiment::Metaclf => "metaclf",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.name() == s)
    }

    /// Whether the experiment has separate train and eval stages.
    pub fn staged(self) -> bool {
        matches!(self, Experiment::Forecast | Experiment::Metaclf)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Train,
    Eval,
    /// Train, then evaluate the freshly written checkpoint.
    All,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Stage::Train, Stage::Eval, Stage::All]
            .into_iter()
            .find(|v| v.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub samples_per_epoch: usize,
    pub step_size: f64,
    pub final_lr_fraction: f64,
}

impl TrainSection {
    fn from(c: &TrainConfig) -> Self {
        Self {
            epochs: c.epochs,
            batch_size: c.batch_size,
            samples_per_epoch: c.samples_per_epoch,
            step_size: c.adam.step_size,
            final_lr_fraction: c.final_lr_fraction,
        }
    }

    fn apply(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            samples_per_epoch: self.samples_per_epoch,
            adam: AdamConfig {
                step_size: self.step_size,
                ..AdamConfig::default()
            },
            final_lr_fraction: self.final_lr_fraction,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSection {
    pub joints: usize,
    pub hidden: usize,
    pub chain_epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareSection {
    pub rho: f64,
    pub data_points: usize,
    pub eval_draws: usize,
    pub bootstrap_reps: usize,
    pub hidden: usize,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastSection {
    pub horizon: f64,
    pub noise_sd: f64,
    pub n_obs: usize,
    pub obs_spacing: f64,
    pub channels: usize,
    pub input_scale: f64,
    pub train: TrainSection,
    pub trials: usize,
    pub ensemble: usize,
    pub radius: f64,
    pub bootstrap_reps: usize,
    pub calibration_records: usize,
    pub posterior_points: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaSection {
    pub encoder: EncoderKind,
    pub width: usize,
    /// Size of the frozen task ensemble; 0 trains on fresh tasks from the family.
    pub ensemble_size: usize,
    /// Fixes the ensemble independently of the run seed, so train and eval agree.
    pub ensemble_seed: u64,
    pub train_n_min: usize,
    pub train_n_max: usize,
    pub train: TrainSection,
    pub data: Option<PathBuf>,
    pub label_col: Option<String>,
    pub label_rule: LabelRule,
    pub standardize: bool,
    pub n_min: usize,
    pub n_max: usize,
    pub n_step: usize,
    pub repeats: usize,
    pub heldout: usize,
    pub knn_k: usize,
}

impl MetaSection {
    /// Training-set sizes evaluated: `n_min, n_min + n_step, …` up to `n_max`.
    pub fn n_values(&self) -> Vec<usize> {
        (self.n_min..=self.n_max).step_by(self.n_step.max(1)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub stage: Stage,
    pub output_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub oracle: OracleSection,
    pub compare: CompareSection,
    pub forecast: ForecastSection,
    pub metaclf: MetaSection,
}

impl RunConfig {
    /// Every optional key at its module default.
    pub fn defaults(experiment: Experiment, seed: u64) -> Self {
        let t1 = Theorem1Config::new(seed);
        let t2 = Theorem2Config::new(seed);
        let contrast = ContrastConfig::new(seed);
        let vi = ViCompareConfig::new(seed);
        let fc = ForecasterConfig::default();
        let fe = ForecastCompareConfig::default();
        let mt = MetaTrainConfig::default();
        Self {
            experiment,
            seed,
            stage: Stage::All,
            output_dir: PathBuf::from("out"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            oracle: OracleSection {
                joints: t1.joints,
                hidden: t1.hidden,
                chain_epochs: t2.train.epochs,
            },
            compare: CompareSection {
                rho: contrast.rho,
                data_points: vi.data_points,
                eval_draws: vi.eval_draws,
                bootstrap_reps: vi.bootstrap_reps,
                hidden: vi.hidden,
                epochs: vi.train.epochs,
            },
            forecast: ForecastSection {
                horizon: fc.record.horizon,
                noise_sd: fc.record.noise_sd,
                n_obs: fc.record.n_obs,
                obs_spacing: fc.record.obs_spacing,
                channels: fc.channels,
                input_scale: fc.input_scale,
                train: TrainSection::from(&fc.train),
                trials: fe.trials,
                ensemble: fe.ensemble,
                radius: fe.radius,
                bootstrap_reps: fe.bootstrap_reps,
                calibration_records: 2000,
                posterior_points: 512,
            },
            metaclf: MetaSection {
                encoder: mt.encoder.kind,
                width: mt.encoder.width,
                ensemble_size: 64,
                ensemble_seed: 0,
                train_n_min: 12,
                train_n_max: 42,
                train: TrainSection::from(&mt.train),
                data: None,
                label_col: None,
                label_rule: LabelRule::Binary,
                standardize: true,
                n_min: 12,
                n_max: 42,
                n_step: 10,
                repeats: 500,
                heldout: 2000,
                knn_k: 5,
            },
        }
    }

    /// Makes every relative path absolute against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut self.output_dir);
        resolve(&mut self.checkpoint_dir);
        if let Some(d) = self.metaclf.data.as_mut() {
            resolve(d);
        }
    }

    pub fn theorem1_config(&self) -> Theorem1Config {
        Theorem1Config {
            joints: self.oracle.joints,
            hidden: self.oracle.hidden,
            ..Theorem1Config::new(self.seed)
        }
    }

    pub fn theorem2_config(&self) -> Theorem2Config {
        let mut c = Theorem2Config::new(self.seed);
        c.train.epochs = self.oracle.chain_epochs;
        c
    }

    pub fn contrast_config(&self) -> ContrastConfig {
        let mut c = ContrastConfig::new(self.seed);
        c.rho = self.compare.rho;
        c.train.epochs = self.compare.epochs;
        c
    }

    pub fn vi_compare_config(&self) -> ViCompareConfig {
        let mut c = ViCompareConfig::new(self.seed);
        c.data_points = self.compare.data_points;
        c.eval_draws = self.compare.eval_draws;
        c.bootstrap_reps = self.compare.bootstrap_reps;
        c.hidden = self.compare.hidden;
        c.train.epochs = self.compare.epochs;
        c
    }

    pub fn record_config(&self) -> RecordConfig {
        let f = &self.forecast;
        RecordConfig {
            horizon: f.horizon,
            noise_sd: f.noise_sd,
            n_obs: f.n_obs,
            obs_spacing: f.obs_spacing,
            ..RecordConfig::default()
        }
    }

    pub fn forecaster_config(&self) -> ForecasterConfig {
        ForecasterConfig {
            record: self.record_config(),
            channels: self.forecast.channels,
            input_scale: self.forecast.input_scale,
            train: self.forecast.train.apply(self.seed),
            ..ForecasterConfig::default()
        }
    }

    pub fn forecast_compare_config(&self) -> ForecastCompareConfig {
        let f = &self.forecast;
        ForecastCompareConfig {
            record: self.record_config(),
            trials: f.trials,
            ensemble: f.ensemble,
            radius: f.radius,
            bootstrap_reps: f.bootstrap_reps,
            seed: self.seed,
        }
    }

    pub fn meta_train_config(&self) -> MetaTrainConfig {
        let m = &self.metaclf;
        MetaTrainConfig {
            encoder: EncoderConfig {
                kind: m.encoder,
                width: m.width,
                ..EncoderConfig::default()
            },
            train: m.train.apply(self.seed),
        }
    }

    /// The simulator without its ensemble; the runner attaches the frozen ensemble.
    pub fn task_simulator(&self) -> TaskSimulator {
        TaskSimulator {
            family: EnsembleConfig::default(),
            ensemble: None,
            n_range: (self.metaclf.train_n_min, self.metaclf.train_n_max),
        }
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        put("experiment", self.experiment.name().into());
        put("seed", self.seed.to_string());
        put("stage", self.stage.name().into());
        put("output_dir", path_text(&self.output_dir));
        put("checkpoint_dir", path_text(&self.checkpoint_dir));

        let o = &self.oracle;
        put("oracle.joints", o.joints.to_string());
        put("oracle.hidden", o.hidden.to_string());
        put("oracle.chain_epochs", o.chain_epochs.to_string());

        let c = &self.compare;
        put("compare.rho", c.rho.to_string());
        put("compare.data_points", c.data_points.to_string());
        put("compare.eval_draws", c.eval_draws.to_string());
        put("compare.bootstrap_reps", c.bootstrap_reps.to_string());
        put("compare.hidden", c.hidden.to_string());
        put("compare.epochs", c.epochs.to_string());

        let f = &self.forecast;
        put("forecast.horizon", f.horizon.to_string());
        put("forecast.noise_sd", f.noise_sd.to_string());
        put("forecast.n_obs", f.n_obs.to_string());
        put("forecast.obs_spacing", f.obs_spacing.to_string());
        put("forecast.channels", f.channels.to_string());
        put("forecast.input_scale", f.input_scale.to_string());
        train_entries(&mut put, "forecast", &f.train);
        put("forecast.trials", f.trials.to_string());
        put("forecast.ensemble", f.ensemble.to_string());
        put("forecast.radius", f.radius.to_string());
        put("forecast.bootstrap_reps", f.bootstrap_reps.to_string());
        put("forecast.calibration_records", f.calibration_records.to_string());
        put("forecast.posterior_points", f.posterior_points.to_string());

        let m = &self.metaclf;
        put("metaclf.encoder", m.encoder.name().into());
        put("metaclf.width", m.width.to_string());
        put("metaclf.ensemble_size", m.ensemble_size.to_string());
        put("metaclf.ensemble_seed", m.ensemble_seed.to_string());
        put("metaclf.train_n_min", m.train_n_min.to_string());
        put("metaclf.train_n_max", m.train_n_max.to_string());
        train_entries(&mut put, "metaclf", &m.train);
        if let Some(d) = &m.data {
            put("metaclf.data", path_text(d));
        }
        if let Some(l) = &m.label_col {
            put("metaclf.label_col", l.clone());
        }
        put("metaclf.label_rule", label_rule_name(m.label_rule).into());
        put("metaclf.standardize", m.standardize.to_string());
        put("metaclf.n_min", m.n_min.to_string());
        put("metaclf.n_max", m.n_max.to_string());
        put("metaclf.n_step", m.n_step.to_string());
        put("metaclf.repeats", m.repeats.to_string());
        put("metaclf.heldout", m.heldout.to_string());
        put("metaclf.knn_k", m.knn_k.to_string());
        out
    }

    /// Canonical text that parses back to this configuration.
    pub fn to_text(&self) -> String {
        let mut text = String::new();
        let mut current = String::new();
        for (key, value) in self.entries() {
            let (section, name) = key.split_once('.').unwrap_or(("", key.as_str()));
            if section != current {
                text.push_str(&format!("\n[{section}]\n"));
                current = section.to_string();
            }
            text.push_str(&format!("{name} = {value}\n"));
        }
        text
    }

    fn assign(&mut self, key: &str, value: &str) -> Result<(), Problem> {
        match key {
            "experiment" => {
                self.experiment = choice(
                    value,
                    Experiment::parse,
                    "one of oracle-suite, favi-vs-reverse, forecast, metaclf",
                )?
            }
            "seed" => self.seed = int(value)?,
            "stage" => self.stage = choice(value, Stage::parse, "one of train, eval, all")?,
            "output_dir" => self.output_dir = path(value)?,
            "checkpoint_dir" => self.checkpoint_dir = path(value)?,

            "oracle.joints" => self.oracle.joints = int(value)?,
            "oracle.hidden" => self.oracle.hidden = int(value)?,
            "oracle.chain_epochs" => self.oracle.chain_epochs = int(value)?,

            "compare.rho" => self.compare.rho = float(value)?,
            "compare.data_points" => self.compare.data_points = int(value)?,
            "compare.eval_draws" => self.compare.eval_draws = int(value)?,
            "compare.bootstrap_reps" => self.compare.bootstrap_reps = int(value)?,
            "compare.hidden" => self.compare.hidden = int(value)?,
            "compare.epochs" => self.compare.epochs = int(value)?,

            "forecast.horizon" => self.forecast.horizon = float(value)?,
            "forecast.noise_sd" => self.forecast.noise_sd = float(value)?,
            "forecast.n_obs" => self.forecast.n_obs = int(value)?,
            "forecast.obs_spacing" => self.forecast.obs_spacing = float(value)?,
            "forecast.channels" => self.forecast.channels = int(value)?,
            "forecast.input_scale" => self.forecast.input_scale = float(value)?,
            "forecast.trials" => self.forecast.trials = int(value)?,
            "forecast.ensemble" => self.forecast.ensemble = int(value)?,
            "forecast.radius" => self.forecast.radius = float(value)?,
            "forecast.bootstrap_reps" => self.forecast.bootstrap_reps = int(value)?,
            "forecast.calibration_records" => self.forecast.calibration_records = int(value)?,
            "forecast.posterior_points" => self.forecast.posterior_points = int(value)?,

            "metaclf.encoder" => self.metaclf.encoder = choice(value, EncoderKind::parse, "one of pooled, recurrent")?,
            "metaclf.width" => self.metaclf.width = int(value)?,
            "metaclf.ensemble_size" => self.metaclf.ensemble_size = int(value)?,
            "metaclf.ensemble_seed" => self.metaclf.ensemble_seed = int(value)?,
            "metaclf.train_n_min" => self.metaclf.train_n_min = int(value)?,
            "metaclf.train_n_max" => self.metaclf.train_n_max = int(value)?,
            "metaclf.data" => self.metaclf.data = Some(path(value)?),
            "metaclf.label_col" => self.metaclf.label_col = Some(text(value)?),
            "metaclf.label_rule" => self.metaclf.label_rule = choice(value, parse_label_rule, "one of binary, median")?,
            "metaclf.standardize" => self.metaclf.standardize = boolean(value)?,
            "metaclf.n_min" => self.metaclf.n_min = int(value)?,
            "metaclf.n_max" => self.metaclf.n_max = int(value)?,
            "metaclf.n_step" => self.metaclf.n_step = int(value)?,
            "metaclf.repeats" => self.metaclf.repeats = int(value)?,
            "metaclf.heldout" => self.metaclf.heldout = int(value)?,
            "metaclf.knn_k" => self.metaclf.knn_k = int(value)?,

            _ => {
                let (section, name) = key.split_once('.').unwrap_or(("", key));
                let train = match section {
                    "forecast" => &mut self.forecast.train,
                    "metaclf" => &mut self.metaclf.train,
                    _ => return Err(Problem::Unknown),
                };
                match name {
                    "epochs" => train.epochs = int(value)?,
                    "batch_size" => train.batch_size = int(value)?,
                    "samples_per_epoch" => train.samples_per_epoch = int(value)?,
                    "step_size" => train.step_size = float(value)?,
                    "final_lr_fraction" => train.final_lr_fraction = float(value)?,
                    _ => return Err(Problem::Unknown),
                }
            }
        }
        Ok(())
    }

    /// Cross-key constraints that no single value can violate on its own.
    fn validate(&self) -> Vec<ConfigError> {
        let mut errors = Vec::new();
        let mut check = |ok: bool, key: &str, reason: &str| {
            if !ok {
                errors.push(ConfigError::Invalid {
                    key: key.into(),
                    reason: reason.into(),
                });
            }
        };
        let f = &self.forecast;
        check(
            f.n_obs.is_power_of_two() && f.n_obs >= 2,
            "forecast.n_obs",
            "must be a power of two, at least 2",
        );
        check(f.horizon >= 0.0, "forecast.horizon", "must be non-negative");
        check(f.noise_sd >= 0.0, "forecast.noise_sd", "must be non-negative");
        check(f.radius > 0.0, "forecast.radius", "must be positive");
        check(f.trials > 0, "forecast.trials", "must be positive");
        for (section, t) in [("forecast", &f.train), ("metaclf", &self.metaclf.train)] {
            check(t.epochs > 0, &format!("{section}.epochs"), "must be positive");
            check(t.batch_size > 0, &format!("{section}.batch_size"), "must be positive");
            check(t.step_size > 0.0, &format!("{section}.step_size"), "must be positive");
            check(
                t.final_lr_fraction > 0.0 && t.final_lr_fraction <= 1.0,
                &format!("{section}.final_lr_fraction"),
                "must lie in (0, 1]",
            );
        }
        let m = &self.metaclf;
        check(
            m.train_n_min <= m.train_n_max && m.train_n_max <= 64,
            "metaclf.train_n_max",
            "training sizes need train_n_min <= train_n_max <= 64",
        );
        check(m.n_min <= m.n_max, "metaclf.n_max", "must be at least n_min");
        check(m.n_step > 0, "metaclf.n_step", "must be positive");
        check(m.repeats > 0, "metaclf.repeats", "must be positive");
        check(m.knn_k > 0, "metaclf.knn_k", "must be positive");
        check(m.width > 0, "metaclf.width", "must be positive");
        errors
    }
}

fn train_entries(put: &mut impl FnMut(&str, String), section: &str, t: &TrainSection) {
    put(&format!("{section}.epochs"), t.epochs.to_string());
    put(&format!("{section}.batch_size"), t.batch_size.to_string());
    put(&format!("{section}.samples_per_epoch"), t.samples_per_epoch.to_string());
    put(&format!("{section}.step_size"), t.step_size.to_string());
    put(&format!("{section}.final_lr_fraction"), t.final_lr_fraction.to_string());
}

fn path_text(p: &Path) -> String {
    p.display().to_string()
}

fn label_rule_name(r: LabelRule) -> &'static str {
    match r {
        LabelRule::Binary => "binary",
        LabelRule::Median => "median",
    }
}

fn parse_label_rule(s: &str) -> Option<LabelRule> {
    match s {
        "binary" => Some(LabelRule::Binary),
        "median" => Some(LabelRule::Median),
        _ => None,
    }
}

enum Problem {
    Unknown,
    Mismatch(&'static str),
}

fn int<T: std::str::FromStr>(v: &str) -> Result<T, Problem> {
    v.parse().map_err(|_| Problem::Mismatch("a non-negative integer"))
}

fn float(v: &str) -> Result<f64, Problem> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or(Problem::Mismatch("a finite number"))
}

fn boolean(v: &str) -> Result<bool, Problem> {
    v.parse().map_err(|_| Problem::Mismatch("true or false"))
}

fn text(v: &str) -> Result<String, Problem> {
    if v.is_empty() {
        Err(Problem::Mismatch("a non-empty value"))
    } else {
        Ok(v.to_string())
    }
}

fn path(v: &str) -> Result<PathBuf, Problem> {
    text(v).map(PathBuf::from)
}

fn choice<T>(v: &str, parse: impl Fn(&str) -> Option<T>, expected: &'static str) -> Result<T, Problem> {
    parse(v).ok_or(Problem::Mismatch(expected))
}

/// Where an assignment came from: a line of the text or a command-line override.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Override,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Override => write!(f, "override"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConfigError {
    Syntax {
        line: usize,
        text: String,
    },
    UnknownSection {
        line: usize,
        section: String,
    },
    UnknownKey {
        origin: Origin,
        key: String,
    },
    Duplicate {
        line: usize,
        key: String,
    },
    TypeMismatch {
        origin: Origin,
        key: String,
        expected: &'static str,
        got: String,
    },
    Missing {
        key: &'static str,
    },
    Invalid {
        key: String,
        reason: String,
    },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Syntax { line, text } => {
                write!(f, "line {line}: expected `key = value` or `[section]`, got {text:?}")
            }
            ConfigError::UnknownSection { line, section } => write!(f, "line {line}: unknown section [{section}]"),
            ConfigError::UnknownKey { origin, key } => write!(f, "{origin}: unknown key `{key}`"),
            ConfigError::Duplicate { line, key } => write!(f, "line {line}: key `{key}` set twice"),
            ConfigError::TypeMismatch {
                origin,
                key,
                expected,
                got,
            } => {
                write!(
                    f,
                    "{origin}: type mismatch for `{key}`: expected {expected}, got {got:?}"
                )
            }
            ConfigError::Missing { key } => write!(f, "missing required key `{key}`"),
            ConfigError::Invalid { key, reason } => write!(f, "invalid `{key}`: {reason}"),
        }
    }
}

/// All problems found in one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigErrors> {
    parse_config_with(text, &[])
}

/// Parses `text`, then applies `overrides` (`key` or `section.key`, value) on top.
pub fn parse_config_with(text: &str, overrides: &[(String, String)]) -> Result<RunConfig, ConfigErrors> {
    let mut config = RunConfig::defaults(Experiment::OracleSuite, 0);
    let mut errors = Vec::new();
    let mut seen = HashSet::new();
    let mut section = String::new();
    let mut section_known = true;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = name.trim().to_string();
            section_known = SECTIONS.contains(&section.as_str());
            if !section_known {
                errors.push(ConfigError::UnknownSection {
                    line,
                    section: section.clone(),
                });
            }
            continue;
        }
        let Some((name, value)) = content.split_once('=') else {
            errors.push(ConfigError::Syntax {
                line,
                text: content.to_string(),
            });
            continue;
        };
        if !section_known {
            continue;
        }
        let key = if section.is_empty() {
            name.trim().to_string()
        } else {
            format!("{section}.{}", name.trim())
        };
        if !seen.insert(key.clone()) {
            errors.push(ConfigError::Duplicate { line, key });
            continue;
        }
        apply(&mut config, &key, value.trim(), Origin::Line(line), &mut errors);
    }
    for (key, value) in overrides {
        seen.insert(key.clone());
        apply(&mut config, key, value.trim(), Origin::Override, &mut errors);
    }
    for key in REQUIRED {
        if !seen.contains(key) {
            errors.push(ConfigError::Missing { key });
        }
    }
    if errors.is_empty() {
        errors = config.validate();
    }
    if errors.is_empty() {
        Ok(config)
    } else {
        Err(ConfigErrors(errors))
    }
}

fn apply(config: &mut RunConfig, key: &str, value: &str, origin: Origin, errors: &mut Vec<ConfigError>) {
    match config.assign(key, value) {
        Ok(()) => {}
        Err(Problem::Unknown) => errors.push(ConfigError::UnknownKey {
            origin,
            key: key.to_string(),
        }),
        Err(Problem::Mismatch(expected)) => errors.push(ConfigError::TypeMismatch {
            origin,
            key: key.to_string(),
            expected,
            got: value.to_string(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use favi_lorenz::scoring::SCORE_RADIUS;
    use proptest::prelude::*;

    #[test]
    fn empty_text_lists_every_required_key() {
        let err = parse_config("").unwrap_err();
        assert_eq!(
            err.0,
            vec![
                ConfigError::Missing { key: "experiment" },
                ConfigError::Missing { key: "seed" }
            ]
        );
    }

    #[test]
    fn minimal_forecast_config_takes_module_defaults() {
        let c = parse_config("experiment = forecast\nseed = 3\n").unwrap();
        assert_eq!(c.experiment, Experiment::Forecast);
        let f = c.forecaster_config();
        let d = ForecasterConfig::default();
        assert_eq!(f.record, d.record);
        assert_eq!(f.channels, d.channels);
        assert_eq!(f.input_scale, d.input_scale);
        assert_eq!(f.train, TrainConfig { seed: 3, ..d.train });
        assert_eq!(c.forecast.radius, SCORE_RADIUS);
        assert_eq!(
            c.forecast_compare_config(),
            ForecastCompareConfig {
                seed: 3,
                ..ForecastCompareConfig::default()
            }
        );
    }

    #[test]
    fn bad_seed_is_one_error_naming_the_key() {
        let err = parse_config("experiment = forecast\nseed = abc\n").unwrap_err();
        assert_eq!(err.0.len(), 1);
        let msg = err.to_string();
        assert!(
            msg.contains("`seed`") && msg.contains("line 2") && msg.contains("\"abc\""),
            "{msg}"
        );
    }

    #[test]
    fn every_problem_is_reported() {
        let text = "experiment = forecast\nwhat\n[forecast]\nhorizon = far\nfoo = 1\n[nowhere]\nx = 1\n[metaclf]\nepochs = 2\nepochs = 3\n";
        let err = parse_config(text).unwrap_err();
        let kinds: Vec<String> = err.0.iter().map(|e| e.to_string()).collect();
        assert_eq!(kinds.len(), 6, "{kinds:#?}");
        assert!(matches!(err.0[0], ConfigError::Syntax { line: 2, .. }));
        assert!(matches!(&err.0[1], ConfigError::TypeMismatch { key, .. } if key == "forecast.horizon"));
        assert!(matches!(&err.0[2], ConfigError::UnknownKey { key, .. } if key == "forecast.foo"));
        assert!(matches!(&err.0[3], ConfigError::UnknownSection { section, .. } if section == "nowhere"));
        assert!(matches!(&err.0[4], ConfigError::Duplicate { key, .. } if key == "metaclf.epochs"));
        assert_eq!(err.0[5], ConfigError::Missing { key: "seed" });
    }

    #[test]
    fn overrides_win_and_satisfy_required_keys() {
        let overrides = vec![
            ("seed".to_string(), "9".to_string()),
            ("forecast.trials".to_string(), "20".to_string()),
        ];
        let c = parse_config_with("experiment = forecast\n[forecast]\ntrials = 500\n", &overrides).unwrap();
        assert_eq!((c.seed, c.forecast.trials), (9, 20));
        let bad = vec![("forecast.bogus".to_string(), "1".to_string())];
        let err = parse_config_with("experiment = forecast\nseed = 1\n", &bad).unwrap_err();
        assert_eq!(
            err.0,
            vec![ConfigError::UnknownKey {
                origin: Origin::Override,
                key: "forecast.bogus".into()
            }]
        );
    }

    #[test]
    fn cross_key_constraints_are_checked() {
        let err = parse_config("experiment = forecast\nseed = 1\n[forecast]\nn_obs = 48\n").unwrap_err();
        assert!(matches!(&err.0[..], [ConfigError::Invalid { key, .. }] if key == "forecast.n_obs"));
        let err = parse_config("experiment = metaclf\nseed = 1\n[metaclf]\ntrain_n_max = 80\n").unwrap_err();
        assert_eq!(err.0.len(), 1);
    }

    #[test]
    fn relative_paths_resolve_against_base() {
        let mut c =
            parse_config("experiment = metaclf\nseed = 1\noutput_dir = /abs/out\n[metaclf]\ndata = d.csv\n").unwrap();
        c.resolve_paths(Path::new("/base"));
        assert_eq!(c.output_dir, PathBuf::from("/abs/out"));
        assert_eq!(c.checkpoint_dir, PathBuf::from("/base/checkpoints"));
        assert_eq!(c.metaclf.data, Some(PathBuf::from("/base/d.csv")));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn canonical_text_round_trips(
            exp in 0usize..4,
            seed in any::<u64>(),
            horizon in 0.0f64..3.0,
            step in 1e-5f64..1e-1,
            n_min in 0usize..30,
            extra in 0usize..30,
            label in proptest::option::of("[a-z_]{1,12}"),
        ) {
            let mut c = RunConfig::defaults(Experiment::ALL[exp], seed);
            c.forecast.horizon = horizon;
            c.metaclf.train.step_size = step;
            c.metaclf.n_min = n_min;
            c.metaclf.n_max = n_min + extra;
            c.metaclf.label_col = label;
            let back = parse_config(&c.to_text()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
