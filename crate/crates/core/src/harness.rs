//! Experiment orchestration: configuration, presets, arm execution, dataset
//! ingestion and the self-test suites.
//!
//! # Config files
//!
//! Configs are TOML. Top-level keys are `version` (currently 1),
//! `experiment` (`bench-exact`, `opt-synth`, `dvae` or `nesy`), `seed` and
//! `iterations`; optional `[task]` and `[output]` tables hold experiment
//! parameters and the report destination; each `[[arm]]` table describes one
//! estimator:
//!
//! ```toml
//! version = 1
//! experiment = "opt-synth"
//! seed = 7
//! iterations = 10000
//!
//! [task]
//! dims = 200
//! log_every = 10
//!
//! [output]
//! path = "opt.csv"
//! format = "csv"
//!
//! [[arm]]
//! name = "indecater"
//! estimator = "indecater"
//! samples = 2
//! optimizer = "rmsprop"
//! lr = 5.0
//!
//! [[arm]]
//! estimator = "gs"
//! samples = 800
//! lr = 0.01
//! anneal = { initial = 0.1, decay_factor = 0.951229424500714, period = 20, floor = 0.001 }
//! ```
//!
//! For `bench-exact`, `iterations` is the number of estimator trials; for
//! `nesy` it counts epochs; otherwise it counts optimiser steps.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::categorical::{
    enumerate_support, exact_expectation, exact_gradient, softmax_row, Factorisation, FnObjective,
    LogitTable, Objective, RelaxedObjective, TableObjective, DEFAULT_BUDGET,
};
use crate::error::{Error, Result};
use crate::estimators::{
    self, bias_variance, estimate, AnnealSchedule, EstimatorConfig, EstimatorKind, GradEstimate, Moments,
};
use crate::nn::{self, Matrix, Optimizer};
use crate::report::{write_metrics, ArmRun, ArmStatus, ArmSummary, Format, RunReport, StepRecord};
use crate::rng;
use crate::tasks::{
    self, DvaeLog, DvaeModel, DvaeSetup, DvaeTrainer, LogOptions, NesySetup, NesyTrainer, SynthExactTask,
    SynthOptTask, INIT_STREAM,
};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    BenchExact,
    OptSynth,
    Dvae,
    Nesy,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 4] = [
        ExperimentId::BenchExact,
        ExperimentId::OptSynth,
        ExperimentId::Dvae,
        ExperimentId::Nesy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::BenchExact => "bench-exact",
            ExperimentId::OptSynth => "opt-synth",
            ExperimentId::Dvae => "dvae",
            ExperimentId::Nesy => "nesy",
        }
    }

    /// Preset used when neither a config file nor a preset name is given.
    pub fn default_preset(self) -> &'static str {
        match self {
            ExperimentId::BenchExact => "fig1a",
            ExperimentId::OptSynth => "fig2",
            ExperimentId::Dvae => "dvae-desk",
            ExperimentId::Nesy => "nesy-desk",
        }
    }
}

impl FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::UnknownExperiment(s.to_string()))
    }
}

impl std::fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Rmsprop,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub estimator: EstimatorKind,
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fresh: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anneal: Option<AnnealSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
}

impl ArmConfig {
    pub fn new(estimator: EstimatorKind, samples: usize) -> Self {
        Self {
            name: None,
            estimator,
            samples,
            fresh: None,
            temperature: None,
            anneal: None,
            optimizer: None,
            lr: None,
        }
    }

    fn named(mut self, name: &str) -> Self {
        self.name = Some(name.to_string());
        self
    }

    fn lr(mut self, lr: f64) -> Self {
        self.lr = Some(lr);
        self
    }

    /// Parses `kind-N` or `kind-N-fresh`, e.g. `indecater-2`, `rloo-800`.
    pub fn parse_spec(spec: &str) -> Result<Self> {
        let parts: Vec<&str> = spec.trim().split('-').collect();
        let bad = || Error::Config(format!("bad estimator spec `{spec}` (expected e.g. `indecater-2` or `rloo-800`)"));
        let (kind, rest) = match parts.as_slice() {
            [k, rest @ ..] => (EstimatorKind::from_str(k)?, rest),
            [] => return Err(bad()),
        };
        let (samples, fresh) = match rest {
            [n] => (n.parse().map_err(|_| bad())?, None),
            [n, "fresh"] => (n.parse().map_err(|_| bad())?, Some(true)),
            _ => return Err(bad()),
        };
        Ok(Self {
            fresh,
            ..Self::new(kind, samples)
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskParams {
    /// bench-exact shape preset: `fig1a`, `fig1b` or `fig1c`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub card: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_every: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance_probes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_steps: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    /// Per-pixel flip probability of the synthetic glyphs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    /// IDX files replacing the synthetic data (dvae, nesy).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idx_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idx_labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: Format,
}

fn default_format() -> Format {
    Format::Csv
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub experiment: ExperimentId,
    pub seed: u64,
    pub iterations: u64,
    #[serde(default)]
    pub task: TaskParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSpec>,
    #[serde(rename = "arm", default)]
    pub arms: Vec<ArmConfig>,
}

/// Every preset name with its experiment.
pub const PRESETS: [(&str, ExperimentId); 7] = [
    ("fig1a", ExperimentId::BenchExact),
    ("fig1b", ExperimentId::BenchExact),
    ("fig1c", ExperimentId::BenchExact),
    ("fig2", ExperimentId::OptSynth),
    ("dvae-desk", ExperimentId::Dvae),
    ("nesy-desk", ExperimentId::Nesy),
    ("nesy-desk2", ExperimentId::Nesy),
];

/// `e^{-0.05}`, the per-period decay of the synthetic temperature schedule.
pub fn synth_decay() -> f64 {
    (-0.05f64).exp()
}

impl ExperimentConfig {
    fn base(experiment: ExperimentId, iterations: u64, arms: Vec<ArmConfig>) -> Self {
        Self {
            version: CONFIG_VERSION,
            experiment,
            seed: 0,
            iterations,
            task: TaskParams::default(),
            output: None,
            arms,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        use EstimatorKind::*;
        let cfg = match name {
            "fig1a" | "fig1b" | "fig1c" => {
                let gs = ArmConfig {
                    temperature: Some(1.0),
                    ..ArmConfig::new(GumbelSoftmax, 1000)
                };
                let mut c = Self::base(
                    ExperimentId::BenchExact,
                    1000,
                    vec![
                        ArmConfig::new(Reinforce, 1000),
                        ArmConfig::new(Rloo, 1000),
                        gs,
                        ArmConfig::new(Indecater, 1),
                    ],
                );
                c.task.shape = Some(name.to_string());
                c
            }
            "fig2" => {
                let gs = ArmConfig {
                    anneal: Some(AnnealSchedule {
                        initial: 0.1,
                        decay_factor: synth_decay(),
                        period: 20,
                        floor: 1e-3,
                    }),
                    ..ArmConfig::new(GumbelSoftmax, 800).named("gs-f").lr(0.01)
                };
                let mut c = Self::base(
                    ExperimentId::OptSynth,
                    10_000,
                    vec![
                        ArmConfig::new(Indecater, 2).named("indecater").lr(5.0),
                        ArmConfig::new(Rloo, 2).named("rloo-s").lr(1.0),
                        ArmConfig::new(Rloo, 800).named("rloo-f").lr(5.0),
                        gs,
                    ],
                );
                c.task.dims = Some(200);
                c.task.log_every = Some(10);
                c
            }
            "dvae-desk" => {
                let gs = ArmConfig {
                    anneal: Some(AnnealSchedule {
                        initial: 1.0,
                        decay_factor: (-0.01f64).exp(),
                        period: 1,
                        floor: 0.1,
                    }),
                    ..ArmConfig::new(GumbelSoftmax, 2).named("gs")
                };
                let mut c = Self::base(
                    ExperimentId::Dvae,
                    2000,
                    vec![
                        ArmConfig::new(Indecater, 2).named("indecater"),
                        ArmConfig::new(Rloo, 2).named("rloo-s"),
                        ArmConfig::new(Rloo, 64).named("rloo-f"),
                        gs,
                    ],
                );
                c.task.log_every = Some(100);
                c.task.variance_probes = Some(16);
                c.task.probe_steps = Some(vec![100, 1000, 2000]);
                c
            }
            "nesy-desk" | "nesy-desk2" => {
                let mut c = Self::base(
                    ExperimentId::Nesy,
                    200,
                    vec![
                        ArmConfig::new(Indecater, 4).named("indecater"),
                        ArmConfig::new(Rloo, 12).named("rloo-s"),
                        ArmConfig::new(GumbelSoftmax, 12).named("gs"),
                    ],
                );
                c.task.seq_len = Some(if name == "nesy-desk" { 3 } else { 2 });
                c.task.classes = Some(4);
                c
            }
            other => return Err(Error::Config(format!("unknown preset `{other}`"))),
        };
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.arms.is_empty() {
            return Err(Error::Config("at least one [[arm]] is required".into()));
        }
        let mut names = std::collections::HashSet::new();
        for arm in &self.arms {
            let name = self.arm_name(arm);
            if !names.insert(name.clone()) {
                return Err(Error::Config(format!("duplicate arm name `{name}`")));
            }
            self.estimator_config(arm)
                .validate()
                .map_err(|e| Error::Config(format!("arm `{name}`: {e}")))?;
            if let Some(lr) = arm.lr {
                if !(lr > 0.0 && lr.is_finite()) {
                    return Err(Error::Config(format!("arm `{name}`: learning rate must be positive")));
                }
            }
        }
        if self.experiment == ExperimentId::BenchExact {
            tasks::synth_exact_shape(self.task.shape.as_deref().unwrap_or("fig1a"))?;
        }
        if self.task.idx_images.is_some() != self.task.idx_labels.is_some() {
            return Err(Error::Config("idx_images and idx_labels must be given together".into()));
        }
        if self.task.log_every == Some(0) {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }

    pub fn arm_name(&self, arm: &ArmConfig) -> String {
        arm.name.clone().unwrap_or_else(|| self.estimator_config(arm).label())
    }

    /// Estimator settings for `arm`, with experiment defaults filled in.
    pub fn estimator_config(&self, arm: &ArmConfig) -> EstimatorConfig {
        let fresh_default = self.experiment == ExperimentId::Nesy
            && matches!(arm.estimator, EstimatorKind::Indecater | EstimatorKind::Scater);
        let mut c = EstimatorConfig::new(arm.estimator, arm.samples).fresh(arm.fresh.unwrap_or(fresh_default));
        c.temperature = arm.temperature.unwrap_or(1.0);
        if let Some(s) = arm.anneal {
            c = c.with_anneal(s);
        }
        c
    }

    pub fn optimizer(&self, arm: &ArmConfig) -> Optimizer {
        let (kind, lr) = match self.experiment {
            ExperimentId::OptSynth => (OptimizerKind::Rmsprop, 1.0),
            ExperimentId::Dvae => (OptimizerKind::Adam, 1e-4),
            ExperimentId::Nesy => (OptimizerKind::Adam, 1e-3),
            ExperimentId::BenchExact => (OptimizerKind::Sgd, 1.0),
        };
        let lr = arm.lr.unwrap_or(lr);
        match arm.optimizer.unwrap_or(kind) {
            OptimizerKind::Adam => Optimizer::adam(lr),
            OptimizerKind::Rmsprop => Optimizer::rmsprop(lr),
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
        }
    }

    /// Replaces the arm list. Hyperparameters not given in a spec are taken
    /// from the first existing arm with the same estimator kind.
    pub fn override_estimators(&mut self, specs: &[ArmConfig]) {
        let old = std::mem::take(&mut self.arms);
        self.arms = specs
            .iter()
            .map(|s| match old.iter().find(|a| a.estimator == s.estimator) {
                Some(a) => ArmConfig {
                    name: None,
                    estimator: s.estimator,
                    samples: s.samples,
                    fresh: s.fresh.or(a.fresh),
                    temperature: s.temperature.or(a.temperature),
                    anneal: s.anneal.or(a.anneal),
                    optimizer: s.optimizer.or(a.optimizer),
                    lr: s.lr.or(a.lr),
                },
                None => s.clone(),
            })
            .collect();
    }
}

/// Summed per-coordinate sample variance of `probes` gradient re-estimates;
/// `estimate(i)` must use fresh randomness for each `i`.
pub fn gradient_variance_probe<F>(probes: usize, mut estimate: F) -> Result<f64>
where
    F: FnMut(u64) -> Result<Vec<f64>>,
{
    if probes < 2 {
        return Err(Error::InvalidArgument("a variance probe needs at least two re-estimates".into()));
    }
    let first = estimate(0)?;
    let mut m = Moments::new(first.len());
    m.push(&first);
    for i in 1..probes as u64 {
        let g = estimate(i)?;
        if g.len() != first.len() {
            return Err(Error::Shape("probe estimates differ in length".into()));
        }
        m.push(&g);
    }
    Ok(m.variance().iter().sum())
}

const ARM_STREAM: u64 = 100;
const PROBE_STREAM: u64 = 200;

fn arm_seed(seed: u64, stream: u64) -> u64 {
    rng::stream(seed, stream).gen()
}

/// Runs every arm of `config` and, when an output is configured, writes the
/// report. Arms run concurrently and are merged in configuration order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let runs: Vec<ArmRun> = config
        .arms
        .par_iter()
        .enumerate()
        .map(|(i, arm)| run_arm(config, arm, i as u64))
        .collect::<Result<Vec<_>>>()?;
    let report = RunReport {
        experiment: config.experiment.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        config: serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?,
        arms: runs.iter().map(|r| r.summary.clone()).collect(),
        steps: runs.into_iter().flat_map(|r| r.steps).collect(),
    };
    if let Some(out) = &config.output {
        write_metrics(&report, &out.path, out.format)?;
    }
    Ok(report)
}

fn run_arm(config: &ExperimentConfig, arm: &ArmConfig, index: u64) -> Result<ArmRun> {
    let name = config.arm_name(arm);
    let est = config.estimator_config(arm);
    let seed = config.seed;
    let mut arm_rng = rng::stream(seed, ARM_STREAM + index);
    let probe_seed = arm_seed(seed, PROBE_STREAM + index);
    let t = &config.task;
    match config.experiment {
        ExperimentId::BenchExact => {
            let shape = t.shape.as_deref().unwrap_or("fig1a");
            let task = SynthExactTask::preset(shape, &mut rng::stream(seed, tasks::DATA_STREAM))?;
            let fact = task.factorisation();
            let f = task.objective();
            let trials = config.iterations.max(2) as usize;
            let clock = std::time::Instant::now();
            let bv = bias_variance(&est, &fact, &f, trials, arm_rng.gen(), DEFAULT_BUDGET)?;
            let mut run = ArmRun::new(&name, &est.label());
            run.push(StepRecord {
                arm: name.clone(),
                step: trials as u64,
                objective: bv.bias_norm,
                metric: Some(bv.bias_band()),
                grad_variance: Some(bv.variance_sum),
                samples: bv.samples_drawn,
                function_evals: bv.function_evals,
                elapsed_ms: clock.elapsed().as_secs_f64() * 1e3,
            });
            run.summary.bias_norm = Some(bv.bias_norm);
            run.summary.bias_band = Some(bv.bias_band());
            run.summary.variance_sum = Some(bv.variance_sum);
            Ok(run)
        }
        ExperimentId::OptSynth => {
            let task = SynthOptTask::new(t.dims.unwrap_or(200))?;
            let log = LogOptions {
                log_every: t.log_every.unwrap_or(10),
                variance_probes: t.variance_probes.unwrap_or(0),
                probe_seed,
            };
            tasks::run_synth_opt(&task, &name, &est, config.optimizer(arm), config.iterations, &log, &mut arm_rng)
        }
        ExperimentId::Dvae => {
            let setup = dvae_setup(config)?;
            let params = setup.model.init(&mut rng::stream(seed, INIT_STREAM));
            let mut trainer = DvaeTrainer::new(setup, params, est, config.optimizer(arm), arm_rng)?;
            let opts = DvaeLog {
                log: LogOptions {
                    log_every: t.log_every.unwrap_or(100),
                    variance_probes: t.variance_probes.unwrap_or(0),
                    probe_seed,
                },
                probe_steps: t.probe_steps.clone().unwrap_or_default(),
                eval_seed: arm_seed(seed, PROBE_STREAM - 1),
            };
            tasks::run_dvae(&mut trainer, &name, config.iterations, &opts)
        }
        ExperimentId::Nesy => {
            if !est.kind.is_score_based() {
                let mut run = ArmRun::new(&name, &est.label());
                run.halt(ArmStatus::NotApplicable, Error::ZeroDerivative.to_string(), 0, 0);
                return Ok(run);
            }
            let setup = nesy_setup(config)?;
            let params = setup.init(&mut rng::stream(seed, INIT_STREAM));
            let mut trainer = NesyTrainer::new(setup, params, est, config.optimizer(arm), arm_rng)?;
            tasks::run_nesy(&mut trainer, &name, config.iterations)
        }
    }
}

/// Builds the DVAE data and model described by `config`.
pub fn dvae_setup(config: &ExperimentConfig) -> Result<DvaeSetup> {
    let t = &config.task;
    let train = t.train_size.unwrap_or(512);
    let eval = t.test_size.unwrap_or(128);
    let mut setup = match (&t.idx_images, &t.idx_labels) {
        (Some(img), Some(lbl)) => {
            let (x, _) = load_idx(img, lbl)?;
            let x = tasks::binarize(&x)?;
            if x.nrows() < train + eval {
                return Err(Error::Config(format!(
                    "IDX file has {} images, need {}",
                    x.nrows(),
                    train + eval
                )));
            }
            let hidden = t.hidden.clone().unwrap_or_else(|| vec![384, 256]);
            DvaeSetup {
                model: DvaeModel::new(x.ncols(), &hidden, t.latent.unwrap_or(200))?,
                train: x.slice(ndarray::s![..train, ..]).to_owned(),
                eval: x.slice(ndarray::s![train..train + eval, ..]).to_owned(),
                batch_size: 16,
                eval_draws: 16,
            }
        }
        _ => {
            let mut s = DvaeSetup::synthetic(train, eval, config.seed)?;
            if t.latent.is_some() || t.hidden.is_some() {
                let hidden = t.hidden.clone().unwrap_or_else(|| DvaeModel::DESK_HIDDEN.to_vec());
                s.model = DvaeModel::new(s.model.data_dim, &hidden, t.latent.unwrap_or(16))?;
            }
            s
        }
    };
    if let Some(b) = t.batch_size {
        setup.batch_size = b;
    }
    Ok(setup)
}

/// Builds the digit-sum data described by `config`.
pub fn nesy_setup(config: &ExperimentConfig) -> Result<NesySetup> {
    let t = &config.task;
    let seq_len = t.seq_len.unwrap_or(3);
    let train = t.train_size.unwrap_or(1200);
    let test = t.test_size.unwrap_or(600);
    let mut setup = match (&t.idx_images, &t.idx_labels) {
        (Some(img), Some(lbl)) => {
            let (x, y) = load_idx(img, lbl)?;
            if x.nrows() < train + test {
                return Err(Error::Config(format!(
                    "IDX file has {} images, need {}",
                    x.nrows(),
                    train + test
                )));
            }
            let mut r = rng::stream(config.seed, tasks::DATA_STREAM);
            NesySetup::from_images(
                t.classes.unwrap_or(10),
                seq_len,
                x.slice(ndarray::s![..train, ..]).to_owned(),
                &y[..train],
                x.slice(ndarray::s![train..train + test, ..]).to_owned(),
                &y[train..train + test],
                &mut r,
            )?
        }
        _ => NesySetup::glyphs(
            t.classes.unwrap_or(4),
            seq_len,
            train,
            test,
            t.noise.unwrap_or(tasks::GLYPH_FLIP),
            config.seed,
        )?,
    };
    if let Some(b) = t.batch_size {
        setup.batch_size = b;
    }
    Ok(setup)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Malformed(format!("{}: truncated header", path.display())))
}

/// Reads an IDX image file and its label file. Pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<(Matrix, Vec<usize>)> {
    let img = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lbl = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    if be_u32(&img, 0, images)? != IDX_IMAGES {
        return Err(Error::BadMagic("image"));
    }
    if be_u32(&lbl, 0, labels)? != IDX_LABELS {
        return Err(Error::BadMagic("label"));
    }
    let n = be_u32(&img, 4, images)? as usize;
    let rows = be_u32(&img, 8, images)? as usize;
    let cols = be_u32(&img, 12, images)? as usize;
    let m = be_u32(&lbl, 4, labels)? as usize;
    if n != m {
        return Err(Error::Malformed(format!("{n} images but {m} labels")));
    }
    let pixels = rows * cols;
    let body = &img[16..];
    if body.len() != n * pixels {
        return Err(Error::Malformed(format!(
            "{}: expected {} pixel bytes, found {}",
            images.display(),
            n * pixels,
            body.len()
        )));
    }
    let lbody = &lbl[8..];
    if lbody.len() != n {
        return Err(Error::Malformed(format!(
            "{}: expected {n} label bytes, found {}",
            labels.display(),
            lbody.len()
        )));
    }
    let x = Matrix::from_shape_fn((n, pixels), |(i, j)| body[i * pixels + j] as f64 / 255.0);
    Ok((x, lbody.iter().map(|&b| b as usize).collect()))
}

/// Deliberate defects for exercising the self-test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Scales every IndeCateR gradient by 1.5.
    BiasIndecater,
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "indecater-bias" => Ok(Fault::BiasIndecater),
            other => Err(Error::Config(format!("unknown fault `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestReport {
    pub suites: Vec<SuiteResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn failed(&self) -> Vec<&'static str> {
        self.suites.iter().filter(|s| !s.passed).map(|s| s.name).collect()
    }
}

fn faulty_estimate(
    fault: Option<Fault>,
    config: &EstimatorConfig,
    fact: &Factorisation,
    f: &dyn Objective,
    r: &mut rng::StreamRng,
) -> Result<GradEstimate> {
    let mut e = estimate(config, fact, f, 0, r)?;
    if fault == Some(Fault::BiasIndecater) && config.kind == EstimatorKind::Indecater {
        e.grad.scale(1.5);
    }
    Ok(e)
}

type Suite = fn(Option<Fault>) -> Result<String>;

fn check(cond: bool, detail: String) -> Result<String> {
    if cond {
        Ok(detail)
    } else {
        Err(Error::InvalidArgument(detail))
    }
}

fn suite_softmax(_: Option<Fault>) -> Result<String> {
    let p = softmax_row(&[2f64.ln(), 0.0])?;
    let q = softmax_row(&[1000.0, 0.0])?;
    let mut r = rng::seeded(1);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let v: Vec<f64> = (0..5).map(|_| r.gen_range(-20.0..20.0)).collect();
        let c = r.gen_range(-100.0..100.0);
        let a = softmax_row(&v)?;
        let b = softmax_row(&v.iter().map(|x| x + c).collect::<Vec<_>>())?;
        worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
    }
    check(
        (p[0] - 2.0 / 3.0).abs() < 1e-12 && (q[0] - 1.0).abs() < 1e-12 && worst < 1e-12,
        format!("max shift error {worst:.1e}"),
    )
}

fn suite_oracle(_: Option<Fault>) -> Result<String> {
    let mut r = rng::seeded(2);
    let fact = Factorisation::random_chain(&[3, 2, 3], 1.5, &mut r)?;
    let f = TableObjective::random(&[3, 2, 3], &mut r)?;
    let mut zero: f64 = 0.0;
    let mut mean = fact.zero_grad();
    for x in enumerate_support(fact.cards(), DEFAULT_BUDGET)? {
        let mut s = fact.score(&x)?;
        s.scale(fact.log_prob(&x)?.exp());
        mean.add_assign(&s);
    }
    zero = mean.flatten().iter().fold(zero, |m, v| m.max(v.abs()));
    let g = exact_gradient(&fact, &f, DEFAULT_BUDGET)?;
    let flat = g.flatten();
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    for i in 0..flat.len() {
        let mut e = vec![0.0; flat.len()];
        e[i] = h;
        let mut up = fact.clone();
        up.add_scaled(&g.with_values(&e)?, 1.0)?;
        let mut dn = fact.clone();
        dn.add_scaled(&g.with_values(&e)?, -1.0)?;
        let fd = (exact_expectation(&up, &f, DEFAULT_BUDGET)? - exact_expectation(&dn, &f, DEFAULT_BUDGET)?) / (2.0 * h);
        worst = worst.max(nn::rel_err(flat[i], fd));
    }
    check(
        zero < 1e-10 && worst < 1e-6,
        format!("score mean {zero:.1e}, finite-difference rel err {worst:.1e}"),
    )
}

fn suite_unbiased(fault: Option<Fault>) -> Result<String> {
    let mut r = rng::seeded(3);
    let indep = Factorisation::independent(&LogitTable::random(&[3, 2, 3], 1.0, &mut r)?);
    let chain = Factorisation::random_chain(&[2, 3, 2], 1.0, &mut r)?;
    let f_ind = TableObjective::random(&[3, 2, 3], &mut r)?;
    let f_chain = TableObjective::random(&[2, 3, 2], &mut r)?;
    let trials = 20_000;
    let cases: Vec<(EstimatorConfig, &Factorisation, &dyn Objective)> = vec![
        (EstimatorConfig::new(EstimatorKind::Reinforce, 4), &indep, &f_ind),
        (EstimatorConfig::new(EstimatorKind::Rloo, 4), &indep, &f_ind),
        (EstimatorConfig::new(EstimatorKind::Indecater, 1), &indep, &f_ind),
        (EstimatorConfig::new(EstimatorKind::Scater, 1), &chain, &f_chain),
        (EstimatorConfig::new(EstimatorKind::Leg, 1), &chain, &f_chain),
    ];
    let mut worst: f64 = 0.0;
    let mut failing = Vec::new();
    for (k, (cfg, fact, f)) in cases.iter().enumerate() {
        let exact = exact_gradient(fact, *f, DEFAULT_BUDGET)?.flatten();
        let m = estimators::parallel_moments(trials, exact.len(), |i| {
            let mut s = rng::stream(300 + k as u64, i);
            Ok(faulty_estimate(fault, cfg, fact, *f, &mut s)?.grad.flatten())
        })?;
        for ((mean, var), e) in m.mean.iter().zip(m.variance()).zip(&exact) {
            let se = (var / trials as f64).sqrt();
            let z = (mean - e).abs() / se.max(1e-300);
            worst = worst.max(z.min(1e6));
            if (mean - e).abs() > 5.0 * se + 1e-12 {
                failing.push(cfg.kind.name());
                break;
            }
        }
    }
    check(
        failing.is_empty(),
        if failing.is_empty() {
            format!("worst z-score {worst:.2} over {trials} trials")
        } else {
            format!("biased: {}", failing.join(", "))
        },
    )
}

fn suite_equivalences(fault: Option<Fault>) -> Result<String> {
    let mut r = rng::seeded(4);
    let table = LogitTable::random(&[3, 4, 2], 1.0, &mut r)?;
    let fact = Factorisation::independent(&table);
    let f = TableObjective::random(&[3, 4, 2], &mut r)?;
    let ind = EstimatorConfig::new(EstimatorKind::Indecater, 3);
    let mut worst_s: f64 = 0.0;
    let mut worst_l: f64 = 0.0;
    for s in 0..50 {
        let a = faulty_estimate(fault, &ind, &fact, &f, &mut rng::stream(40, s))?;
        let b = estimators::scater(&fact, &f, 3, false, &mut rng::stream(40, s))?;
        worst_s = worst_s.max(a.grad.max_abs_diff(&b.grad));
        let pivots = fact.sample_ancestral(3, &mut rng::stream(41, s))?;
        let i = estimators::indecater_with_samples(&fact, &f, std::slice::from_ref(&pivots))?;
        let l = estimators::leg_with_samples(&fact, &f, &pivots)?;
        worst_l = worst_l.max(i.grad.max_abs_diff(&l.grad));
    }
    check(
        worst_s < 1e-12 && worst_l < 1e-12,
        format!("SCateR/IndeCateR {worst_s:.1e}, LEG/IndeCateR {worst_l:.1e}"),
    )
}

fn suite_additive(fault: Option<Fault>) -> Result<String> {
    let mut r = rng::seeded(5);
    let mut worst: f64 = 0.0;
    for name in ["fig1a", "fig1b", "fig1c"] {
        let task = SynthExactTask::preset(name, &mut r)?;
        let fact = task.factorisation();
        let f = task.objective();
        let exact = exact_gradient(&fact, &f, DEFAULT_BUDGET)?;
        let cfg = EstimatorConfig::new(EstimatorKind::Indecater, 1);
        for s in 0..5 {
            let e = faulty_estimate(fault, &cfg, &fact, &f, &mut rng::stream(50, s))?;
            worst = worst.max(e.grad.max_abs_diff(&exact));
        }
    }
    check(worst < 1e-9, format!("max deviation {worst:.1e}"))
}

/// `1[argmax of every relaxed vector is category 0]`.
struct ArgmaxPattern;

impl Objective for ArgmaxPattern {
    fn eval(&self, x: &[usize]) -> f64 {
        if x.iter().all(|&v| v == 0) {
            1.0
        } else {
            0.0
        }
    }

    fn relaxed(&self) -> Option<&dyn RelaxedObjective> {
        Some(self)
    }
}

impl RelaxedObjective for ArgmaxPattern {
    fn value_and_grad(&self, y: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
        let hit = y.iter().all(|v| v.iter().skip(1).all(|&o| o < v[0]));
        (
            if hit { 1.0 } else { 0.0 },
            y.iter().map(|v| vec![0.0; v.len()]).collect(),
        )
    }
}

fn suite_gs_zero(_: Option<Fault>) -> Result<String> {
    let mut r = rng::seeded(6);
    let table = LogitTable::random(&[3, 3], 1.0, &mut r)?;
    let g = estimators::gumbel_softmax_grad(&table, &ArgmaxPattern, 64, 0.5, &mut r)?;
    let max = g.grad.flatten().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    check(max == 0.0, format!("max |gradient| {max:e}"))
}

fn suite_autodiff(_: Option<Fault>) -> Result<String> {
    let mut r = rng::seeded(7);
    let layers = nn::mlp("m", &[4, 6, 3], nn::Activation::Sigmoid);
    let mut store = nn::ParamStore::new();
    nn::init_layers(&mut store, &layers, &mut r);
    let x = Matrix::from_shape_fn((5, 4), |_| r.gen_range(-1.0..1.0));
    let t = Matrix::from_shape_fn((5, 3), |_| r.gen_range(0.0..1.0));
    let (_, mut g) = nn::forward(&store, &layers, &x)?;
    let out = g.output().expect("output set");
    let ti = g.input(t.clone());
    let l = g.squared_error(out, ti)?;
    g.backward_from(l, &Matrix::from_elem((1, 1), 1.0), &mut store)?;
    let analytic = store.flat_grads();
    let base = store.flat_values();
    let mut probe = store.clone();
    let rep = nn::finite_diff_check(
        |p| {
            probe.set_flat_values(p).expect("same size");
            let y = nn::predict(&probe, &layers, &x).expect("shapes");
            y.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
        },
        &base,
        &analytic,
        1e-4,
        1e-4,
        &mut r,
    )?;
    check(rep.passed, format!("max rel err {:.1e} over {} coordinates", rep.max_rel_err, rep.checked))
}

fn suite_costs(_: Option<Fault>) -> Result<String> {
    let mut r = rng::seeded(8);
    let cards = [3, 5, 2];
    let fact = Factorisation::independent(&LogitTable::random(&cards, 1.0, &mut r)?);
    let f = FnObjective::new(|x: &[usize]| x.iter().sum::<usize>() as f64);
    let mut bad = Vec::new();
    for kind in [
        EstimatorKind::Reinforce,
        EstimatorKind::Rloo,
        EstimatorKind::Indecater,
        EstimatorKind::Scater,
        EstimatorKind::Leg,
    ] {
        for n in [2usize, 5] {
            let e = estimate(&EstimatorConfig::new(kind, n), &fact, &f, 0, &mut r)?;
            let expected = if kind == EstimatorKind::Reinforce || kind == EstimatorKind::Rloo {
                n as u64
            } else {
                (10 * n) as u64
            };
            if e.function_evals != expected {
                bad.push(format!("{kind}-{n}: {} != {expected}", e.function_evals));
            }
        }
    }
    check(bad.is_empty(), if bad.is_empty() { "exact".into() } else { bad.join("; ") })
}

pub const SUITES: [(&str, Suite); 8] = [
    ("softmax", suite_softmax),
    ("oracle", suite_oracle),
    ("unbiasedness", suite_unbiased),
    ("equivalences", suite_equivalences),
    ("additive-exactness", suite_additive),
    ("gs-zero-gradient", suite_gs_zero),
    ("autodiff", suite_autodiff),
    ("cost-accounting", suite_costs),
];

/// Runs the oracle-equivalence and invariant suites at reduced trial counts.
pub fn selftest(fault: Option<Fault>) -> SelftestReport {
    SelftestReport {
        suites: SUITES
            .iter()
            .map(|(name, suite)| match suite(fault) {
                Ok(detail) => SuiteResult {
                    name,
                    passed: true,
                    detail,
                },
                Err(e) => SuiteResult {
                    name,
                    passed: false,
                    detail: match e {
                        Error::InvalidArgument(m) => m,
                        other => other.to_string(),
                    },
                },
            })
            .collect(),
    }
}

/// Summary rows `(arm, status, final objective, final metric, samples, evals)`
/// for display.
pub fn summary_table(report: &RunReport) -> Vec<[String; 6]> {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
    report
        .arms
        .iter()
        .map(|a: &ArmSummary| {
            let status = match a.status {
                ArmStatus::Completed => "completed",
                ArmStatus::Diverged => "diverged",
                ArmStatus::NotApplicable => "not applicable",
            };
            [
                a.name.clone(),
                status.to_string(),
                fmt(a.final_objective),
                fmt(a.final_metric),
                a.samples_drawn.to_string(),
                a.function_evals.to_string(),
            ]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip_through_toml() {
        for (name, exp) in PRESETS {
            let c = ExperimentConfig::preset(name).unwrap();
            assert_eq!(c.experiment, exp);
            c.validate().unwrap();
            let text = c.to_toml().unwrap();
            assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), c, "{name}\n{text}");
        }
        assert!(ExperimentConfig::preset("nope").is_err());
    }

    #[test]
    fn config_rejects_bad_input() {
        let ok = "version = 1\nexperiment = \"opt-synth\"\nseed = 1\niterations = 3\n[[arm]]\nestimator = \"rloo\"\nsamples = 2\n";
        ExperimentConfig::from_toml_str(ok).unwrap();
        assert!(ExperimentConfig::from_toml_str(&ok.replace("version = 1", "version = 2")).is_err());
        assert!(ExperimentConfig::from_toml_str(&ok.replace("samples = 2", "samples = 1")).is_err());
        assert!(ExperimentConfig::from_toml_str(&ok.replace("opt-synth", "bogus")).is_err());
        assert!(ExperimentConfig::from_toml_str(&format!("{ok}colour = 3\n")).is_err());
        let no_arms = "version = 1\nexperiment = \"dvae\"\nseed = 1\niterations = 3\n";
        assert!(ExperimentConfig::from_toml_str(no_arms).is_err());
    }

    #[test]
    fn estimator_specs_parse() {
        let a = ArmConfig::parse_spec("indecater-4-fresh").unwrap();
        assert_eq!((a.estimator, a.samples, a.fresh), (EstimatorKind::Indecater, 4, Some(true)));
        assert_eq!(ArmConfig::parse_spec("gs-800").unwrap().estimator, EstimatorKind::GumbelSoftmax);
        for bad in ["", "indecater", "foo-2", "rloo-x", "rloo-2-stale"] {
            assert!(ArmConfig::parse_spec(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn override_inherits_hyperparameters() {
        let mut c = ExperimentConfig::preset("fig2").unwrap();
        c.override_estimators(&[ArmConfig::parse_spec("gs-100").unwrap()]);
        assert_eq!(c.arms[0].lr, Some(0.01));
        assert!(c.arms[0].anneal.is_some());
    }

    #[test]
    fn nesy_defaults_fresh_samples_for_indecater() {
        let c = ExperimentConfig::preset("nesy-desk").unwrap();
        assert!(c.estimator_config(&c.arms[0]).fresh_per_variable);
        let o = ExperimentConfig::preset("fig2").unwrap();
        assert!(!o.estimator_config(&o.arms[0]).fresh_per_variable);
    }

    #[test]
    fn variance_probe_examples() {
        assert_eq!(gradient_variance_probe(5, |_| Ok(vec![1.0, 2.0])).unwrap(), 0.0);
        assert!(gradient_variance_probe(1, |_| Ok(vec![1.0])).is_err());
        let v = gradient_variance_probe(4, |i| Ok(vec![i as f64])).unwrap();
        assert!((v - 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn selftest_passes_and_detects_fault() {
        let clean = selftest(None);
        assert!(clean.passed(), "{:?}", clean.suites);
        let bad = selftest(Some(Fault::BiasIndecater));
        assert!(!bad.passed());
        assert!(bad.failed().contains(&"unbiasedness"), "{:?}", bad.failed());
    }
}
