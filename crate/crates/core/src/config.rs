//! Run configuration: a flat `key = value` text format with `#` comments.
//!
//! Layers are applied in order file < `DYSK_SEED` < command-line flags; every
//! key accepted in the file is also accepted as a flag.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::complexity::CandidateForm;
use crate::data::PairFamily;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, SimilarityKind};
use crate::network::ModelConfig;
use crate::params::AdamW;
use crate::sampling::BaseWindow;
use crate::training::TrainConfig;

pub const SEED_ENV: &str = "DYSK_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Train,
    Register,
    Eval,
    Gradcheck,
    AnalyzeComplexity,
    Bench,
    Synth,
}

impl Task {
    pub const ALL: [Task; 7] = [
        Task::Train,
        Task::Register,
        Task::Eval,
        Task::Gradcheck,
        Task::AnalyzeComplexity,
        Task::Bench,
        Task::Synth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Train => "train",
            Task::Register => "register",
            Task::Eval => "eval",
            Task::Gradcheck => "gradcheck",
            Task::AnalyzeComplexity => "analyze-complexity",
            Task::Bench => "bench",
            Task::Synth => "synth",
        }
    }

    fn needs_seed(self) -> bool {
        matches!(self, Task::Train | Task::Eval | Task::Synth)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub heads: usize,
    /// Window spec accepted by [`BaseWindow::from_spec`].
    pub window: String,
    pub depth: usize,
    pub sim: SimilarityKind,
    pub lambda_smooth: f64,
    pub ncc_window: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub pairs_per_step: usize,
    pub family: PairFamily,
    pub max_disp: f64,
    pub seed: Option<u64>,
    /// On-disk pairs (`<id>_a.pgm`, `<id>_b.pgm`, optional `<id>_seg_a.pgm`,
    /// `<id>_seg_b.pgm`); synthetic pairs are used when unset.
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Number of pairs for `eval` and `synth`.
    pub pairs: usize,
    pub x_a: Option<PathBuf>,
    pub x_b: Option<PathBuf>,
    /// Pixels (`y:x` list) whose attention weights `register` exports.
    pub attention_pixels: Vec<(usize, usize)>,
    pub instances: usize,
    pub kernels: Vec<usize>,
    pub bench_runs: usize,
    pub alpha: f64,
    pub labels: u32,
    pub n_values: Vec<usize>,
    pub form: CandidateForm,
    /// Worker threads for `eval`; 0 uses all cores.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        RunConfig {
            task: Task::Train,
            height: train.size.0,
            width: train.size.1,
            channels: train.model.channels,
            heads: train.model.heads,
            window: "square3".into(),
            depth: train.model.depth,
            sim: train.loss.similarity,
            lambda_smooth: train.loss.lambda_smooth,
            ncc_window: train.loss.ncc_window,
            lr: train.optimizer.lr,
            beta1: train.optimizer.betas.0,
            beta2: train.optimizer.betas.1,
            weight_decay: train.optimizer.weight_decay,
            steps: train.steps,
            pairs_per_step: train.pairs_per_step,
            family: train.family,
            max_disp: train.max_disp,
            seed: None,
            data_dir: None,
            checkpoint: None,
            output_dir: PathBuf::from("out"),
            pairs: 50,
            x_a: None,
            x_b: None,
            attention_pixels: Vec::new(),
            instances: 10,
            kernels: vec![3, 5, 7],
            bench_runs: 5,
            alpha: 1.0,
            labels: 4,
            n_values: vec![4, 8, 16, 32, 64, 128, 256],
            form: CandidateForm::ExcludeSelf,
            threads: 0,
        }
    }
}

/// Every key in emission order.
pub const KEYS: &[&str] = &[
    "task",
    "height",
    "width",
    "channels",
    "heads",
    "window",
    "depth",
    "sim",
    "lambda_smooth",
    "ncc_window",
    "lr",
    "beta1",
    "beta2",
    "weight_decay",
    "steps",
    "pairs_per_step",
    "family",
    "max_disp",
    "seed",
    "data_dir",
    "checkpoint",
    "output_dir",
    "pairs",
    "x_a",
    "x_b",
    "attention_pixels",
    "instances",
    "kernels",
    "bench_runs",
    "alpha",
    "labels",
    "n_values",
    "form",
    "threads",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("{key}: cannot parse '{value}'")))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "task" => self.task = value.parse()?,
            "height" => self.height = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "window" => {
                BaseWindow::from_spec(value)?;
                self.window = value.to_string();
            }
            "depth" => self.depth = num(key, value)?,
            "sim" => self.sim = value.parse()?,
            "lambda_smooth" => self.lambda_smooth = num(key, value)?,
            "ncc_window" => self.ncc_window = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "pairs_per_step" => self.pairs_per_step = num(key, value)?,
            "family" => self.family = value.parse()?,
            "max_disp" => self.max_disp = num(key, value)?,
            "seed" => self.seed = if value.is_empty() { None } else { Some(num(key, value)?) },
            "data_dir" => self.data_dir = opt_path(value),
            "checkpoint" => self.checkpoint = opt_path(value),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "pairs" => self.pairs = num(key, value)?,
            "x_a" => self.x_a = opt_path(value),
            "x_b" => self.x_b = opt_path(value),
            "attention_pixels" => {
                self.attention_pixels = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        let (y, x) = s
                            .split_once(':')
                            .ok_or_else(|| Error::invalid(format!("{key}: expected y:x, got '{s}'")))?;
                        Ok((num(key, y)?, num(key, x)?))
                    })
                    .collect::<Result<_>>()?;
            }
            "instances" => self.instances = num(key, value)?,
            "kernels" => self.kernels = list(key, value)?,
            "bench_runs" => self.bench_runs = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "labels" => self.labels = num(key, value)?,
            "n_values" => self.n_values = list(key, value)?,
            "form" => self.form = value.parse()?,
            "threads" => self.threads = num(key, value)?,
            other => return Err(Error::invalid(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Textual value of one key, as [`RunConfig::emit`] writes it.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "task" => self.task.to_string(),
            "height" => self.height.to_string(),
            "width" => self.width.to_string(),
            "channels" => self.channels.to_string(),
            "heads" => self.heads.to_string(),
            "window" => self.window.clone(),
            "depth" => self.depth.to_string(),
            "sim" => self.sim.to_string(),
            "lambda_smooth" => self.lambda_smooth.to_string(),
            "ncc_window" => self.ncc_window.to_string(),
            "lr" => self.lr.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "steps" => self.steps.to_string(),
            "pairs_per_step" => self.pairs_per_step.to_string(),
            "family" => self.family.to_string(),
            "max_disp" => self.max_disp.to_string(),
            "seed" => self.seed.map(|s| s.to_string()).unwrap_or_default(),
            "data_dir" => path_str(&self.data_dir),
            "checkpoint" => path_str(&self.checkpoint),
            "output_dir" => self.output_dir.display().to_string(),
            "pairs" => self.pairs.to_string(),
            "x_a" => path_str(&self.x_a),
            "x_b" => path_str(&self.x_b),
            "attention_pixels" => self
                .attention_pixels
                .iter()
                .map(|(y, x)| format!("{y}:{x}"))
                .collect::<Vec<_>>()
                .join(","),
            "instances" => self.instances.to_string(),
            "kernels" => join(&self.kernels),
            "bench_runs" => self.bench_runs.to_string(),
            "alpha" => self.alpha.to_string(),
            "labels" => self.labels.to_string(),
            "n_values" => join(&self.n_values),
            "form" => self.form.to_string(),
            "threads" => self.threads.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line {}: expected key = value, got '{raw}'", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Invalid(msg) => Error::Format(format!("config line {}: {msg}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn emit(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.get(key).expect("every key has a value"));
            out.push('\n');
        }
        out
    }

    /// Builds the effective configuration for `task`: defaults, then the
    /// optional file, then `env_seed`, then flags.
    pub fn resolve(
        task: Task,
        file: Option<&Path>,
        env_seed: Option<&str>,
        flags: &[(String, String)],
    ) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        if let Some(seed) = env_seed {
            cfg.seed = Some(num(SEED_ENV, seed.trim())?);
        }
        for (k, v) in flags {
            cfg.set(k, v)?;
        }
        cfg.task = task;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.task.needs_seed() && self.seed.is_none() {
            return Err(Error::invalid(format!(
                "{} needs a seed (config key 'seed', --seed or {SEED_ENV})",
                self.task
            )));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 || self.height < 16 || self.width < 16 {
            return Err(Error::invalid(format!(
                "image size {}x{} must be at least 16 and a multiple of 4",
                self.height, self.width
            )));
        }
        for (name, v) in [("lr", self.lr), ("max_disp", self.max_disp), ("alpha", self.alpha)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.pairs_per_step == 0 || self.bench_runs == 0 || self.instances == 0 {
            return Err(Error::invalid("pairs_per_step, bench_runs and instances must be at least 1"));
        }
        if self.kernels.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::invalid(format!("bench kernels must be odd and positive, got {:?}", self.kernels)));
        }
        self.loss().validate()?;
        self.model()?;
        Ok(())
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let m = ModelConfig {
            channels: self.channels,
            heads: self.heads,
            window: BaseWindow::from_spec(&self.window)?,
            depth: self.depth,
        };
        crate::network::RegistrationModel::new(m.clone())?;
        Ok(m)
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            similarity: self.sim,
            lambda_smooth: self.lambda_smooth,
            ncc_window: self.ncc_window,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            model: self.model()?,
            loss: self.loss(),
            optimizer: AdamW {
                lr: self.lr,
                betas: (self.beta1, self.beta2),
                weight_decay: self.weight_decay,
                ..AdamW::default()
            },
            steps: self.steps,
            pairs_per_step: self.pairs_per_step,
            size: (self.height, self.width),
            family: self.family,
            max_disp: self.max_disp,
            seed: self.seed.unwrap_or(0),
        })
    }
}
