//! Flat `key = value` run configuration: file + override parsing, strict
//! unknown-key rejection, and a content digest for reproduction checks.

use crate::data::{MaskSpec, MaskStrategy};
use crate::model::ModelConfig;
use crate::select::{SelectionConfig, SelectionMethod};
use crate::train::TrainConfig;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    BadLine { line: usize, text: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: cannot parse `{value}` as {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("override list must be `--key value` pairs, got `{0}`")]
    BadOverride(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How restored values are produced: the three model-based selections plus
/// two naive baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RestoreMethod {
    Model(SelectionMethod),
    LinearInterp,
    CopyPrevDay,
}

impl RestoreMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            RestoreMethod::Model(SelectionMethod::Top1) => "top1",
            RestoreMethod::Model(SelectionMethod::DirectTop2) => "direct_top2",
            RestoreMethod::Model(SelectionMethod::IterativeTop2) => "iterative_top2",
            RestoreMethod::LinearInterp => "linear_interp",
            RestoreMethod::CopyPrevDay => "copy_prev_day",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    // synthesis
    pub n_users: usize,
    pub n_days: usize,
    pub users_per_aggregate: usize,
    pub n_aggregates: usize,
    // windowing and masking
    pub window_len: usize,
    pub margin: usize,
    pub mask_strategy: MaskStrategy,
    pub mask_segment_len: usize,
    pub mask_count: usize,
    pub split_ratio: f64,
    // model
    pub classes: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    // training
    pub learning_rate: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub eval_every: usize,
    pub clip_norm: f64,
    // selection
    pub e: f64,
    pub method: RestoreMethod,
    // paths
    pub dataset: String,
    pub checkpoint: String,
    pub history: String,
    pub restoration: String,
    pub report: String,
    pub plot: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let sel = SelectionConfig::default();
        Self {
            seed: 0,
            n_users: 1000,
            n_days: 60,
            users_per_aggregate: 1000,
            n_aggregates: 1,
            window_len: 96,
            margin: 96,
            mask_strategy: MaskStrategy::Central,
            mask_segment_len: 16,
            mask_count: 1,
            split_ratio: 0.8,
            classes: model.classes,
            hidden: model.hidden,
            heads: model.heads,
            layers: model.layers,
            ffn_mult: model.ffn_mult,
            dropout: model.dropout,
            learning_rate: train.learning_rate,
            lambda: train.lambda,
            batch_size: train.batch_size,
            epochs: train.epochs,
            eval_every: train.eval_every,
            clip_norm: train.clip_norm,
            e: sel.e,
            method: RestoreMethod::Model(sel.method),
            dataset: "dataset.csv".into(),
            checkpoint: "model.bpin".into(),
            history: "history.csv".into(),
            restoration: "restoration.csv".into(),
            report: "report.json".into(),
            plot: "plot.csv".into(),
        }
    }
}

fn parse<T: std::str::FromStr>(
    key: &str,
    value: &str,
    expected: &'static str,
) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.trim().to_string(),
        expected,
    })
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v, "u64")?,
            "synth.n_users" => self.n_users = parse(key, v, "usize")?,
            "synth.n_days" => self.n_days = parse(key, v, "usize")?,
            "synth.users_per_aggregate" => self.users_per_aggregate = parse(key, v, "usize")?,
            "synth.n_aggregates" => self.n_aggregates = parse(key, v, "usize")?,
            "window_len" => self.window_len = parse(key, v, "usize")?,
            "margin" => self.margin = parse(key, v, "usize")?,
            "mask.strategy" => {
                self.mask_strategy = match v {
                    "central" => MaskStrategy::Central,
                    "peak" => MaskStrategy::Peak,
                    "multi_peak" => MaskStrategy::MultiPeak,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.to_string(),
                            value: v.to_string(),
                            expected: "central | peak | multi_peak",
                        })
                    }
                }
            }
            "mask.segment_len" => self.mask_segment_len = parse(key, v, "usize")?,
            "mask.count" => self.mask_count = parse(key, v, "usize")?,
            "split_ratio" => self.split_ratio = parse(key, v, "f64")?,
            "model.classes" => self.classes = parse(key, v, "usize")?,
            "model.hidden" => self.hidden = parse(key, v, "usize")?,
            "model.heads" => self.heads = parse(key, v, "usize")?,
            "model.layers" => self.layers = parse(key, v, "usize")?,
            "model.ffn_mult" => self.ffn_mult = parse(key, v, "usize")?,
            "model.dropout" => self.dropout = parse(key, v, "f64")?,
            "train.learning_rate" => self.learning_rate = parse(key, v, "f64")?,
            "train.lambda" => self.lambda = parse(key, v, "f64")?,
            "train.batch_size" => self.batch_size = parse(key, v, "usize")?,
            "train.epochs" => self.epochs = parse(key, v, "usize")?,
            "train.eval_every" => self.eval_every = parse(key, v, "usize")?,
            "train.clip_norm" => self.clip_norm = parse(key, v, "f64")?,
            "select.e" => self.e = parse(key, v, "f64")?,
            "select.method" => {
                self.method = match v {
                    "top1" => RestoreMethod::Model(SelectionMethod::Top1),
                    "direct_top2" => RestoreMethod::Model(SelectionMethod::DirectTop2),
                    "iterative_top2" => RestoreMethod::Model(SelectionMethod::IterativeTop2),
                    "linear_interp" => RestoreMethod::LinearInterp,
                    "copy_prev_day" => RestoreMethod::CopyPrevDay,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.to_string(),
                            value: v.to_string(),
                            expected:
                                "top1 | direct_top2 | iterative_top2 | linear_interp | copy_prev_day",
                        })
                    }
                }
            }
            "path.dataset" => self.dataset = v.to_string(),
            "path.checkpoint" => self.checkpoint = v.to_string(),
            "path.history" => self.history = v.to_string(),
            "path.restoration" => self.restoration = v.to_string(),
            "path.report" => self.report = v.to_string(),
            "path.plot" => self.plot = v.to_string(),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment, blank lines allowed.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Applies `--key value` pairs; overrides win over file values.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<(), ConfigError> {
        let mut it = args.iter();
        while let Some(flag) = it.next() {
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| ConfigError::BadOverride(flag.clone()))?;
            let value = it
                .next()
                .ok_or_else(|| ConfigError::BadOverride(flag.clone()))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn load(path: Option<&std::path::Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            cfg.apply_text(&std::fs::read_to_string(p)?)?;
        }
        cfg.apply_overrides(overrides)?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            classes: self.classes,
            hidden: self.hidden,
            heads: self.heads,
            layers: self.layers,
            ffn_mult: self.ffn_mult,
            dropout: self.dropout,
            window_len: self.window_len,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            lambda: self.lambda,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            eval_every: self.eval_every,
            clip_norm: self.clip_norm,
            ..TrainConfig::default()
        }
    }

    pub fn mask_spec(&self) -> MaskSpec {
        MaskSpec {
            strategy: self.mask_strategy.clone(),
            segment_len: self.mask_segment_len,
            count: self.mask_count,
            seed: self.seed,
        }
    }

    pub fn selection_config(&self) -> SelectionConfig {
        SelectionConfig {
            e: self.e,
            method: match self.method {
                RestoreMethod::Model(m) => m,
                _ => SelectionMethod::Top1,
            },
        }
    }

    /// Canonical sorted `key = value` rendering of the resolved config.
    pub fn resolved(&self) -> String {
        let strategy = match self.mask_strategy {
            MaskStrategy::Central => "central",
            MaskStrategy::Peak => "peak",
            MaskStrategy::MultiPeak => "multi_peak",
            MaskStrategy::Explicit(_) => "explicit",
        };
        let mut lines = vec![
            format!("mask.count = {}", self.mask_count),
            format!("mask.segment_len = {}", self.mask_segment_len),
            format!("mask.strategy = {strategy}"),
            format!("margin = {}", self.margin),
            format!("model.classes = {}", self.classes),
            format!("model.dropout = {}", self.dropout),
            format!("model.ffn_mult = {}", self.ffn_mult),
            format!("model.heads = {}", self.heads),
            format!("model.hidden = {}", self.hidden),
            format!("model.layers = {}", self.layers),
            format!("path.checkpoint = {}", self.checkpoint),
            format!("path.dataset = {}", self.dataset),
            format!("path.history = {}", self.history),
            format!("path.plot = {}", self.plot),
            format!("path.report = {}", self.report),
            format!("path.restoration = {}", self.restoration),
            format!("seed = {}", self.seed),
            format!("select.e = {}", self.e),
            format!("select.method = {}", self.method.as_str()),
            format!("split_ratio = {}", self.split_ratio),
            format!("synth.n_aggregates = {}", self.n_aggregates),
            format!("synth.n_days = {}", self.n_days),
            format!("synth.n_users = {}", self.n_users),
            format!("synth.users_per_aggregate = {}", self.users_per_aggregate),
            format!("train.batch_size = {}", self.batch_size),
            format!("train.clip_norm = {}", self.clip_norm),
            format!("train.epochs = {}", self.epochs),
            format!("train.eval_every = {}", self.eval_every),
            format!("train.lambda = {}", self.lambda),
            format!("train.learning_rate = {}", self.learning_rate),
            format!("window_len = {}", self.window_len),
        ];
        lines.sort();
        lines.join("\n") + "\n"
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.resolved().as_bytes());
        format!("{:x}", h.finalize())
    }
}
