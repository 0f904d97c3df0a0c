//! Experiment configuration: a flat `section.key = value` text format with defaults, located
//! errors and a lossless echo.
//!
//! ```text
//! # comment
//! seed = 7
//! round.total_rounds = 30
//! clients.shared_ranks = [4, 4, 8, 8, 8, 8, 16, 16]
//! ```

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::aggregation::StrategyRegistry;
use crate::federation::{OptimizerKind, Participation, RoundConfig};
use crate::privacy::{DpParams, DpScope, DEFAULT_DELTA};
use crate::tasks::Architecture;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: `{key}` set twice (first on line {first})")]
    Duplicate { line: usize, key: String, first: usize },
    #[error("line {line}: `{key}` expects {expected}, got `{value}`")]
    Type {
        line: usize,
        key: String,
        expected: &'static str,
        value: String,
    },
    #[error("`{key}`: {message}")]
    Constraint { key: &'static str, message: String },
}

impl ConfigError {
    fn constraint(key: &'static str, message: impl Into<String>) -> Self {
        ConfigError::Constraint {
            key,
            message: message.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub num_classes: usize,
    pub d_in: usize,
    /// Total samples before partitioning.
    pub n: usize,
    pub class_sep: f64,
    pub noise_std: f64,
    pub client_shift: f64,
    /// Share of each client's shard held out for evaluation.
    pub test_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub adapter_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub dirichlet_alpha: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregationSettings {
    pub strategy: String,
    pub rank_budget: usize,
    pub recompress: bool,
    /// Fixed per-client weights; `None` derives them from training-shard sizes.
    pub weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DpConfig {
    pub params: DpParams,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientRanks {
    pub shared: Vec<usize>,
    /// Defaults to the shared ranks.
    pub private: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub trace: bool,
    /// Record wall-clock time per round; off by default so metrics stay reproducible.
    pub timing: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub partition: PartitionConfig,
    pub round: RoundConfig,
    pub aggregation: AggregationSettings,
    pub dp: DpConfig,
    pub ranks: ClientRanks,
    pub output: OutputConfig,
}

/// Every recognised key, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "task.num_classes",
    "task.d_in",
    "task.n",
    "task.class_sep",
    "task.noise_std",
    "task.client_shift",
    "task.test_fraction",
    "model.arch",
    "model.hidden",
    "model.adapter_scale",
    "partition.num_clients",
    "partition.dirichlet_alpha",
    "round.total_rounds",
    "round.local_steps",
    "round.batch_size",
    "round.learning_rate",
    "round.optimizer",
    "round.participation",
    "aggregation.strategy",
    "aggregation.rank_budget",
    "aggregation.recompress",
    "aggregation.weights",
    "dp.enabled",
    "dp.clip_norm",
    "dp.noise_multiplier",
    "dp.scope",
    "dp.delta",
    "clients.shared_ranks",
    "clients.private_ranks",
    "output.dir",
    "output.trace",
    "output.timing",
];

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: TaskConfig {
                num_classes: 10,
                d_in: 16,
                n: 4000,
                class_sep: 1.0,
                noise_std: 1.0,
                client_shift: 1.0,
                test_fraction: 0.2,
            },
            model: ModelConfig {
                arch: Architecture::TwoLayer { hidden: 32 },
                adapter_scale: 1.0,
            },
            partition: PartitionConfig {
                num_clients: 8,
                dirichlet_alpha: 0.5,
            },
            round: RoundConfig::default(),
            aggregation: AggregationSettings {
                strategy: "selective_stacking".into(),
                rank_budget: 16,
                recompress: true,
                weights: None,
            },
            dp: DpConfig {
                params: DpParams {
                    clip_norm: 1.0,
                    noise_multiplier: 1.0,
                    enabled: false,
                    scope: DpScope::Shared,
                },
                delta: DEFAULT_DELTA,
            },
            ranks: ClientRanks {
                shared: vec![4, 4, 8, 8, 8, 8, 16, 16],
                private: None,
            },
            output: OutputConfig {
                dir: PathBuf::from("runs/default"),
                trace: false,
                timing: false,
            },
        }
    }
}

fn parse_scalar<T: FromStr>(key: &str, value: &str, expected: &'static str) -> Result<T, ValueError> {
    value.parse().map_err(|_| ValueError::Type { key: key.into(), expected })
}

fn parse_list<T: FromStr>(key: &str, value: &str, expected: &'static str) -> Result<Vec<T>, ValueError> {
    let inner = value.trim().trim_start_matches('[').trim_end_matches(']');
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|s| parse_scalar(key, s.trim(), expected))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ValueError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ValueError::Type {
            key: key.into(),
            expected: "true or false",
        }),
    }
}

fn format_list<T: Display>(v: &[T]) -> String {
    let items: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", items.join(", "))
}

/// Failure to apply a single value, before a line number is attached.
#[derive(Debug)]
pub enum ValueError {
    Unknown(String),
    Type { key: String, expected: &'static str },
}

impl ExperimentConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ValueError> {
        let v = value.trim();
        let v = v
            .strip_prefix('"')
            .and_then(|s| s.strip_suffix('"'))
            .unwrap_or(v);
        const UINT: &str = "a non-negative integer";
        const REAL: &str = "a number";
        match key {
            "seed" => self.seed = parse_scalar(key, v, UINT)?,
            "task.num_classes" => self.task.num_classes = parse_scalar(key, v, UINT)?,
            "task.d_in" => self.task.d_in = parse_scalar(key, v, UINT)?,
            "task.n" => self.task.n = parse_scalar(key, v, UINT)?,
            "task.class_sep" => self.task.class_sep = parse_scalar(key, v, REAL)?,
            "task.noise_std" => self.task.noise_std = parse_scalar(key, v, REAL)?,
            "task.client_shift" => self.task.client_shift = parse_scalar(key, v, REAL)?,
            "task.test_fraction" => self.task.test_fraction = parse_scalar(key, v, REAL)?,
            "model.arch" => {
                let hidden = match self.model.arch {
                    Architecture::TwoLayer { hidden } => hidden,
                    Architecture::Linear => 32,
                };
                self.model.arch = match v {
                    "linear" => Architecture::Linear,
                    "two_layer" => Architecture::TwoLayer { hidden },
                    _ => {
                        return Err(ValueError::Type {
                            key: key.into(),
                            expected: "linear or two_layer",
                        })
                    }
                }
            }
            "model.hidden" => {
                let h: usize = parse_scalar(key, v, UINT)?;
                if let Architecture::TwoLayer { hidden } = &mut self.model.arch {
                    *hidden = h;
                }
            }
            "model.adapter_scale" => self.model.adapter_scale = parse_scalar(key, v, REAL)?,
            "partition.num_clients" => self.partition.num_clients = parse_scalar(key, v, UINT)?,
            "partition.dirichlet_alpha" => self.partition.dirichlet_alpha = parse_scalar(key, v, REAL)?,
            "round.total_rounds" => self.round.total_rounds = parse_scalar(key, v, UINT)?,
            "round.local_steps" => self.round.local_steps = parse_scalar(key, v, UINT)?,
            "round.batch_size" => self.round.batch_size = parse_scalar(key, v, UINT)?,
            "round.learning_rate" => self.round.learning_rate = parse_scalar(key, v, REAL)?,
            "round.optimizer" => {
                self.round.optimizer = match v {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::adam(),
                    _ => {
                        return Err(ValueError::Type {
                            key: key.into(),
                            expected: "sgd or adam",
                        })
                    }
                }
            }
            "round.participation" => {
                let f: f64 = parse_scalar(key, v, REAL)?;
                self.round.participation = if f == 1.0 {
                    Participation::All
                } else {
                    Participation::Fraction(f)
                };
            }
            "aggregation.strategy" => self.aggregation.strategy = v.to_string(),
            "aggregation.rank_budget" => self.aggregation.rank_budget = parse_scalar(key, v, UINT)?,
            "aggregation.recompress" => self.aggregation.recompress = parse_bool(key, v)?,
            "aggregation.weights" => {
                self.aggregation.weights = if v == "auto" {
                    None
                } else {
                    Some(parse_list(key, v, "`auto` or a list of numbers")?)
                }
            }
            "dp.enabled" => self.dp.params.enabled = parse_bool(key, v)?,
            "dp.clip_norm" => self.dp.params.clip_norm = parse_scalar(key, v, REAL)?,
            "dp.noise_multiplier" => self.dp.params.noise_multiplier = parse_scalar(key, v, REAL)?,
            "dp.scope" => {
                self.dp.params.scope = match v {
                    "shared" => DpScope::Shared,
                    "full" => DpScope::Full,
                    _ => {
                        return Err(ValueError::Type {
                            key: key.into(),
                            expected: "shared or full",
                        })
                    }
                }
            }
            "dp.delta" => self.dp.delta = parse_scalar(key, v, REAL)?,
            "clients.shared_ranks" => self.ranks.shared = parse_list(key, v, "a list of integers")?,
            "clients.private_ranks" => {
                self.ranks.private = if v == "auto" {
                    None
                } else {
                    Some(parse_list(key, v, "`auto` or a list of integers")?)
                }
            }
            "output.dir" => self.output.dir = PathBuf::from(v),
            "output.trace" => self.output.trace = parse_bool(key, v)?,
            "output.timing" => self.output.timing = parse_bool(key, v)?,
            _ => return Err(ValueError::Unknown(key.to_string())),
        }
        Ok(())
    }

    /// Textual value of every key, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let hidden = match self.model.arch {
            Architecture::TwoLayer { hidden } => hidden,
            Architecture::Linear => 0,
        };
        let participation = match self.round.participation {
            Participation::All => 1.0,
            Participation::Fraction(f) => f,
        };
        let values = vec![
            self.seed.to_string(),
            self.task.num_classes.to_string(),
            self.task.d_in.to_string(),
            self.task.n.to_string(),
            self.task.class_sep.to_string(),
            self.task.noise_std.to_string(),
            self.task.client_shift.to_string(),
            self.task.test_fraction.to_string(),
            match self.model.arch {
                Architecture::Linear => "linear".into(),
                Architecture::TwoLayer { .. } => "two_layer".into(),
            },
            hidden.to_string(),
            self.model.adapter_scale.to_string(),
            self.partition.num_clients.to_string(),
            self.partition.dirichlet_alpha.to_string(),
            self.round.total_rounds.to_string(),
            self.round.local_steps.to_string(),
            self.round.batch_size.to_string(),
            self.round.learning_rate.to_string(),
            self.round.optimizer.name().into(),
            participation.to_string(),
            self.aggregation.strategy.clone(),
            self.aggregation.rank_budget.to_string(),
            self.aggregation.recompress.to_string(),
            self.aggregation
                .weights
                .as_deref()
                .map_or_else(|| "auto".into(), format_list),
            self.dp.params.enabled.to_string(),
            self.dp.params.clip_norm.to_string(),
            self.dp.params.noise_multiplier.to_string(),
            match self.dp.params.scope {
                DpScope::Shared => "shared".into(),
                DpScope::Full => "full".into(),
            },
            self.dp.delta.to_string(),
            format_list(&self.ranks.shared),
            self.ranks
                .private
                .as_deref()
                .map_or_else(|| "auto".into(), format_list),
            format!("\"{}\"", self.output.dir.display()),
            self.output.trace.to_string(),
            self.output.timing.to_string(),
        ];
        KEYS.iter().copied().zip(values).collect()
    }

    /// Every key with its value, one per line; re-parses to an identical config.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Applies file text on top of the defaults, without validating.
    pub fn parse_unvalidated(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen: Vec<(String, usize)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: content.to_string(),
            })?;
            let key = key.trim();
            if let Some((_, first)) = seen.iter().find(|(k, _)| k == key) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                    first: *first,
                });
            }
            seen.push((key.to_string(), line));
            cfg.set(key, value).map_err(|e| locate(e, line, value))?;
        }
        Ok(cfg)
    }

    /// Parses and validates config text.
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let cfg = Self::parse_unvalidated(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, applies `overrides` (`key=value`, taking precedence over the file) and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse_unvalidated(&text)?;
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides; errors report the override's 1-based position as the line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for (i, o) in overrides.iter().enumerate() {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: o.clone(),
            })?;
            self.set(k.trim(), v).map_err(|e| locate(e, i + 1, v))?;
        }
        Ok(())
    }

    /// Private rank of each client.
    pub fn private_ranks(&self) -> Vec<usize> {
        self.ranks
            .private
            .clone()
            .unwrap_or_else(|| self.ranks.shared.clone())
    }

    /// Changes the client count, stretching the rank lists so their profile is kept:
    /// client `k` of `K` takes entry `⌊k · len / K⌋`.
    pub fn with_num_clients(mut self, k: usize) -> Self {
        fn stretch(v: &[usize], k: usize) -> Vec<usize> {
            if v.is_empty() {
                return Vec::new();
            }
            (0..k).map(|i| v[i * v.len() / k]).collect()
        }
        self.ranks.shared = stretch(&self.ranks.shared, k);
        self.ranks.private = self.ranks.private.as_deref().map(|p| stretch(p, k));
        if let Some(w) = &self.aggregation.weights {
            if w.len() != k {
                self.aggregation.weights = None;
            }
        }
        self.partition.num_clients = k;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn c(key: &'static str, message: impl Into<String>) -> ConfigError {
            ConfigError::constraint(key, message)
        }
        let k = self.partition.num_clients;
        if k == 0 {
            return Err(c("partition.num_clients", "must be at least 1"));
        }
        if !(self.partition.dirichlet_alpha > 0.0) || !self.partition.dirichlet_alpha.is_finite() {
            return Err(c("partition.dirichlet_alpha", "must be a positive finite number"));
        }
        if self.task.num_classes < 2 {
            return Err(c("task.num_classes", "must be at least 2"));
        }
        if self.task.d_in == 0 {
            return Err(c("task.d_in", "must be at least 1"));
        }
        if self.task.n < k {
            return Err(c("task.n", format!("{} samples cannot cover {} clients", self.task.n, k)));
        }
        for (key, v) in [
            ("task.class_sep", self.task.class_sep),
            ("task.noise_std", self.task.noise_std),
            ("task.client_shift", self.task.client_shift),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(c(key, "must be a non-negative finite number"));
            }
        }
        if !(0.0..1.0).contains(&self.task.test_fraction) {
            return Err(c("task.test_fraction", "must lie in [0, 1)"));
        }
        if let Architecture::TwoLayer { hidden: 0 } = self.model.arch {
            return Err(c("model.hidden", "must be at least 1"));
        }
        if !self.model.adapter_scale.is_finite() {
            return Err(c("model.adapter_scale", "must be finite"));
        }
        if self.round.batch_size == 0 {
            return Err(c("round.batch_size", "must be at least 1"));
        }
        if !(self.round.learning_rate >= 0.0) || !self.round.learning_rate.is_finite() {
            return Err(c("round.learning_rate", "must be a non-negative finite number"));
        }
        if let Participation::Fraction(f) = self.round.participation {
            if !(f > 0.0 && f <= 1.0) {
                return Err(c("round.participation", "must lie in (0, 1]"));
            }
        }
        if self.ranks.shared.len() != k {
            return Err(c(
                "clients.shared_ranks",
                format!("has {} entries for {} clients", self.ranks.shared.len(), k),
            ));
        }
        if self.ranks.shared.contains(&0) {
            return Err(c("clients.shared_ranks", "every rank must be at least 1"));
        }
        if let Some(p) = &self.ranks.private {
            if p.len() != k {
                return Err(c(
                    "clients.private_ranks",
                    format!("has {} entries for {} clients", p.len(), k),
                ));
            }
            if p.contains(&0) {
                return Err(c("clients.private_ranks", "every rank must be at least 1"));
            }
        }
        if self.aggregation.rank_budget == 0 {
            return Err(c("aggregation.rank_budget", "must be at least 1"));
        }
        let registry = StrategyRegistry::with_builtin();
        let strategy = registry.build(&self.aggregation.strategy).map_err(|_| {
            c(
                "aggregation.strategy",
                format!(
                    "unknown strategy `{}` (known: {})",
                    self.aggregation.strategy,
                    registry.names().collect::<Vec<_>>().join(", ")
                ),
            )
        })?;
        let uploaded: Vec<usize> = match strategy.payload_scope() {
            crate::aggregation::PayloadScope::SharedOnly => self.ranks.shared.clone(),
            crate::aggregation::PayloadScope::FullAdapter => self
                .ranks
                .shared
                .iter()
                .zip(self.private_ranks())
                .map(|(s, p)| s + p)
                .collect(),
        };
        strategy
            .check_ranks(&uploaded)
            .map_err(|e| c("clients.shared_ranks", e.to_string()))?;
        if let Some(w) = &self.aggregation.weights {
            crate::aggregation::validate_weights(w, k)
                .map_err(|e| c("aggregation.weights", e.to_string()))?;
        }
        if self.dp.params.enabled {
            self.dp
                .params
                .validate()
                .map_err(|e| c("dp.noise_multiplier", e.to_string()))?;
        }
        if !(self.dp.delta > 0.0 && self.dp.delta < 1.0) {
            return Err(c("dp.delta", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

fn locate(e: ValueError, line: usize, value: &str) -> ConfigError {
    match e {
        ValueError::Unknown(key) => ConfigError::UnknownKey { line, key },
        ValueError::Type { key, expected } => ConfigError::Type {
            line,
            key,
            expected,
            value: value.trim().to_string(),
        },
    }
}
