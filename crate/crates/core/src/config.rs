//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored, as is anything after
//! a `#` preceded by whitespace. Keys are listed in [`KEYS`]; an unknown or
//! repeated key is an error. Relative paths are used as given, so they
//! resolve against the working directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::model::{ModelConfig, Variant};
use crate::optim::AdamConfig;
use crate::tokenizer::TokenizerKind;
use crate::training::{Task, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} set twice")]
    Duplicate { line: usize, key: String },
    #[error("invalid value {value:?} for {key}: {reason}")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("{0} is required")]
    Missing(&'static str),
}

/// Every accepted key, in dump order.
pub const KEYS: &[&str] = &[
    "variant",
    "embed_size",
    "num_heads",
    "head_size",
    "hidden_size",
    "ffn_size",
    "num_layers",
    "max_seq_len",
    "vocab_size",
    "lr",
    "beta1",
    "beta2",
    "epsilon",
    "clip_norm",
    "batch_size",
    "steps",
    "checkpoint_interval",
    "k",
    "retries",
    "max_new_tokens",
    "temperature",
    "task",
    "tokenizer",
    "min_words",
    "seed",
    "vocab",
    "vocab_out",
    "corpus",
    "couplet_first",
    "couplet_second",
    "checkpoint_in",
    "checkpoint_out",
    "loss_log",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VocabSize {
    /// Taken from the loaded vocabulary.
    Auto,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub embed_size: usize,
    pub num_heads: usize,
    pub head_size: usize,
    pub hidden_size: usize,
    pub ffn_size: usize,
    pub num_layers: usize,
    pub max_seq_len: usize,
    pub vocab_size: VocabSize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub checkpoint_interval: u64,
    pub k: usize,
    pub retries: usize,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub task: Task,
    pub tokenizer: TokenizerKind,
    pub min_words: usize,
    pub seed: u64,
    pub vocab: Option<PathBuf>,
    pub vocab_out: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub couplet_first: Option<PathBuf>,
    pub couplet_second: Option<PathBuf>,
    pub checkpoint_in: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let train = TrainConfig::default();
        Self {
            variant: Variant::Psdp,
            embed_size: 768,
            num_heads: 12,
            head_size: 64,
            hidden_size: 768,
            ffn_size: 3072,
            num_layers: 6,
            max_seq_len: 512,
            vocab_size: VocabSize::Auto,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            clip_norm: train.clip_norm,
            batch_size: train.batch_size,
            steps: train.steps,
            checkpoint_interval: train.checkpoint_interval,
            k: 10,
            retries: 3,
            max_new_tokens: 64,
            temperature: 1.0,
            task: Task::Lm,
            tokenizer: TokenizerKind::WordPiece,
            min_words: 10,
            seed: 0,
            vocab: None,
            vocab_out: None,
            corpus: None,
            couplet_first: None,
            couplet_second: None,
            checkpoint_in: None,
            checkpoint_out: None,
            loss_log: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn strip_comment(line: &str) -> &str {
    let trimmed = line.trim();
    if trimmed.starts_with('#') {
        return "";
    }
    let bytes = trimmed.as_bytes();
    for i in 1..bytes.len() {
        if bytes[i] == b'#' && bytes[i - 1].is_ascii_whitespace() {
            return trimmed[..i].trim_end();
        }
    }
    trimmed
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = strip_comment(raw);
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line: i + 1,
                    key: key.to_string(),
                });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate {
                    line: i + 1,
                    key: key.to_string(),
                });
            }
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse_str(&text)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let path = || Some(PathBuf::from(value));
        match key {
            "variant" => self.variant = parse(key, value)?,
            "embed_size" => self.embed_size = parse(key, value)?,
            "num_heads" => self.num_heads = parse(key, value)?,
            "head_size" => self.head_size = parse(key, value)?,
            "hidden_size" => self.hidden_size = parse(key, value)?,
            "ffn_size" => self.ffn_size = parse(key, value)?,
            "num_layers" => self.num_layers = parse(key, value)?,
            "max_seq_len" => self.max_seq_len = parse(key, value)?,
            "vocab_size" => {
                self.vocab_size = if value == "auto" {
                    VocabSize::Auto
                } else {
                    VocabSize::Fixed(parse(key, value)?)
                }
            }
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "retries" => self.retries = parse(key, value)?,
            "max_new_tokens" => self.max_new_tokens = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "task" => self.task = parse(key, value)?,
            "tokenizer" => self.tokenizer = parse(key, value)?,
            "min_words" => self.min_words = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "vocab" => self.vocab = path(),
            "vocab_out" => self.vocab_out = path(),
            "corpus" => self.corpus = path(),
            "couplet_first" => self.couplet_first = path(),
            "couplet_second" => self.couplet_second = path(),
            "checkpoint_in" => self.checkpoint_in = path(),
            "checkpoint_out" => self.checkpoint_out = path(),
            "loss_log" => self.loss_log = path(),
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: 0,
                    key: key.to_string(),
                })
            }
        }
        self.check_ranges(key, value)
    }

    fn check_ranges(&self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |reason: &str| {
            Err(ConfigError::InvalidValue {
                key: key.to_string(),
                value: value.to_string(),
                reason: reason.to_string(),
            })
        };
        match key {
            "k" if self.k == 0 => bad("must be at least 1"),
            "batch_size" if self.batch_size == 0 => bad("must be at least 1"),
            "temperature" if !(self.temperature > 0.0 && self.temperature.is_finite()) => {
                bad("must be positive")
            }
            "lr" | "epsilon" | "clip_norm"
                if !(self.lr > 0.0 && self.epsilon > 0.0 && self.clip_norm > 0.0) =>
            {
                bad("must be positive")
            }
            "beta1" | "beta2" if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) => {
                bad("must lie in [0, 1)")
            }
            _ => Ok(()),
        }
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), ConfigError> {
        for o in overrides {
            let o = o.as_ref();
            let (key, value) = o.split_once('=').ok_or(ConfigError::Syntax { line: 0 })?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line: 0,
                    key: key.to_string(),
                });
            }
            self.set(key, value.trim())?;
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> Option<String> {
        let p = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        Some(match key {
            "variant" => self.variant.to_string(),
            "embed_size" => self.embed_size.to_string(),
            "num_heads" => self.num_heads.to_string(),
            "head_size" => self.head_size.to_string(),
            "hidden_size" => self.hidden_size.to_string(),
            "ffn_size" => self.ffn_size.to_string(),
            "num_layers" => self.num_layers.to_string(),
            "max_seq_len" => self.max_seq_len.to_string(),
            "vocab_size" => match self.vocab_size {
                VocabSize::Auto => "auto".to_string(),
                VocabSize::Fixed(v) => v.to_string(),
            },
            "lr" => format!("{:?}", self.lr),
            "beta1" => format!("{:?}", self.beta1),
            "beta2" => format!("{:?}", self.beta2),
            "epsilon" => format!("{:?}", self.epsilon),
            "clip_norm" => format!("{:?}", self.clip_norm),
            "batch_size" => self.batch_size.to_string(),
            "steps" => self.steps.to_string(),
            "checkpoint_interval" => self.checkpoint_interval.to_string(),
            "k" => self.k.to_string(),
            "retries" => self.retries.to_string(),
            "max_new_tokens" => self.max_new_tokens.to_string(),
            "temperature" => format!("{:?}", self.temperature),
            "task" => self.task.to_string(),
            "tokenizer" => self.tokenizer.to_string(),
            "min_words" => self.min_words.to_string(),
            "seed" => self.seed.to_string(),
            "vocab" => return p(&self.vocab),
            "vocab_out" => return p(&self.vocab_out),
            "corpus" => return p(&self.corpus),
            "couplet_first" => return p(&self.couplet_first),
            "couplet_second" => return p(&self.couplet_second),
            "checkpoint_in" => return p(&self.checkpoint_in),
            "checkpoint_out" => return p(&self.checkpoint_out),
            "loss_log" => return p(&self.loss_log),
            _ => return None,
        })
    }

    /// Every set key in [`KEYS`] order; parses back to an equal config.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            if let Some(v) = self.value_of(key) {
                writeln!(out, "{key} = {v}").expect("writing to a String");
            }
        }
        out
    }

    /// The model shape, with `vocab_size = auto` filled from `vocab_len`.
    pub fn model_config(&self, vocab_len: Option<usize>) -> Result<ModelConfig, ConfigError> {
        let vocab_size = match (self.vocab_size, vocab_len) {
            (VocabSize::Fixed(v), _) => v,
            (VocabSize::Auto, Some(v)) => v,
            (VocabSize::Auto, None) => return Err(ConfigError::Missing("vocab_size (or a vocabulary for auto)")),
        };
        Ok(ModelConfig {
            embed_size: self.embed_size,
            num_heads: self.num_heads,
            head_size: self.head_size,
            hidden_size: self.hidden_size,
            ffn_size: self.ffn_size,
            num_layers: self.num_layers,
            max_seq_len: self.max_seq_len,
            vocab_size,
            variant: self.variant,
        })
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            clip_norm: self.clip_norm,
            batch_size: self.batch_size,
            steps: self.steps,
            checkpoint_interval: self.checkpoint_interval,
        }
    }
}
