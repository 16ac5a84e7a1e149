//! Flat `key = value` run configuration.
//!
//! Values are resolved with the precedence command line > `DIALOGLAB_SEED`
//! (seed only) > configuration file > built-in default.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use dialoglab::corpus::LoadOptions;
use dialoglab::metrics::ScorerConfig;
use dialoglab::models::{Architecture, ModelConfig};
use dialoglab::training::TrainConfig;
use dialoglab::{Error, Result};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "DIALOGLAB_SEED";

/// Every accepted configuration key.
pub const KEYS: [&str; 39] = [
    "arch",
    "word_attention",
    "hidden",
    "embed",
    "utterance_layers",
    "bidirectional",
    "context_layers",
    "decoder_layers",
    "heads",
    "d_model",
    "transformer_layers",
    "dropout",
    "latent_dim",
    "max_decode_len",
    "lr",
    "lr_decay",
    "patience",
    "clip_norm",
    "weight_decay",
    "epochs",
    "seed",
    "batch_size",
    "kl_anneal_steps",
    "early_stop_patience",
    "valid_fraction",
    "target_accuracy",
    "train_corpus",
    "valid_corpus",
    "test_corpus",
    "embeddings",
    "embedding_dim",
    "vocab_size",
    "min_freq",
    "max_turns",
    "max_len",
    "lowercase",
    "out",
    "scorer_epochs",
    "scorer_hidden",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub arch: Architecture,
    /// `None` follows the architecture's default.
    pub word_attention: Option<bool>,
    /// Structural sizes; `vocab_size` and `word_attention` are filled in by
    /// [`RunConfig::model_config`].
    pub model: ModelConfig,
    /// `None` keeps the self-attention width equal to `hidden`.
    pub d_model: Option<usize>,
    pub train: TrainConfig,
    pub train_corpus: Option<PathBuf>,
    pub valid_corpus: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    /// Word-vector file; a seeded random table is used when absent.
    pub embeddings: Option<PathBuf>,
    pub embedding_dim: usize,
    pub vocab_size: usize,
    pub min_freq: usize,
    pub max_turns: Option<usize>,
    pub max_len: Option<usize>,
    pub lowercase: bool,
    pub out: PathBuf,
    pub scorer_epochs: usize,
    pub scorer_hidden: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scorer = ScorerConfig::default();
        RunConfig {
            arch: Architecture::HredWa,
            word_attention: None,
            model: ModelConfig::new(Architecture::HredWa, 0),
            d_model: None,
            train: TrainConfig::default(),
            train_corpus: None,
            valid_corpus: None,
            test_corpus: None,
            embeddings: None,
            embedding_dim: 64,
            vocab_size: 20_000,
            min_freq: 1,
            max_turns: None,
            max_len: None,
            lowercase: true,
            out: PathBuf::from("runs"),
            scorer_epochs: scorer.epochs,
            scorer_hidden: scorer.hidden,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("invalid value {value:?} for key `{key}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for key `{key}`: expected true or false"))),
    }
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match value.trim() {
        "" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

/// Splits `key=value`; surrounding whitespace is ignored.
pub fn split_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, got {s:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Parses configuration text: one `key = value` per line, `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = split_assignment(line).map_err(|_| Error::Parse {
            line: no + 1,
            message: format!("expected key = value, got {line:?}"),
        })?;
        out.push((k, v));
    }
    Ok(out)
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "arch" => self.arch = value.parse()?,
            "word_attention" => self.word_attention = Some(parse_bool(key, value)?),
            "hidden" => m.hidden = parse(key, value)?,
            "embed" => m.embed = parse(key, value)?,
            "utterance_layers" => m.utterance_layers = parse(key, value)?,
            "bidirectional" => m.bidirectional = parse_bool(key, value)?,
            "context_layers" => m.context_layers = parse(key, value)?,
            "decoder_layers" => m.decoder_layers = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "d_model" => self.d_model = Some(parse(key, value)?),
            "transformer_layers" => m.transformer_layers = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "latent_dim" => m.latent_dim = parse(key, value)?,
            "max_decode_len" => m.max_decode_len = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "lr_decay" => t.lr_decay = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "clip_norm" => t.clip_norm = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "kl_anneal_steps" => t.kl_anneal_steps = parse(key, value)?,
            "early_stop_patience" => t.early_stop_patience = parse(key, value)?,
            "valid_fraction" => t.valid_fraction = parse(key, value)?,
            "target_accuracy" => t.target_accuracy = parse_optional(key, value)?,
            "train_corpus" => self.train_corpus = parse_optional(key, value)?,
            "valid_corpus" => self.valid_corpus = parse_optional(key, value)?,
            "test_corpus" => self.test_corpus = parse_optional(key, value)?,
            "embeddings" => self.embeddings = parse_optional(key, value)?,
            "embedding_dim" => self.embedding_dim = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "min_freq" => self.min_freq = parse(key, value)?,
            "max_turns" => self.max_turns = parse_optional(key, value)?,
            "max_len" => self.max_len = parse_optional(key, value)?,
            "lowercase" => self.lowercase = parse_bool(key, value)?,
            "out" => self.out = parse(key, value)?,
            "scorer_epochs" => self.scorer_epochs = parse(key, value)?,
            "scorer_hidden" => self.scorer_hidden = parse(key, value)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown configuration key `{key}`; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Defaults, then the file, then the seed variable, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, env_seed: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (k, v) in parse_config_text(&text)? {
                cfg.set(&k, &v)?;
            }
        }
        if let Some(seed) = env_seed {
            cfg.set("seed", seed)
                .map_err(|e| Error::Config(format!("{SEED_ENV}: {e}")))?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// The model configuration for a vocabulary of `vocab_size`.
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        m.architecture = self.arch;
        m.word_attention = self.word_attention.unwrap_or(self.arch.has_word_attention());
        m.vocab_size = vocab_size;
        m.d_model = self.d_model.unwrap_or(m.hidden);
        m.validate()?;
        Ok(m)
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            lowercase: self.lowercase,
            max_turns: self.max_turns,
            max_len: self.max_len,
        }
    }

    pub fn scorer_config(&self) -> ScorerConfig {
        ScorerConfig {
            epochs: self.scorer_epochs,
            hidden: self.scorer_hidden,
            seed: self.train.seed,
            ..ScorerConfig::default()
        }
    }

    /// The configured path for `key`, which must be set and exist.
    pub fn existing_path(&self, key: &str) -> Result<&Path> {
        let p = match key {
            "train_corpus" => &self.train_corpus,
            "valid_corpus" => &self.valid_corpus,
            "test_corpus" => &self.test_corpus,
            "embeddings" => &self.embeddings,
            _ => return Err(Error::Config(format!("`{key}` is not a path key"))),
        };
        let p = p
            .as_deref()
            .ok_or_else(|| Error::Config(format!("`{key}` is required for this command")))?;
        if !p.exists() {
            return Err(Error::Config(format!("`{key}` points to a missing file: {}", p.display())));
        }
        Ok(p)
    }

    /// Checks that every configured input path exists.
    pub fn check_paths(&self) -> Result<()> {
        for key in ["train_corpus", "valid_corpus", "test_corpus", "embeddings"] {
            let set = match key {
                "train_corpus" => self.train_corpus.is_some(),
                "valid_corpus" => self.valid_corpus.is_some(),
                "test_corpus" => self.test_corpus.is_some(),
                _ => self.embeddings.is_some(),
            };
            if set {
                self.existing_path(key)?;
            }
        }
        Ok(())
    }
}
