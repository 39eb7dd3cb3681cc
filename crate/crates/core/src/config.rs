//! `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored and
//! unknown keys are rejected. Later assignments win, so applying a file and
//! then command-line overrides gives the usual precedence.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::HattScale;
use crate::decode::DecodeOptions;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::recurrent::WordAttentionNorm;
use crate::train::TrainConfig;
use crate::transformer::AnswerFeatureMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    Squad,
    Marco,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub dataset: Dataset,
    pub min_freq: usize,
    pub split_ratio: f64,
    pub embeddings: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: Dataset::Squad,
            min_freq: 2,
            split_ratio: 0.9,
            embeddings: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeOptions,
    pub data: DataConfig,
}

/// Every accepted key, in the order [`Config::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "arch",
    "seed",
    "vocab_size",
    "emb_dim",
    "bio_dim",
    "flag_dim",
    "lstm_hidden",
    "dec_hidden",
    "attn_dim",
    "d_model",
    "heads",
    "ffn_dim",
    "enc_layers",
    "para_layers",
    "dec_layers",
    "hatt_scale",
    "word_attention",
    "answer_feature",
    "max_sentences",
    "max_sentence_tokens",
    "max_question_tokens",
    "epochs",
    "batch_size",
    "lr",
    "clip",
    "patience",
    "eval_beam",
    "eval_max_len",
    "beam",
    "max_len",
    "alpha",
    "dataset",
    "min_freq",
    "split_ratio",
    "embeddings",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn choice<T: Copy>(key: &str, value: &str, options: &[(&str, T)]) -> Result<T> {
    options
        .iter()
        .find(|(name, _)| name.eq_ignore_ascii_case(value))
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("`{key}`: expected one of {}, got `{value}`", names.join(", ")))
        })
}

const SCALES: &[(&str, HattScale)] = &[("sqrt_d", HattScale::SqrtD), ("d", HattScale::D)];
const NORMS: &[(&str, WordAttentionNorm)] = &[
    ("global", WordAttentionNorm::Global),
    ("per_sentence", WordAttentionNorm::PerSentence),
];
const FEATURES: &[(&str, AnswerFeatureMode)] = &[("concat", AnswerFeatureMode::Concat), ("add", AnswerFeatureMode::Add)];
const DATASETS: &[(&str, Dataset)] = &[("squad", Dataset::Squad), ("marco", Dataset::Marco)];

fn name_of<T: PartialEq + Copy>(options: &[(&'static str, T)], v: T) -> &'static str {
    options.iter().find(|(_, x)| *x == v).map(|(n, _)| *n).expect("every variant is named")
}

impl Config {
    /// Applies one assignment. `seed` seeds the model, the data split and
    /// the training order together.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "arch" => m.arch = value.parse()?,
            "seed" => {
                let s: u64 = num(key, value)?;
                m.seed = s;
                t.seed = s;
            }
            "vocab_size" => m.vocab_size = num(key, value)?,
            "emb_dim" => m.emb_dim = num(key, value)?,
            "bio_dim" => m.bio_dim = num(key, value)?,
            "flag_dim" => m.flag_dim = num(key, value)?,
            "lstm_hidden" => m.lstm_hidden = num(key, value)?,
            "dec_hidden" => m.dec_hidden = num(key, value)?,
            "attn_dim" => m.attn_dim = num(key, value)?,
            "d_model" => m.d_model = num(key, value)?,
            "heads" => m.heads = num(key, value)?,
            "ffn_dim" => m.ffn_dim = num(key, value)?,
            "enc_layers" => m.enc_layers = num(key, value)?,
            "para_layers" => m.para_layers = num(key, value)?,
            "dec_layers" => m.dec_layers = num(key, value)?,
            "hatt_scale" => m.hatt_scale = choice(key, value, SCALES)?,
            "word_attention" => m.word_attention = choice(key, value, NORMS)?,
            "answer_feature" => m.answer_feature = choice(key, value, FEATURES)?,
            "max_sentences" => m.limits.max_sentences = num(key, value)?,
            "max_sentence_tokens" => m.limits.max_sentence_tokens = num(key, value)?,
            "max_question_tokens" => m.limits.max_question_tokens = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "lr" => t.lr = num(key, value)?,
            "clip" => t.clip = num(key, value)?,
            "patience" => t.patience = num(key, value)?,
            "eval_beam" => t.eval_beam = num(key, value)?,
            "eval_max_len" => t.eval_max_len = num(key, value)?,
            "beam" => self.decode.beam = num(key, value)?,
            "max_len" => self.decode.max_len = num(key, value)?,
            "alpha" => self.decode.alpha = num(key, value)?,
            "dataset" => self.data.dataset = choice(key, value, DATASETS)?,
            "min_freq" => self.data.min_freq = num(key, value)?,
            "split_ratio" => self.data.split_ratio = num(key, value)?,
            "embeddings" => {
                self.data.embeddings = if value.is_empty() || value == "none" {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` (or `key = value`).
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{pair}`")))?;
        self.set(k.trim(), v)
    }

    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let loc = Some(format!("line {}", n + 1));
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, loc.clone(), "expected `key = value`"))?;
            self.set(k.trim(), v).map_err(|e| Error::parse(origin, loc, e.to_string()))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.eval_beam == 0 || t.eval_max_len == 0 {
            return Err(Error::Config("batch_size, eval_beam and eval_max_len must be positive".into()));
        }
        if !(t.lr > 0.0) || !(t.clip > 0.0) {
            return Err(Error::Config("lr and clip must be positive".into()));
        }
        if self.decode.beam == 0 || self.decode.max_len == 0 {
            return Err(Error::Config("beam and max_len must be positive".into()));
        }
        if !(self.decode.alpha >= 0.0) {
            return Err(Error::Config("alpha must be non-negative".into()));
        }
        if !(self.data.split_ratio > 0.0 && self.data.split_ratio < 1.0) {
            return Err(Error::Config("split_ratio must lie in (0, 1)".into()));
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        let m = &self.model;
        let t = &self.train;
        match key {
            "arch" => m.arch.name().to_string(),
            "seed" => m.seed.to_string(),
            "vocab_size" => m.vocab_size.to_string(),
            "emb_dim" => m.emb_dim.to_string(),
            "bio_dim" => m.bio_dim.to_string(),
            "flag_dim" => m.flag_dim.to_string(),
            "lstm_hidden" => m.lstm_hidden.to_string(),
            "dec_hidden" => m.dec_hidden.to_string(),
            "attn_dim" => m.attn_dim.to_string(),
            "d_model" => m.d_model.to_string(),
            "heads" => m.heads.to_string(),
            "ffn_dim" => m.ffn_dim.to_string(),
            "enc_layers" => m.enc_layers.to_string(),
            "para_layers" => m.para_layers.to_string(),
            "dec_layers" => m.dec_layers.to_string(),
            "hatt_scale" => name_of(SCALES, m.hatt_scale).to_string(),
            "word_attention" => name_of(NORMS, m.word_attention).to_string(),
            "answer_feature" => name_of(FEATURES, m.answer_feature).to_string(),
            "max_sentences" => m.limits.max_sentences.to_string(),
            "max_sentence_tokens" => m.limits.max_sentence_tokens.to_string(),
            "max_question_tokens" => m.limits.max_question_tokens.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr" => t.lr.to_string(),
            "clip" => t.clip.to_string(),
            "patience" => t.patience.to_string(),
            "eval_beam" => t.eval_beam.to_string(),
            "eval_max_len" => t.eval_max_len.to_string(),
            "beam" => self.decode.beam.to_string(),
            "max_len" => self.decode.max_len.to_string(),
            "alpha" => self.decode.alpha.to_string(),
            "dataset" => name_of(DATASETS, self.data.dataset).to_string(),
            "min_freq" => self.data.min_freq.to_string(),
            "split_ratio" => self.data.split_ratio.to_string(),
            "embeddings" => self
                .data
                .embeddings
                .as_ref()
                .map_or_else(|| "none".to_string(), |p| p.display().to_string()),
            _ => unreachable!("KEYS lists every key"),
        }
    }

    /// Every resolved setting in `key = value` form; parsing it back yields
    /// the same configuration.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_of(key));
        }
        out
    }

    /// SHA-256 of [`Config::to_text`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}
