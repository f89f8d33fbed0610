//! Flat `key = value` configuration files.
//!
//! Every field of the model, adapter, training and SVM configurations has a
//! dotted key (`model.d_model`, `train.adam.beta1`, ...). Blank lines and
//! lines starting with `#` are ignored; unknown or repeated keys are errors.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::adapters::{AdapterArch, AdapterConfig, HeadMode, Nonlinearity};
use crate::autodiff::GeluKind;
use crate::gpt2::ModelConfig;
use crate::svm::SvmConfig;
use crate::training::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value for {key}: {message}")]
    Value { line: usize, key: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    pub svm: SvmConfig,
}

fn parse_gelu(s: &str) -> Result<GeluKind, String> {
    match s.to_ascii_lowercase().as_str() {
        "tanh" => Ok(GeluKind::Tanh),
        "erf" => Ok(GeluKind::Erf),
        other => Err(format!("unknown gelu kind {other:?}; expected tanh or erf")),
    }
}

fn parse_head(s: &str) -> Result<HeadMode, String> {
    match s.to_ascii_lowercase().as_str() {
        "untied_lm_head" => Ok(HeadMode::UntiedLmHead),
        other => Err(format!("unknown head mode {other:?}; expected untied_lm_head")),
    }
}

fn parse_clip(s: &str) -> Result<Option<f32>, String> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    s.parse::<f32>().map(Some).map_err(|e| e.to_string())
}

fn num<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| e.to_string())
}

impl Settings {
    /// All recognised keys in rendering order.
    pub const KEYS: [&'static str; 25] = [
        "model.n_layers",
        "model.d_model",
        "model.n_heads",
        "model.d_ffn",
        "model.vocab_size",
        "model.max_seq_len",
        "model.gelu",
        "model.tie_lm_head",
        "adapter.architecture",
        "adapter.reduction_factor",
        "adapter.nonlinearity",
        "adapter.head_mode",
        "train.epochs",
        "train.learning_rate",
        "train.batch_size",
        "train.early_stop_patience",
        "train.adam.beta1",
        "train.adam.beta2",
        "train.adam.eps",
        "train.seed",
        "train.val_fraction",
        "train.grad_clip",
        "svm.lambda",
        "svm.epochs",
        "svm.min_df",
    ];

    fn set(&mut self, key: &str, v: &str) -> Result<bool, String> {
        match key {
            "model.n_layers" => self.model.n_layers = num(v)?,
            "model.d_model" => self.model.d_model = num(v)?,
            "model.n_heads" => self.model.n_heads = num(v)?,
            "model.d_ffn" => self.model.d_ffn = num(v)?,
            "model.vocab_size" => self.model.vocab_size = num(v)?,
            "model.max_seq_len" => self.model.max_seq_len = num(v)?,
            "model.gelu" => self.model.gelu = parse_gelu(v)?,
            "model.tie_lm_head" => self.model.tie_lm_head = num(v)?,
            "adapter.architecture" => self.adapter.architecture = v.parse::<AdapterArch>()?,
            "adapter.reduction_factor" => self.adapter.reduction_factor = num(v)?,
            "adapter.nonlinearity" => self.adapter.nonlinearity = v.parse::<Nonlinearity>()?,
            "adapter.head_mode" => self.adapter.head_mode = parse_head(v)?,
            "train.epochs" => self.train.epochs = num(v)?,
            "train.learning_rate" => self.train.learning_rate = num(v)?,
            "train.batch_size" => self.train.batch_size = num(v)?,
            "train.early_stop_patience" => self.train.early_stop_patience = num(v)?,
            "train.adam.beta1" => self.train.adam.beta1 = num(v)?,
            "train.adam.beta2" => self.train.adam.beta2 = num(v)?,
            "train.adam.eps" => self.train.adam.eps = num(v)?,
            "train.seed" => self.train.seed = num(v)?,
            "train.val_fraction" => self.train.val_fraction = num(v)?,
            "train.grad_clip" => self.train.grad_clip = parse_clip(v)?,
            "svm.lambda" => self.svm.lambda = num(v)?,
            "svm.epochs" => self.svm.epochs = num(v)?,
            "svm.min_df" => self.svm.min_df = num(v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Applies `text` on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut s = Settings::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            let known = s.set(key, value).map_err(|message| ConfigError::Value {
                line,
                key: key.to_string(),
                message,
            })?;
            if !known {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(|e| invalid(&e))?;
        self.adapter.bottleneck(self.model.d_model).map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        self.svm.validate().map_err(|e| invalid(&e))?;
        Ok(())
    }

    /// Every key with its current value; parses back to `self`.
    pub fn render(&self) -> String {
        let m = &self.model;
        let a = &self.adapter;
        let t = &self.train;
        let values: [String; 25] = [
            m.n_layers.to_string(),
            m.d_model.to_string(),
            m.n_heads.to_string(),
            m.d_ffn.to_string(),
            m.vocab_size.to_string(),
            m.max_seq_len.to_string(),
            match m.gelu {
                GeluKind::Tanh => "tanh".into(),
                GeluKind::Erf => "erf".into(),
            },
            m.tie_lm_head.to_string(),
            a.architecture.to_string().to_ascii_lowercase(),
            a.reduction_factor.to_string(),
            match a.nonlinearity {
                Nonlinearity::Gelu => "gelu".into(),
                Nonlinearity::Relu => "relu".into(),
            },
            match a.head_mode {
                HeadMode::UntiedLmHead => "untied_lm_head".into(),
            },
            t.epochs.to_string(),
            t.learning_rate.to_string(),
            t.batch_size.to_string(),
            t.early_stop_patience.to_string(),
            t.adam.beta1.to_string(),
            t.adam.beta2.to_string(),
            t.adam.eps.to_string(),
            t.seed.to_string(),
            t.val_fraction.to_string(),
            t.grad_clip.map_or("none".into(), |c| c.to_string()),
            self.svm.lambda.to_string(),
            self.svm.epochs.to_string(),
            self.svm.min_df.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in Self::KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let s = Settings::default();
        assert_eq!(Settings::parse(&s.render()).unwrap(), s);
    }

    #[test]
    fn every_key_is_addressable() {
        let mut s = Settings::default();
        for k in Settings::KEYS {
            let text = s.render();
            let v = text
                .lines()
                .find_map(|l| l.strip_prefix(&format!("{k} = ")))
                .unwrap()
                .to_string();
            assert!(s.set(k, &v).unwrap(), "{k}");
        }
    }

    #[test]
    fn overrides_apply() {
        let s = Settings::parse(
            "# tuned\ntrain.epochs = 3\nadapter.architecture = pfeiffer\ntrain.grad_clip = none\nmodel.gelu = erf\n",
        )
        .unwrap();
        assert_eq!(s.train.epochs, 3);
        assert_eq!(s.adapter.architecture, AdapterArch::Pfeiffer);
        assert_eq!(s.train.grad_clip, None);
        assert_eq!(s.model.gelu, GeluKind::Erf);
        assert_eq!(Settings::parse(&s.render()).unwrap(), s);
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert!(matches!(
            Settings::parse("train.epochs = 2\nbogus = 1\n"),
            Err(ConfigError::UnknownKey { line: 2, .. })
        ));
        assert!(matches!(Settings::parse("nonsense\n"), Err(ConfigError::Syntax { line: 1 })));
        assert!(matches!(
            Settings::parse("train.epochs = many\n"),
            Err(ConfigError::Value { line: 1, .. })
        ));
        assert!(matches!(
            Settings::parse("train.epochs = 2\ntrain.epochs = 3\n"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
        assert!(matches!(Settings::parse("train.epochs = 0\n"), Err(ConfigError::Invalid(_))));
        assert!(matches!(
            Settings::parse("adapter.reduction_factor = 7\n"),
            Err(ConfigError::Invalid(_))
        ));
    }
}
