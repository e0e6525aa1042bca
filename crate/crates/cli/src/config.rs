//! Flat key-value settings shared by every subcommand.
//!
//! Every key has a default; a TOML file overrides the defaults and
//! `--set key=value` flags override the file.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use holdshift_core::frontend::{FrontendConfig, InputMode};
use holdshift_core::labels::{LabelConfig, WeightKind, WeightScheme};
use holdshift_core::model::{AttentionConfig, ModelConfig};
use holdshift_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub seed: u64,

    pub lr_init: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub val_fraction: f64,
    /// Positive-class loss weight; 0 disables weighting.
    pub pos_weight: f64,

    pub model_dim: usize,
    pub heads: usize,
    pub fusion_layers: usize,
    pub transformer_layers: usize,
    pub ffn_hidden: usize,
    pub dropout_rate: f64,
    pub threshold: f64,

    pub input: InputMode,
    pub linguistic_dim: usize,
    pub acoustic_dim: usize,
    pub linguistic_seed: u64,
    pub acoustic_seed: u64,

    pub min_speech_s: f64,
    pub long_silence_s: f64,
    pub context_s: f64,
    pub horizon_s: f64,
    pub exp_half_life_s: f64,
}

impl Default for Settings {
    fn default() -> Self {
        let t = TrainConfig::default();
        let m = AttentionConfig::default();
        let f = FrontendConfig::default();
        let l = LabelConfig::default();
        Self {
            seed: t.seed,
            lr_init: t.lr_init,
            lr_min: t.lr_min,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            val_fraction: t.val_fraction,
            pos_weight: 0.0,
            model_dim: m.model_dim,
            heads: m.heads,
            fusion_layers: m.fusion_layers,
            transformer_layers: m.transformer_layers,
            ffn_hidden: m.ffn_hidden,
            dropout_rate: m.dropout_rate,
            threshold: holdshift_core::model::DEFAULT_THRESHOLD,
            input: f.input,
            linguistic_dim: f.linguistic_dim,
            acoustic_dim: f.acoustic_dim,
            linguistic_seed: f.linguistic_seed,
            acoustic_seed: f.acoustic_seed,
            min_speech_s: l.min_speech_s,
            long_silence_s: l.long_silence_s,
            context_s: l.context_s,
            horizon_s: WeightScheme::DEFAULT_HORIZON_S,
            exp_half_life_s: WeightScheme::DEFAULT_HALF_LIFE_S,
        }
    }
}

impl Settings {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| anyhow!("override {o:?} is not key=value"))?;
            let value = format!("v = {v}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(v.to_string()));
            table.insert(k.trim().to_string(), value);
        }
        let s: Settings = toml::Value::Table(table).try_into().context("invalid settings")?;
        s.model_config().validate().map_err(|e| anyhow!("{e}"))?;
        s.train_config().validate().map_err(|e| anyhow!("{e}"))?;
        if !(s.threshold > 0.0 && s.threshold < 1.0) {
            bail!("threshold must be in (0, 1)");
        }
        Ok(s)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr_init: self.lr_init,
            lr_min: self.lr_min,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            seed: self.seed,
            val_fraction: self.val_fraction,
            pos_weight: (self.pos_weight > 0.0).then_some(self.pos_weight),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            linguistic_dim: self.linguistic_dim,
            acoustic_dim: self.acoustic_dim,
            attention: AttentionConfig {
                model_dim: self.model_dim,
                heads: self.heads,
                fusion_layers: self.fusion_layers,
                transformer_layers: self.transformer_layers,
                ffn_hidden: self.ffn_hidden,
                dropout_rate: self.dropout_rate,
            },
        }
    }

    pub fn frontend_config(&self) -> FrontendConfig {
        FrontendConfig {
            input: self.input,
            linguistic_dim: self.linguistic_dim,
            acoustic_dim: self.acoustic_dim,
            linguistic_seed: self.linguistic_seed,
            acoustic_seed: self.acoustic_seed,
        }
    }

    pub fn label_config(&self) -> LabelConfig {
        let scheme = |kind| WeightScheme {
            kind,
            horizon_s: self.horizon_s,
            exp_half_life_s: self.exp_half_life_s,
        };
        LabelConfig {
            schemes: [
                scheme(WeightKind::Linear),
                scheme(WeightKind::Sqrt),
                scheme(WeightKind::Exponential),
            ],
            min_speech_s: self.min_speech_s,
            long_silence_s: self.long_silence_s,
            context_s: self.context_s,
        }
    }
}
