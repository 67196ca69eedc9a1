use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{format_err, io_err, HarnessError};
use crate::loss::LossConfig;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    Default,
    #[default]
    Small,
    Tiny,
}

impl ModelPreset {
    pub fn config(self) -> ModelConfig {
        match self {
            ModelPreset::Default => ModelConfig::default(),
            ModelPreset::Small => ModelConfig::small(),
            ModelPreset::Tiny => ModelConfig::tiny(),
        }
    }
}

/// Per-field overrides applied on top of the preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder_layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoder_layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ffn_width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pixel_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub queries: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
}

/// Training run settings. Read from TOML; every key is optional.
///
/// ```toml
/// epochs = 60
/// batch_size = 8
/// preset = "small"
/// use_lines = true
///
/// [model]
/// queries = 30
///
/// [loss]
/// lambda = 5.0
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Epochs between learning-rate halvings.
    pub lr_halving_period: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    /// Clip the global gradient norm of each step to this value; 0 disables.
    pub max_grad_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub use_lines: bool,
    /// Center heads, center losses and the center matching term.
    pub use_center_aux: bool,
    /// Also keep `epoch_NNN.safetensors` next to the rolling checkpoint.
    pub keep_epoch_checkpoints: bool,
    /// Random left-right mirroring and color gain on training scenes.
    pub augment: bool,
    pub preset: ModelPreset,
    pub model: ModelOverrides,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_halving_period: 15,
            epochs: 60,
            weight_decay: 1e-5,
            max_grad_norm: 0.0,
            batch_size: 8,
            seed: 0,
            use_lines: true,
            use_center_aux: true,
            keep_epoch_checkpoints: false,
            augment: false,
            preset: ModelPreset::Small,
            model: ModelOverrides::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text).map_err(|e| format_err(path, e))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The architecture this run trains.
    pub fn model_config(&self) -> ModelConfig {
        let mut c = self.preset.config();
        let o = &self.model;
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut c.width, o.width);
        set(&mut c.heads, o.heads);
        set(&mut c.encoder_layers, o.encoder_layers);
        set(&mut c.decoder_layers, o.decoder_layers);
        set(&mut c.ffn_width, o.ffn_width);
        set(&mut c.pixel_channels, o.pixel_channels);
        set(&mut c.queries, o.queries);
        set(&mut c.embed_dim, o.embed_dim);
        c.use_lines = self.use_lines;
        c.use_center = self.use_center_aux;
        c
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.max_grad_norm >= 0.0) {
            return Err(HarnessError::Config(
                "lr must be positive, weight_decay and max_grad_norm non-negative".into(),
            ));
        }
        if self.lr_halving_period == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(HarnessError::Config(
                "lr_halving_period, epochs and batch_size must be positive".into(),
            ));
        }
        self.model_config().validate()?;
        self.loss.validate().map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Short hash of the full run configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
