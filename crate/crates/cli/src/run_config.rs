//! The flat TOML run configuration read by `music train`.

use std::path::Path;

use music_core::data::AugmentSpec;
use music_core::diffcore::Precision;
use music_core::model::MlpSpec;
use music_core::trainer::{OptimizerKind, TrainConfig};
use music_core::{Error, Result, SegmentConfig};
use serde::{Deserialize, Serialize};

/// Environment variable selecting the default arithmetic precision
/// (`64` or `32`) when a config does not set `precision`.
pub const PRECISION_ENV: &str = "MUSIC_PRECISION";

/// One key per training knob. Missing keys take the defaults of
/// [`TrainConfig::default`]; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    pub lambda: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub num_segments: usize,
    pub segment_dim: usize,
    pub encoder_widths: Vec<usize>,
    pub projector_widths: Vec<usize>,
    pub aug_noise_std: f64,
    pub aug_dropout: f64,
    pub aug_scale_lo: f64,
    pub aug_scale_hi: f64,
    /// `"f64"` or `"f32"`; unset defers to [`PRECISION_ENV`].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<Precision>,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        let mut file = Self::from(&TrainConfig::default());
        file.precision = None;
        file
    }
}

impl From<&TrainConfig> for RunConfigFile {
    fn from(c: &TrainConfig) -> Self {
        Self {
            batch_size: c.batch_size,
            epochs: c.epochs,
            warmup_epochs: c.warmup_epochs,
            base_lr: c.base_lr,
            final_lr: c.final_lr,
            lambda: c.lambda,
            weight_decay: c.weight_decay,
            momentum: c.momentum,
            optimizer: c.optimizer,
            seed: c.seed,
            num_segments: c.segments.num_segments(),
            segment_dim: c.segments.segment_dim(),
            encoder_widths: c.encoder.widths().to_vec(),
            projector_widths: c.projector.widths().to_vec(),
            aug_noise_std: c.augment.noise_std,
            aug_dropout: c.augment.dropout_prob,
            aug_scale_lo: c.augment.scale_lo,
            aug_scale_hi: c.augment.scale_hi,
            precision: Some(c.precision),
        }
    }
}

impl RunConfigFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Validated training config; `default_precision` fills an unset
    /// `precision`.
    pub fn resolve(&self, default_precision: Precision) -> Result<TrainConfig> {
        let config = TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            base_lr: self.base_lr,
            final_lr: self.final_lr,
            lambda: self.lambda,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            optimizer: self.optimizer,
            seed: self.seed,
            segments: SegmentConfig::new(self.num_segments, self.segment_dim)?,
            encoder: MlpSpec::new(self.encoder_widths.clone())?,
            projector: MlpSpec::new(self.projector_widths.clone())?,
            augment: AugmentSpec {
                noise_std: self.aug_noise_std,
                dropout_prob: self.aug_dropout,
                scale_lo: self.aug_scale_lo,
                scale_hi: self.aug_scale_hi,
            },
            precision: self.precision.unwrap_or(default_precision),
        };
        config.validate()?;
        Ok(config)
    }
}

/// Precision named by [`PRECISION_ENV`], or 64-bit when it is unset.
pub fn env_precision() -> Result<Precision> {
    match std::env::var(PRECISION_ENV) {
        Err(std::env::VarError::NotPresent) => Ok(Precision::default()),
        Ok(v) => v
            .trim()
            .parse::<u32>()
            .ok()
            .and_then(Precision::from_bits)
            .ok_or_else(|| Error::Config(format!("{PRECISION_ENV} must be 64 or 32, got {v:?}"))),
        Err(e) => Err(Error::Config(format!("{PRECISION_ENV}: {e}"))),
    }
}
