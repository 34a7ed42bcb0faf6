use serde::{Deserialize, Serialize};

use crate::coder::SegmentConfig;
use crate::data::{AugmentSpec, DEFAULT_DIM_NUISANCE, DEFAULT_DIM_SIGNAL};
use crate::diffcore::Precision;
use crate::error::{Error, Result};
use crate::loss::DEFAULT_LAMBDA;
use crate::model::MlpSpec;

pub const DEFAULT_BATCH_SIZE: usize = 256;
pub const DEFAULT_EPOCHS: usize = 100;
pub const DEFAULT_WARMUP_EPOCHS: usize = 10;
pub const DEFAULT_BASE_LR: f64 = 0.6;
pub const DEFAULT_FINAL_LR: f64 = 0.002;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-6;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_TRAIN_SEED: u64 = 7;
pub const DEFAULT_SEGMENTS: usize = 4;
pub const DEFAULT_SEGMENT_DIM: usize = 8;
pub const DEFAULT_ENCODER_HIDDEN: usize = 256;
pub const DEFAULT_REPRESENTATION_DIM: usize = 128;
pub const DEFAULT_PROJECTOR_HIDDEN: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Plain SGD: `p -= lr * g`.
    Sgd,
    /// Heavy-ball momentum: `v = mu * v + g; p -= lr * v`.
    #[default]
    SgdMomentum,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::SgdMomentum => "sgd-momentum",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "sgd-momentum" => Ok(OptimizerKind::SgdMomentum),
            _ => Err(Error::Config(format!("unknown optimizer {s:?} (expected sgd or sgd-momentum)"))),
        }
    }
}

/// Everything that determines a training run besides the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Peak learning rate is `base_lr * batch_size / 256`.
    pub base_lr: f64,
    pub final_lr: f64,
    pub lambda: f64,
    /// Decoupled decay applied to weight matrices only, never to biases.
    pub weight_decay: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub segments: SegmentConfig,
    pub encoder: MlpSpec,
    pub projector: MlpSpec,
    pub augment: AugmentSpec,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let segments = SegmentConfig::new(DEFAULT_SEGMENTS, DEFAULT_SEGMENT_DIM).expect("default segments");
        let input = DEFAULT_DIM_SIGNAL + DEFAULT_DIM_NUISANCE;
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: DEFAULT_EPOCHS,
            warmup_epochs: DEFAULT_WARMUP_EPOCHS,
            base_lr: DEFAULT_BASE_LR,
            final_lr: DEFAULT_FINAL_LR,
            lambda: DEFAULT_LAMBDA,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            momentum: DEFAULT_MOMENTUM,
            optimizer: OptimizerKind::default(),
            seed: DEFAULT_TRAIN_SEED,
            encoder: MlpSpec::new(vec![input, DEFAULT_ENCODER_HIDDEN, DEFAULT_REPRESENTATION_DIM]).expect("default encoder"),
            projector: MlpSpec::new(vec![DEFAULT_REPRESENTATION_DIM, DEFAULT_PROJECTOR_HIDDEN, segments.embed_dim()])
                .expect("default projector"),
            segments,
            augment: AugmentSpec::default(),
            precision: Precision::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ds = self.segments.segment_dim();
        if self.batch_size < ds {
            return Err(Error::Config(format!(
                "batch_size {} is smaller than segment_dim {ds}; a batch cannot spread over every unit",
                self.batch_size
            )));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be less than epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("final_lr", self.final_lr),
            ("lambda", self.lambda),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        self.augment.validate()?;
        crate::model::ModelParams::init(self.encoder.clone(), self.projector.clone(), &self.segments, 0).map(|_| ())
    }

    /// `base_lr * batch_size / 256`.
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.segments.embed_dim(), 32);
        assert_eq!(c.peak_lr(), 0.6);
    }

    #[test]
    fn rejects_small_batch_and_long_warmup() {
        let mut c = TrainConfig { batch_size: 7, ..TrainConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.batch_size = 8;
        c.validate().unwrap();
        c.warmup_epochs = c.epochs;
        assert!(c.validate().is_err());
        c.epochs = 0;
        c.validate().unwrap();
    }

    #[test]
    fn rejects_mismatched_projector() {
        let c = TrainConfig {
            projector: MlpSpec::new(vec![128, 31]).unwrap(),
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn optimizer_names_round_trip() {
        for k in [OptimizerKind::Sgd, OptimizerKind::SgdMomentum] {
            assert_eq!(k.name().parse::<OptimizerKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
        assert!("lars".parse::<OptimizerKind>().is_err());
    }
}
