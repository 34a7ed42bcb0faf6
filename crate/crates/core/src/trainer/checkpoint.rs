use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

use super::{EpochMetrics, TrainConfig};

pub const CHECKPOINT_FORMAT: &str = "music-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Number of trailing epoch records kept in a checkpoint.
pub const METRICS_TAIL: usize = 10;

/// Parameters plus the configuration that produced them, stored as one
/// JSON document with every number in shortest round-trip decimal form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    /// Optimizer steps taken.
    pub step: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub params: ModelParams,
    pub metrics_tail: Vec<EpochMetrics>,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, params: ModelParams, step: usize, epoch: usize, metrics_tail: Vec<EpochMetrics>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config,
            step,
            epoch,
            params,
            metrics_tail,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses checkpoint text; `path` is only used in error messages.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let format_err = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let header: Header = serde_json::from_str(text).map_err(|e| format_err(e.to_string()))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(format_err(format!("not a checkpoint (format {:?})", header.format)));
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: header.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| format_err(e.to_string()))?;
        ckpt.config.validate()?;
        ckpt.params.validate(&ckpt.config.segments)?;
        if ckpt.params.encoder.spec != ckpt.config.encoder || ckpt.params.projector.spec != ckpt.config.projector {
            return Err(format_err("parameter shapes disagree with the stored config".into()));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        let config = TrainConfig {
            encoder: crate::model::MlpSpec::new(vec![3, 4]).unwrap(),
            projector: crate::model::MlpSpec::new(vec![4, 32]).unwrap(),
            epochs: 0,
            ..TrainConfig::default()
        };
        let params = ModelParams::init(config.encoder.clone(), config.projector.clone(), &config.segments, 3).unwrap();
        Checkpoint::new(config, params, 0, 0, vec![])
    }

    #[test]
    fn round_trip_is_exact() {
        let c = small();
        let back = Checkpoint::parse(&c.to_json(), Path::new("x")).unwrap();
        assert_eq!(back, c);
        for ((_, a), (_, b)) in back.params.tensors().iter().zip(c.params.tensors()) {
            let bits = |x: &Array| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    use crate::diffcore::Array;

    #[test]
    fn rejects_bad_documents() {
        let text = small().to_json();
        let p = Path::new("ck.json");
        assert!(matches!(Checkpoint::parse(&text[..text.len() / 2], p), Err(Error::Format { .. })));
        let wrong_version = text.replacen("\"version\": 1", "\"version\": 9", 1);
        assert!(matches!(
            Checkpoint::parse(&wrong_version, p),
            Err(Error::Version { found: 9, expected: 1, .. })
        ));
        let wrong_format = text.replacen(CHECKPOINT_FORMAT, "other", 1);
        assert!(matches!(Checkpoint::parse(&wrong_format, p), Err(Error::Format { .. })));
        assert!(matches!(Checkpoint::load(Path::new("/nonexistent/ck.json")), Err(Error::Io { .. })));
    }
}
