//! Multi-segment softmax coding.
//!
//! An embedding of width `D = S * D_S` is cut into `S` contiguous segments of
//! `D_S` units, and each segment is normalized to a probability distribution
//! over its units. The resulting `N x S x D_S` tensor is the code.

use serde::{Deserialize, Serialize};

use crate::diffcore::{softmax_last, Array, Tape, Var};
use crate::error::{Error, Result};

/// Tolerance on per-segment probability sums accepted by [`ProbCode::new`].
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Partition geometry: `num_segments` segments of `segment_dim` units each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSegmentConfig", into = "RawSegmentConfig")]
pub struct SegmentConfig {
    num_segments: usize,
    segment_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct RawSegmentConfig {
    num_segments: usize,
    segment_dim: usize,
}

impl TryFrom<RawSegmentConfig> for SegmentConfig {
    type Error = Error;
    fn try_from(raw: RawSegmentConfig) -> Result<Self> {
        SegmentConfig::new(raw.num_segments, raw.segment_dim)
    }
}

impl From<SegmentConfig> for RawSegmentConfig {
    fn from(c: SegmentConfig) -> Self {
        RawSegmentConfig {
            num_segments: c.num_segments,
            segment_dim: c.segment_dim,
        }
    }
}

impl SegmentConfig {
    pub fn new(num_segments: usize, segment_dim: usize) -> Result<Self> {
        if num_segments == 0 {
            return Err(Error::Config("num_segments must be positive".into()));
        }
        // A one-unit segment always has probability 1 and carries nothing.
        if segment_dim < 2 {
            return Err(Error::Config(format!(
                "segment_dim must be at least 2, got {segment_dim}"
            )));
        }
        num_segments
            .checked_mul(segment_dim)
            .ok_or_else(|| Error::Config("embedding width overflows".into()))?;
        Ok(Self {
            num_segments,
            segment_dim,
        })
    }

    /// S
    pub fn num_segments(&self) -> usize {
        self.num_segments
    }

    /// D_S
    pub fn segment_dim(&self) -> usize {
        self.segment_dim
    }

    /// D = S * D_S
    pub fn embed_dim(&self) -> usize {
        self.num_segments * self.segment_dim
    }

    /// Segment owning flat embedding coordinate `j`.
    pub fn segment_of(&self, j: usize) -> usize {
        j / self.segment_dim
    }
}

/// A batch of per-segment probability distributions, shape `N x S x D_S`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbCode {
    values: Array,
    config: SegmentConfig,
}

impl ProbCode {
    /// Validates shape, range and per-segment normalization.
    pub fn new(values: Array, config: SegmentConfig) -> Result<Self> {
        let (s, ds) = (config.num_segments, config.segment_dim);
        match values.shape() {
            [_, s2, d2] if *s2 == s && *d2 == ds => {}
            other => {
                return Err(Error::shape("code", &[other, &[0, s, ds]]));
            }
        }
        for (k, seg) in values.data().chunks(ds).enumerate() {
            if seg.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Config(format!(
                    "code segment {k} has entries outside [0, 1]: {seg:?}"
                )));
            }
            let total: f64 = seg.iter().sum();
            if (total - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::Config(format!(
                    "code segment {k} sums to {total}, not 1"
                )));
            }
        }
        Ok(Self { values, config })
    }

    /// Wraps values known to be segment-wise softmax outputs. Used for codes
    /// read off a reduced-precision tape, whose sums drift past
    /// [`SUM_TOLERANCE`].
    pub(crate) fn from_softmax(values: Array, config: SegmentConfig) -> Self {
        Self { values, config }
    }

    /// Builds a code from flat `N x D` rows.
    pub fn from_flat(rows: &Array, config: SegmentConfig) -> Result<Self> {
        Self::new(partition(rows, &config)?, config)
    }

    pub fn config(&self) -> SegmentConfig {
        self.config
    }

    pub fn batch_size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn get(&self, i: usize, s: usize, d: usize) -> f64 {
        let (ns, ds) = (self.config.num_segments, self.config.segment_dim);
        self.values.data()[(i * ns + s) * ds + d]
    }

    /// Distribution of sample `i` in segment `s`.
    pub fn segment(&self, i: usize, s: usize) -> &[f64] {
        let (ns, ds) = (self.config.num_segments, self.config.segment_dim);
        let start = (i * ns + s) * ds;
        &self.values.data()[start..start + ds]
    }

    /// Sample `i` as a flat `D` vector.
    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.config.embed_dim();
        &self.values.data()[i * d..(i + 1) * d]
    }

    pub fn values(&self) -> &Array {
        &self.values
    }

    /// The code as an `N x D` matrix.
    pub fn to_flat(&self) -> Array {
        flatten(&self.values).expect("validated code is 3-D")
    }

    /// Reorders the batch.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            values: self.values.select_rows(rows),
            config: self.config,
        }
    }
}

/// `N x D` embedding to `N x S x D_S` segments; element `(i, s, d)` is
/// embedding element `(i, s * D_S + d)`.
pub fn partition(embedding: &Array, config: &SegmentConfig) -> Result<Array> {
    let (n, d) = embedding.dims2()?;
    if d != config.embed_dim() {
        return Err(Error::Config(format!(
            "embedding width {d} does not match {} segments of {} units",
            config.num_segments, config.segment_dim
        )));
    }
    embedding
        .clone()
        .reshape(&[n, config.num_segments, config.segment_dim])
}

/// Inverse of [`partition`].
pub fn flatten(segments: &Array) -> Result<Array> {
    match *segments.shape() {
        [n, s, ds] => segments.clone().reshape(&[n, s * ds]),
        _ => Err(Error::shape("flatten", &[segments.shape()])),
    }
}

/// Softmax over the units of every `(sample, segment)` pair.
pub fn segment_softmax(segments: &Array) -> Result<ProbCode> {
    let config = match *segments.shape() {
        [_, s, ds] => SegmentConfig::new(s, ds)?,
        _ => return Err(Error::shape("segment_softmax", &[segments.shape()])),
    };
    Ok(ProbCode {
        values: softmax_last(segments),
        config,
    })
}

/// Differentiable path from an `N x D` embedding node to its `N x S x D_S`
/// code node.
pub fn code_on_tape(tape: &mut Tape, embedding: Var, config: &SegmentConfig) -> Result<Var> {
    let (n, d) = tape.value(embedding).dims2()?;
    if d != config.embed_dim() {
        return Err(Error::Config(format!(
            "embedding width {d} does not match segment config width {}",
            config.embed_dim()
        )));
    }
    let segments = tape.reshape(embedding, &[n, config.num_segments, config.segment_dim])?;
    Ok(tape.softmax(segments))
}
