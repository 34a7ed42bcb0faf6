//! Batch statistics of codes: marginal balance, collapse, between-segment
//! mutual information, unit covariance, coding capacity; plus linear probing
//! of frozen representations.

mod probe;

pub use probe::{linear_probe, ProbeConfig, ProbeResult};

use num_bigint::BigUint;
use serde::Serialize;

use crate::coder::{ProbCode, SegmentConfig};
use crate::diffcore::{clamped_ln, Array};
use crate::error::{Error, Result};
use crate::loss::{self, joint_distribution};

/// A segment whose most popular unit holds at least this share of the
/// batch's mass is reported as collapsed.
pub const COLLAPSE_THRESHOLD: f64 = 0.9;

/// Largest batch [`ideal_code`] will enumerate.
pub const MAX_IDEAL_BATCH: usize = 1 << 20;

/// Per-unit batch means and their worst distance from `1 / D_S`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Marginals {
    /// `means[s][d] = mean_i p_i(s, d)`.
    pub means: Vec<Vec<f64>>,
    pub max_deviation: f64,
}

pub fn marginal_uniformity(code: &ProbCode) -> Marginals {
    let config = code.config();
    let (s, ds, n) = (config.num_segments(), config.segment_dim(), code.batch_size());
    let mut means = vec![vec![0.0; ds]; s];
    for i in 0..n {
        for (seg, row) in means.iter_mut().enumerate() {
            for (m, p) in row.iter_mut().zip(code.segment(i, seg)) {
                *m += p;
            }
        }
    }
    let target = 1.0 / ds as f64;
    let mut max_deviation = 0.0_f64;
    for row in &mut means {
        for m in row.iter_mut() {
            *m /= n.max(1) as f64;
            max_deviation = max_deviation.max((*m - target).abs());
        }
    }
    Marginals {
        means,
        max_deviation,
    }
}

/// `-sum p ln p` with the clamped log.
pub fn entropy(dist: &[f64]) -> f64 {
    -dist.iter().map(|&p| p * clamped_ln(p)).sum::<f64>()
}

/// Entropy of each segment's batch marginal.
pub fn marginal_entropies(code: &ProbCode) -> Vec<f64> {
    marginal_uniformity(code).means.iter().map(|m| entropy(m)).collect()
}

/// `max_d mean_i p_i(s, d)` per segment: 1 for a fully collapsed segment,
/// `1 / D_S` for a perfectly balanced one.
pub fn collapse_fraction(code: &ProbCode) -> Vec<f64> {
    marginal_uniformity(code)
        .means
        .iter()
        .map(|m| m.iter().cloned().fold(0.0, f64::max))
        .collect()
}

/// Which pair of codes a mutual-information matrix was computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MiSource {
    /// Both segments read from the same view.
    SameView,
    /// Segment `s'` from view one, `s''` from view two.
    CrossView,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MutualInformation {
    pub source: MiSource,
    /// `S x S`, in nats.
    pub matrix: Vec<Vec<f64>>,
}

impl MutualInformation {
    pub fn max_off_diagonal(&self) -> f64 {
        let mut worst = 0.0_f64;
        for (a, row) in self.matrix.iter().enumerate() {
            for (b, v) in row.iter().enumerate() {
                if a != b {
                    worst = worst.max(v.abs());
                }
            }
        }
        worst
    }
}

fn mutual_information(p1: &ProbCode, p2: &ProbCode, source: MiSource) -> Result<MutualInformation> {
    if p1.batch_size() < 2 {
        return Err(Error::Usage(format!(
            "mutual information needs at least 2 samples, got {}",
            p1.batch_size()
        )));
    }
    let joint = joint_distribution(p1, p2)?;
    let h1 = marginal_entropies(p1);
    let h2 = marginal_entropies(p2);
    let s = p1.config().num_segments();
    let mut matrix = vec![vec![0.0; s]; s];
    for a in 0..s {
        for b in 0..s {
            matrix[a][b] = if a == b && source == MiSource::SameView {
                // I(X; X) = H(X)
                h1[a]
            } else {
                h1[a] + h2[b] - entropy(&joint.block(a, b))
            };
        }
    }
    Ok(MutualInformation { source, matrix })
}

/// `I(s', s'') = H(s') + H(s'') - H(s', s'')` between segments of one code,
/// with the pairwise joint taken as the batch mean of outer products.
pub fn segment_mutual_information(code: &ProbCode) -> Result<MutualInformation> {
    mutual_information(code, code, MiSource::SameView)
}

/// As [`segment_mutual_information`], pairing segments across two views.
pub fn cross_view_mutual_information(p1: &ProbCode, p2: &ProbCode) -> Result<MutualInformation> {
    mutual_information(p1, p2, MiSource::CrossView)
}

/// Population (`1 / N`) covariance of the flat `D`-dimensional codes.
pub fn code_covariance(code: &ProbCode) -> Result<Array> {
    let n = code.batch_size();
    if n < 2 {
        return Err(Error::Usage(format!("covariance needs at least 2 samples, got {n}")));
    }
    let d = code.config().embed_dim();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(code.sample(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for i in 0..n {
        for ((c, v), m) in centered.iter_mut().zip(code.sample(i)).zip(&mean) {
            *c = v - m;
        }
        for r in 0..d {
            let cr = centered[r];
            if cr == 0.0 {
                continue;
            }
            let row = &mut cov[r * d..(r + 1) * d];
            for (o, cc) in row.iter_mut().zip(&centered) {
                *o += cr * cc;
            }
        }
    }
    for v in &mut cov {
        *v /= n as f64;
    }
    Array::new(vec![d, d], cov)
}

/// Number of distinct one-hot codes, `D_S ^ S`.
pub fn encoding_capacity(config: &SegmentConfig) -> BigUint {
    BigUint::from(config.segment_dim()).pow(config.num_segments() as u32)
}

/// Every one-hot code exactly once (`D_S ^ S` samples, mixed-radix order,
/// segment 0 slowest). Each segment is balanced and any two segments are
/// independent over this batch.
pub fn ideal_code(config: &SegmentConfig) -> Result<ProbCode> {
    let (s, ds) = (config.num_segments(), config.segment_dim());
    let n = encoding_capacity(config);
    let n: usize = usize::try_from(&n)
        .ok()
        .filter(|&n| n <= MAX_IDEAL_BATCH)
        .ok_or_else(|| {
            Error::Config(format!(
                "ideal code for {s} segments of {ds} units has {n} samples, more than {MAX_IDEAL_BATCH}"
            ))
        })?;
    let d = config.embed_dim();
    let mut data = vec![0.0; n * d];
    for i in 0..n {
        let mut rest = i;
        for seg in (0..s).rev() {
            let unit = rest % ds;
            rest /= ds;
            data[i * d + seg * ds + unit] = 1.0;
        }
    }
    ProbCode::new(Array::new(vec![n, s, ds], data)?, *config)
}

/// Entropy-term values of a code pair next to the analytic references.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntropyCheck {
    pub entropy_loss: f64,
    pub ent_diag: f64,
    pub ent_offdiag: f64,
    /// Value at the balanced one-hot configuration.
    pub one_hot_reference: f64,
    /// True infimum over all code pairs.
    pub lower_bound: f64,
    /// `entropy_loss` lies strictly below the one-hot reference, i.e. this
    /// batch beats the configuration usually described as optimal.
    pub below_one_hot_reference: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoryReport {
    pub batch_size: usize,
    pub num_segments: usize,
    pub segment_dim: usize,
    pub marginals: Marginals,
    pub marginal_entropy: Vec<f64>,
    pub collapse_fraction: Vec<f64>,
    pub collapsed: bool,
    pub mutual_information: MutualInformation,
    pub cross_view_mutual_information: Option<MutualInformation>,
    /// `D x D` rows.
    pub covariance: Vec<Vec<f64>>,
    pub entropy: EntropyCheck,
}

/// All diagnostics for `code`; `other_view` adds the cross-view quantities.
pub fn theory_report(code: &ProbCode, other_view: Option<&ProbCode>) -> Result<TheoryReport> {
    let config = code.config();
    let cov = code_covariance(code)?;
    let d = config.embed_dim();
    let covariance = (0..d).map(|r| cov.row(r).to_vec()).collect();
    let collapse = collapse_fraction(code);
    let partner = other_view.unwrap_or(code);
    let terms = loss::entropy_loss(&joint_distribution(code, partner)?, &loss::selection_mask(&config))?;
    let one_hot_reference = loss::one_hot_reference(&config);
    Ok(TheoryReport {
        batch_size: code.batch_size(),
        num_segments: config.num_segments(),
        segment_dim: config.segment_dim(),
        marginals: marginal_uniformity(code),
        marginal_entropy: marginal_entropies(code),
        collapsed: collapse.iter().any(|&c| c >= COLLAPSE_THRESHOLD),
        collapse_fraction: collapse,
        mutual_information: segment_mutual_information(code)?,
        cross_view_mutual_information: other_view
            .map(|p2| cross_view_mutual_information(code, p2))
            .transpose()?,
        covariance,
        entropy: EntropyCheck {
            entropy_loss: terms.ent,
            ent_diag: terms.ent_diag,
            ent_offdiag: terms.ent_offdiag,
            one_hot_reference,
            lower_bound: loss::entropy_lower_bound(&config),
            below_one_hot_reference: terms.ent < one_hot_reference - 1e-12,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(s: usize, ds: usize) -> SegmentConfig {
        SegmentConfig::new(s, ds).unwrap()
    }

    fn collapsed(config: SegmentConfig, n: usize) -> ProbCode {
        let d = config.embed_dim();
        let mut row = vec![0.0; d];
        for s in 0..config.num_segments() {
            row[s * config.segment_dim()] = 1.0;
        }
        ProbCode::from_flat(&Array::from_rows(&vec![row; n]).unwrap(), config).unwrap()
    }

    fn uniform(config: SegmentConfig, n: usize) -> ProbCode {
        let row = vec![1.0 / config.segment_dim() as f64; config.embed_dim()];
        ProbCode::from_flat(&Array::from_rows(&vec![row; n]).unwrap(), config).unwrap()
    }

    #[test]
    fn marginals() {
        let c = cfg(2, 2);
        assert_eq!(marginal_uniformity(&ideal_code(&c).unwrap()).max_deviation, 0.0);
        assert_eq!(marginal_uniformity(&collapsed(c, 4)).max_deviation, 0.5);
        assert_eq!(marginal_uniformity(&uniform(c, 4)).max_deviation, 0.0);
        let c = cfg(3, 5);
        assert!((marginal_uniformity(&collapsed(c, 3)).max_deviation - 0.8).abs() < 1e-15);
    }

    #[test]
    fn collapse_examples() {
        let c = cfg(2, 4);
        assert_eq!(collapse_fraction(&collapsed(c, 5)), vec![1.0, 1.0]);
        assert_eq!(collapse_fraction(&ideal_code(&c).unwrap()), vec![0.25, 0.25]);
        assert_eq!(collapse_fraction(&uniform(c, 3)), vec![0.25, 0.25]);
    }

    #[test]
    fn ideal_code_layout() {
        let code = ideal_code(&cfg(2, 2)).unwrap();
        assert_eq!(code.batch_size(), 4);
        assert_eq!(code.sample(0), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(code.sample(1), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(code.sample(2), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(code.sample(3), &[0.0, 1.0, 0.0, 1.0]);
        assert!(ideal_code(&cfg(102, 80)).is_err());
    }

    #[test]
    fn identical_segments_share_all_information() {
        // Both segments carry the same balanced assignment.
        let c = cfg(2, 3);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|i| {
                let mut r = vec![0.0; 6];
                r[i % 3] = 1.0;
                r[3 + i % 3] = 1.0;
                r
            })
            .collect();
        let code = ProbCode::from_flat(&Array::from_rows(&rows).unwrap(), c).unwrap();
        let mi = segment_mutual_information(&code).unwrap();
        let ln3 = 3f64.ln();
        for row in &mi.matrix {
            for v in row {
                assert!((v - ln3).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mi_needs_two_samples() {
        let code = collapsed(cfg(2, 2), 1);
        assert!(matches!(segment_mutual_information(&code), Err(Error::Usage(_))));
        assert!(code_covariance(&code).is_err());
    }

    #[test]
    fn constant_batch_has_zero_covariance() {
        let cov = code_covariance(&uniform(cfg(2, 3), 5)).unwrap();
        assert!(cov.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn capacity() {
        assert_eq!(encoding_capacity(&cfg(2, 2)), BigUint::from(4u32));
        assert_eq!(encoding_capacity(&cfg(1, 7)), BigUint::from(7u32));
        assert_eq!(encoding_capacity(&cfg(102, 80)), BigUint::from(80u32).pow(102));
    }

    #[test]
    fn report_flags_collapse() {
        let r = theory_report(&collapsed(cfg(2, 3), 4), None).unwrap();
        assert!(r.collapsed);
        let r = theory_report(&ideal_code(&cfg(2, 3)).unwrap(), None).unwrap();
        assert!(!r.collapsed);
        assert!(r.cross_view_mutual_information.is_none());
    }
}
