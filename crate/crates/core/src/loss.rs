//! Masked joint-entropy loss and transform-invariance term.
//!
//! The joint distribution between two views is the batch mean of outer
//! products of their flat codes. The entropy term sums `p ln p` over the
//! diagonal of the diagonal blocks and over every entry of the off-diagonal
//! blocks, normalized by `1 / S^2`. The invariance term is the mean negative
//! log inner product of matching segments.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::coder::{ProbCode, SegmentConfig};
use crate::diffcore::{clamped_ln, matmul, Array, Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 1.0;

/// `D x D` block matrix of joint unit probabilities between two views.
#[derive(Clone, Debug, PartialEq)]
pub struct JointDistribution {
    matrix: Array,
    batch_size: usize,
    config: SegmentConfig,
}

impl JointDistribution {
    pub fn matrix(&self) -> &Array {
        &self.matrix
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn config(&self) -> SegmentConfig {
        self.config
    }

    /// Entry for units `(s1, d1)` of view one and `(s2, d2)` of view two.
    pub fn get(&self, s1: usize, d1: usize, s2: usize, d2: usize) -> f64 {
        let ds = self.config.segment_dim();
        self.matrix.at2(s1 * ds + d1, s2 * ds + d2)
    }

    /// The `D_S x D_S` block for segments `(s1, s2)`, row-major.
    pub fn block(&self, s1: usize, s2: usize) -> Vec<f64> {
        let ds = self.config.segment_dim();
        let mut out = Vec::with_capacity(ds * ds);
        for d1 in 0..ds {
            for d2 in 0..ds {
                out.push(self.get(s1, d1, s2, d2));
            }
        }
        out
    }
}

/// Which joint entries enter the entropy term.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionMask {
    config: SegmentConfig,
    selected: Vec<bool>,
}

impl SelectionMask {
    pub fn is_selected(&self, row: usize, col: usize) -> bool {
        self.selected[row * self.config.embed_dim() + col]
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&b| b).count()
    }

    pub fn config(&self) -> SegmentConfig {
        self.config
    }

    /// 0/1 matrix form, for multiplying into the joint on a tape.
    pub fn to_array(&self) -> Array {
        let d = self.config.embed_dim();
        Array::new(
            vec![d, d],
            self.selected.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask is D x D")
    }
}

/// Expected number of selected entries: `S * D_S + S (S - 1) * D_S^2`.
pub fn selected_count(config: &SegmentConfig) -> usize {
    let (s, ds) = (config.num_segments(), config.segment_dim());
    s * ds + s * (s - 1) * ds * ds
}

/// Entropy-term values under the training and the two-part normalizations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropyTerms {
    /// `(1 / S^2) * sum over selected of p ln p`; the training objective.
    pub ent: f64,
    /// Diagonal part normalized by `1 / S`.
    pub ent_diag: f64,
    /// Off-diagonal-block part normalized by `1 / (S (S - 1))`; zero when `S = 1`.
    pub ent_offdiag: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ent_diag: f64,
    pub ent_offdiag: f64,
    /// `ent_diag + ent_offdiag`.
    pub ent_total: f64,
    /// Entropy term as optimized (`1 / S^2` normalization).
    pub ent: f64,
    pub ti: f64,
    /// `ent + lambda * ti`.
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.ent_diag, self.ent_offdiag, self.ent_total, self.ent, self.ti, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total={} ent={} ent_diag={} ent_offdiag={} ent_total={} ti={} lambda={}",
            self.total, self.ent, self.ent_diag, self.ent_offdiag, self.ent_total, self.ti, self.lambda
        )
    }
}

fn check_pair(p1: &ProbCode, p2: &ProbCode) -> Result<()> {
    if p1.config() != p2.config() || p1.batch_size() != p2.batch_size() {
        return Err(Error::Usage(format!(
            "codes disagree: {:?} x {} vs {:?} x {}",
            p1.config(),
            p1.batch_size(),
            p2.config(),
            p2.batch_size()
        )));
    }
    if p1.batch_size() == 0 {
        return Err(Error::Usage("empty batch".into()));
    }
    Ok(())
}

pub fn joint_distribution(p1: &ProbCode, p2: &ProbCode) -> Result<JointDistribution> {
    check_pair(p1, p2)?;
    let n = p1.batch_size();
    let mut matrix = matmul(&p1.to_flat().transpose()?, &p2.to_flat())?;
    for v in matrix.data_mut() {
        *v /= n as f64;
    }
    Ok(JointDistribution {
        matrix,
        batch_size: n,
        config: p1.config(),
    })
}

/// Keeps `(s, d, s, d)` diagonal entries and every entry with `s1 != s2`.
pub fn selection_mask(config: &SegmentConfig) -> SelectionMask {
    let d = config.embed_dim();
    let ds = config.segment_dim();
    let mut selected = vec![false; d * d];
    for r in 0..d {
        for c in 0..d {
            selected[r * d + c] = r == c || r / ds != c / ds;
        }
    }
    SelectionMask {
        config: *config,
        selected,
    }
}

pub fn entropy_loss(joint: &JointDistribution, mask: &SelectionMask) -> Result<EntropyTerms> {
    if joint.config != mask.config {
        return Err(Error::Usage("mask and joint distribution have different geometry".into()));
    }
    let config = joint.config;
    let d = config.embed_dim();
    let s = config.num_segments() as f64;
    let (mut selected, mut diag, mut offdiag) = (0.0, 0.0, 0.0);
    for r in 0..d {
        for c in 0..d {
            if !mask.is_selected(r, c) {
                continue;
            }
            let p = joint.matrix.at2(r, c);
            let term = p * clamped_ln(p);
            selected += term;
            if config.segment_of(r) == config.segment_of(c) {
                diag += term;
            } else {
                offdiag += term;
            }
        }
    }
    let ent_offdiag = if config.num_segments() > 1 {
        offdiag / (s * (s - 1.0))
    } else {
        0.0
    };
    Ok(EntropyTerms {
        ent: selected / (s * s),
        ent_diag: diag / s,
        ent_offdiag,
    })
}

/// `-(1 / (N S)) * sum_{i,s} ln(sum_d p1 * p2)`, with the clamped log.
pub fn ti_loss(p1: &ProbCode, p2: &ProbCode) -> Result<f64> {
    check_pair(p1, p2)?;
    let config = p1.config();
    let (n, s) = (p1.batch_size(), config.num_segments());
    let mut acc = 0.0;
    for i in 0..n {
        for seg in 0..s {
            let inner: f64 = p1
                .segment(i, seg)
                .iter()
                .zip(p2.segment(i, seg))
                .map(|(a, b)| a * b)
                .sum();
            acc += clamped_ln(inner);
        }
    }
    Ok(-acc / (n * s) as f64)
}

pub fn total_loss(p1: &ProbCode, p2: &ProbCode, lambda: f64) -> Result<LossBreakdown> {
    check_lambda(lambda)?;
    let joint = joint_distribution(p1, p2)?;
    let mask = selection_mask(&p1.config());
    let terms = entropy_loss(&joint, &mask)?;
    let ti = ti_loss(p1, p2)?;
    Ok(breakdown(terms, ti, lambda))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    Ok(())
}

fn breakdown(terms: EntropyTerms, ti: f64, lambda: f64) -> LossBreakdown {
    LossBreakdown {
        ent_diag: terms.ent_diag,
        ent_offdiag: terms.ent_offdiag,
        ent_total: terms.ent_diag + terms.ent_offdiag,
        ent: terms.ent,
        ti,
        total: terms.ent + lambda * ti,
        lambda,
    }
}

/// Nodes of the differentiable loss graph.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: Var,
    pub ent: Var,
    pub ti: Var,
    pub joint: Var,
    pub batch_size: usize,
}

/// Records the full loss for two `N x S x D_S` code nodes.
///
/// Computation order: invariance term from the unflattened codes, then the
/// joint distribution of the flat codes, the masked `p ln p` sum, and
/// finally `ent + lambda * ti`.
pub fn loss_on_tape(
    tape: &mut Tape,
    code1: Var,
    code2: Var,
    config: &SegmentConfig,
    lambda: f64,
) -> Result<LossNodes> {
    check_lambda(lambda)?;
    let shape = tape.shape(code1).to_vec();
    if shape != tape.shape(code2) {
        return Err(Error::shape("loss", &[&shape, tape.shape(code2)]));
    }
    let (n, s, ds) = match shape[..] {
        [n, s, ds] if s == config.num_segments() && ds == config.segment_dim() && n > 0 => (n, s, ds),
        _ => return Err(Error::shape("loss", &[&shape, &[0, config.num_segments(), config.segment_dim()]])),
    };

    let prod = tape.mul(code1, code2)?;
    let prod = tape.reshape(prod, &[n * s, ds])?;
    let inner = tape.sum_axis(prod, 1)?;
    let log_inner = tape.ln(inner);
    let mean_log = tape.mean(log_inner);
    let ti = tape.scale(mean_log, -1.0);

    let d = s * ds;
    let flat1 = tape.reshape(code1, &[n, d])?;
    let flat2 = tape.reshape(code2, &[n, d])?;
    let flat1_t = tape.transpose(flat1)?;
    let joint_sum = tape.matmul(flat1_t, flat2)?;
    let joint = tape.scale(joint_sum, 1.0 / n as f64);

    let mask = tape.constant(selection_mask(config).to_array());
    let selected = tape.mul(joint, mask)?;
    let log_joint = tape.ln(joint);
    let plogp = tape.mul(selected, log_joint)?;
    let ent_sum = tape.sum(plogp);
    let ent = tape.scale(ent_sum, 1.0 / (s * s) as f64);

    let weighted_ti = tape.scale(ti, lambda);
    let total = tape.add(ent, weighted_ti)?;
    Ok(LossNodes {
        total,
        ent,
        ti,
        joint,
        batch_size: n,
    })
}

/// Breakdown for a loss graph already recorded by [`loss_on_tape`].
pub fn breakdown_from_tape(tape: &Tape, nodes: &LossNodes, config: &SegmentConfig, lambda: f64) -> Result<LossBreakdown> {
    let joint = JointDistribution {
        matrix: tape.value(nodes.joint).clone(),
        batch_size: nodes.batch_size,
        config: *config,
    };
    let mut terms = entropy_loss(&joint, &selection_mask(config))?;
    // Report exactly what was optimized.
    terms.ent = tape.value(nodes.ent).item();
    let ti = tape.value(nodes.ti).item();
    let mut b = breakdown(terms, ti, lambda);
    b.total = tape.value(nodes.total).item();
    Ok(b)
}

/// Entropy-term value of the balanced one-hot configuration:
/// `-(2S - 1) / S * ln D_S`.
pub fn one_hot_reference(config: &SegmentConfig) -> f64 {
    let s = config.num_segments() as f64;
    -(2.0 * s - 1.0) / s * (config.segment_dim() as f64).ln()
}

/// Greatest lower bound of the entropy term over all code pairs.
///
/// Off-diagonal blocks are products of distributions and sum to one, so each
/// contributes at least `-2 ln D_S`. The diagonal of a diagonal block only
/// satisfies `sum <= 1`; `sum p ln p` under that constraint is minimized by
/// uniform `1 / D_S` entries when `D_S > e`, and by `1 / e` entries otherwise.
/// For `D_S = 2` this sits below [`one_hot_reference`].
pub fn entropy_lower_bound(config: &SegmentConfig) -> f64 {
    let s = config.num_segments() as f64;
    let ds = config.segment_dim() as f64;
    let diag_block = if ds <= std::f64::consts::E { ds / std::f64::consts::E } else { ds.ln() };
    -(s * diag_block + s * (s - 1.0) * 2.0 * ds.ln()) / (s * s)
}
