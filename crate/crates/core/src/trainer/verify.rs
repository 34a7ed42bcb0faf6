use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::coder::{code_on_tape, SegmentConfig};
use crate::diffcore::{grad_check, Array, GradCheckReport};
use crate::error::{Error, Result};
use crate::loss::loss_on_tape;
use crate::model::{encode, project, MlpSpec, ModelParams};

const LAST_LAYER_GAIN: f64 = 0.25;

/// Problem size for a finite-difference check of the whole loss graph.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossCheckConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub num_segments: usize,
    pub segment_dim: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub lambda: f64,
    pub step: f64,
    pub tolerance: f64,
    /// Corrupt the softmax derivative; only honored with the
    /// `fault-injection` feature.
    pub inject_fault: bool,
}

impl Default for LossCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 8,
            num_segments: 2,
            segment_dim: 2,
            input_dim: 3,
            hidden_dim: 4,
            lambda: 1.0,
            step: 1e-6,
            tolerance: 1e-5,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LossCheck {
    pub report: GradCheckReport,
    /// Name of the parameter tensor holding the worst element.
    pub worst_tensor: Option<String>,
}

/// Checks tape gradients of the full loss (two views through encoder,
/// projector, segment softmax, entropy and invariance terms) with respect
/// to every parameter of a small seeded model.
///
/// Encoder: `input -> hidden -> hidden`; projector: `hidden -> hidden -> D`.
pub fn check_loss_gradients(cfg: &LossCheckConfig) -> Result<LossCheck> {
    if cfg.inject_fault && !cfg!(feature = "fault-injection") {
        return Err(Error::Usage("fault injection is not compiled into this build".into()));
    }
    let segments = SegmentConfig::new(cfg.num_segments, cfg.segment_dim)?;
    let (h, d) = (cfg.hidden_dim, segments.embed_dim());
    let mut params = ModelParams::init(
        MlpSpec::new(vec![cfg.input_dim, h, h])?,
        MlpSpec::new(vec![h, h, d])?,
        &segments,
        cfg.seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    // Nonzero biases keep ReLU inputs off the kink at 0, where one-sided
    // derivatives disagree with central differences; a damped last layer
    // keeps the softmax out of saturation, where gradients fall below what
    // differences of O(1) losses can resolve.
    let last = params.tensors().len() - 2;
    for (k, t) in params.tensors_mut().into_iter().enumerate() {
        if ModelParams::is_bias(k) {
            for b in t.data_mut() {
                *b = 1.0 + 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            }
        } else if k == last {
            for w in t.data_mut() {
                *w *= LAST_LAYER_GAIN;
            }
        }
    }
    let mut batch = || {
        let data = (0..cfg.batch_size * cfg.input_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Array::new(vec![cfg.batch_size, cfg.input_dim], data)
    };
    let (x1, x2) = (batch()?, batch()?);
    let leaves: Vec<Array> = params.tensors().into_iter().map(|(_, a)| a.clone()).collect();

    let report = grad_check(
        |tape, vars| {
            #[cfg(feature = "fault-injection")]
            if cfg.inject_fault {
                tape.inject_softmax_fault();
            }
            let bound = params.bind_leaves(vars)?;
            let mut code = |x: &Array| {
                let x = tape.constant(x.clone());
                let rep = encode(tape, &params, &bound, x)?;
                let emb = project(tape, &params, &bound, rep)?;
                code_on_tape(tape, emb, &segments)
            };
            let c1 = code(&x1)?;
            let c2 = code(&x2)?;
            Ok(loss_on_tape(tape, c1, c2, &segments, cfg.lambda)?.total)
        },
        &leaves,
        cfg.step,
        cfg.tolerance,
    )?;
    let names = params.tensors();
    let worst_tensor = report.worst.as_ref().map(|w| names[w.leaf].0.clone());
    Ok(LossCheck { report, worst_tensor })
}
