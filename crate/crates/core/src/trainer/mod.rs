//! Optimization loop: learning-rate schedule, SGD with momentum, seeded
//! epochs, per-epoch metrics and checkpoints.

mod checkpoint;
mod config;
mod schedule;
mod verify;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION, METRICS_TAIL};
pub use config::*;
pub use schedule::{lr_at, Schedule};
pub use verify::{check_loss_gradients, LossCheck, LossCheckConfig};

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::coder::{code_on_tape, ProbCode};
use crate::data::{batch_views, stream, Dataset, StreamTag};
use crate::diagnostics::{marginal_entropies, marginal_uniformity};
use crate::diffcore::{Array, Tape};
use crate::error::{Error, Result};
use crate::loss::{breakdown_from_tape, loss_on_tape, LossBreakdown};
use crate::model::{encode, project, ModelParams};

/// One record per finished epoch. Loss and code statistics are means over
/// the epoch's steps; code statistics are read from the first view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Rate used by the epoch's last step.
    pub lr: f64,
    pub loss_total: f64,
    pub loss_ent: f64,
    pub loss_ent_diag: f64,
    pub loss_ent_offdiag: f64,
    pub loss_ti: f64,
    pub marginal_entropy_mean: f64,
    /// Largest per-segment collapse fraction.
    pub collapse_fraction: f64,
    /// Largest distance of any unit's batch mean from `1 / D_S`.
    pub marginal_deviation: f64,
    /// Only filled when timing is requested; `null` keeps the stream
    /// reproducible byte for byte.
    pub wall_ms: Option<u64>,
}

/// Result of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    pub lr: f64,
    /// First-view code of the batch.
    pub code: ProbCode,
}

/// Parameters, optimizer state and step counter of a run in progress.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    params: ModelParams,
    velocity: Vec<Array>,
    schedule: Schedule,
    steps_per_epoch: usize,
    step: usize,
}

impl Trainer {
    /// Fresh parameters seeded from `config.seed`, for datasets of
    /// `dataset_len` samples.
    pub fn new(config: TrainConfig, dataset_len: usize) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(config.encoder.clone(), config.projector.clone(), &config.segments, config.seed)?;
        Self::with_params(config, params, dataset_len)
    }

    pub fn with_params(config: TrainConfig, mut params: ModelParams, dataset_len: usize) -> Result<Self> {
        config.validate()?;
        params.validate(&config.segments)?;
        if dataset_len < config.batch_size {
            return Err(Error::Config(format!(
                "dataset has {dataset_len} samples, fewer than batch_size {}",
                config.batch_size
            )));
        }
        for t in params.tensors_mut() {
            config.precision.round_slice(t.data_mut());
        }
        let steps_per_epoch = dataset_len / config.batch_size;
        let schedule = Schedule::for_config(&config, steps_per_epoch)?;
        let velocity = params.tensors().iter().map(|(_, a)| Array::zeros(a.shape())).collect();
        Ok(Self {
            config,
            params,
            velocity,
            schedule,
            steps_per_epoch,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    /// Optimizer steps taken so far.
    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One update on the samples `indices` of `dataset`, with views drawn
    /// for `epoch`. Update `k` (0-based) uses the scheduled rate at `k + 1`,
    /// so the first update moves the parameters and the last one runs at
    /// the final rate.
    pub fn step(&mut self, dataset: &Dataset, indices: &[usize], epoch: usize) -> Result<StepOutcome> {
        if indices.len() != self.config.batch_size {
            return Err(Error::Usage(format!(
                "batch of {} samples, config expects {}",
                indices.len(),
                self.config.batch_size
            )));
        }
        if self.step >= self.schedule.total_steps {
            return Err(Error::Usage(format!(
                "all {} scheduled steps already taken",
                self.schedule.total_steps
            )));
        }
        if dataset.dim() != self.params.input_dim() {
            return Err(Error::Config(format!(
                "dataset dimension {} does not match encoder input width {}",
                dataset.dim(),
                self.params.input_dim()
            )));
        }
        let lr = self.schedule.lr_at(self.step + 1)?;
        let (mut x1, mut x2) = batch_views(dataset, indices, &self.config.augment, self.config.seed, epoch as u64);
        let precision = self.config.precision;
        precision.round_slice(x1.data_mut());
        precision.round_slice(x2.data_mut());

        let segments = self.config.segments;
        let mut tape = Tape::with_precision(precision);
        let bound = self.params.bind(&mut tape);
        let code = |tape: &mut Tape, x: Array| -> Result<_> {
            let x = tape.constant(x);
            let rep = encode(tape, &self.params, &bound, x)?;
            let emb = project(tape, &self.params, &bound, rep)?;
            code_on_tape(tape, emb, &segments)
        };
        let c1 = code(&mut tape, x1)?;
        let c2 = code(&mut tape, x2)?;
        let nodes = loss_on_tape(&mut tape, c1, c2, &segments, self.config.lambda)?;
        let breakdown = breakdown_from_tape(&tape, &nodes, &segments, self.config.lambda)?;
        if !breakdown.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                breakdown: Box::new(breakdown),
            });
        }
        let mut grads = tape.backward(nodes.total)?;
        let grads = self.params.collect_gradients(&bound, &mut grads);
        let code = ProbCode::from_softmax(tape.value(c1).clone(), segments);
        self.apply(&grads, lr);
        self.step += 1;
        Ok(StepOutcome { breakdown, lr, code })
    }

    fn apply(&mut self, grads: &[Array], lr: f64) {
        let cfg = &self.config;
        let precision = cfg.precision;
        let momentum = match cfg.optimizer {
            OptimizerKind::Sgd => 0.0,
            OptimizerKind::SgdMomentum => cfg.momentum,
        };
        for (k, ((p, v), g)) in self
            .params
            .tensors_mut()
            .into_iter()
            .zip(&mut self.velocity)
            .zip(grads)
            .enumerate()
        {
            let decay = if ModelParams::is_bias(k) { 0.0 } else { cfg.weight_decay };
            for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = precision.round(momentum * *vi + gi);
                *pi = precision.round(*pi - lr * *vi - lr * decay * *pi);
            }
        }
    }

    pub fn checkpoint(&self, epoch: usize, metrics_tail: Vec<EpochMetrics>) -> Checkpoint {
        Checkpoint::new(self.config.clone(), self.params.clone(), self.step, epoch, metrics_tail)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FitOptions {
    /// Record `wall_ms` per epoch.
    pub wall_clock: bool,
}

/// Trains for `config.epochs` epochs. Each epoch visits a seeded
/// permutation of the dataset in full batches; a trailing partial batch is
/// skipped. `on_epoch` sees every record as soon as it is complete.
pub fn fit(
    dataset: &Dataset,
    config: &TrainConfig,
    options: FitOptions,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(config.clone(), dataset.len())?;
    let mut tail: Vec<EpochMetrics> = Vec::new();
    let batch = config.batch_size;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut stream(config.seed, StreamTag::Shuffle, &[epoch as u64]));
        let mut acc = EpochAccumulator::default();
        for chunk in order.chunks_exact(batch) {
            acc.add(&trainer.step(dataset, chunk, epoch)?);
        }
        let metrics = acc.finish(epoch + 1, options.wall_clock.then(|| started.elapsed().as_millis() as u64));
        on_epoch(&metrics)?;
        tail.push(metrics);
        if tail.len() > METRICS_TAIL {
            tail.remove(0);
        }
    }
    Ok(trainer.checkpoint(config.epochs, tail))
}

#[derive(Default)]
struct EpochAccumulator {
    steps: usize,
    lr: f64,
    total: f64,
    ent: f64,
    ent_diag: f64,
    ent_offdiag: f64,
    ti: f64,
    marginal_entropy: f64,
    collapse: Vec<f64>,
    deviation: Vec<f64>,
}

impl EpochAccumulator {
    fn add(&mut self, out: &StepOutcome) {
        let b = &out.breakdown;
        self.steps += 1;
        self.lr = out.lr;
        self.total += b.total;
        self.ent += b.ent;
        self.ent_diag += b.ent_diag;
        self.ent_offdiag += b.ent_offdiag;
        self.ti += b.ti;
        let entropies = marginal_entropies(&out.code);
        self.marginal_entropy += entropies.iter().sum::<f64>() / entropies.len() as f64;
        let target = 1.0 / out.code.config().segment_dim() as f64;
        let means = marginal_uniformity(&out.code).means;
        if self.collapse.is_empty() {
            self.collapse = vec![0.0; means.len()];
            self.deviation = vec![0.0; means.len()];
        }
        for (s, m) in means.iter().enumerate() {
            self.collapse[s] += m.iter().cloned().fold(0.0, f64::max);
            self.deviation[s] += m.iter().map(|v| (v - target).abs()).fold(0.0, f64::max);
        }
    }

    fn finish(self, epoch: usize, wall_ms: Option<u64>) -> EpochMetrics {
        let n = self.steps.max(1) as f64;
        let worst = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max) / n;
        EpochMetrics {
            epoch,
            lr: self.lr,
            loss_total: self.total / n,
            loss_ent: self.ent / n,
            loss_ent_diag: self.ent_diag / n,
            loss_ent_offdiag: self.ent_offdiag / n,
            loss_ti: self.ti / n,
            marginal_entropy_mean: self.marginal_entropy / n,
            collapse_fraction: worst(&self.collapse),
            marginal_deviation: worst(&self.deviation),
            wall_ms,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_clusters, ClusterSpec};
    use crate::model::MlpSpec;

    fn tiny() -> (Dataset, TrainConfig) {
        let spec = ClusterSpec {
            classes: 2,
            dim_signal: 3,
            dim_nuisance: 2,
            per_class: 16,
            ..ClusterSpec::default()
        };
        let config = TrainConfig {
            batch_size: 8,
            epochs: 3,
            warmup_epochs: 1,
            segments: crate::coder::SegmentConfig::new(2, 4).unwrap(),
            encoder: MlpSpec::new(vec![5, 6]).unwrap(),
            projector: MlpSpec::new(vec![6, 8]).unwrap(),
            ..TrainConfig::default()
        };
        (gen_clusters(&spec).unwrap(), config)
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let (ds, mut config) = tiny();
        config.base_lr = 0.0;
        config.final_lr = 0.0;
        let mut t = Trainer::new(config, ds.len()).unwrap();
        let before = t.params().clone();
        t.step(&ds, &(0..8).collect::<Vec<_>>(), 0).unwrap();
        assert_eq!(t.params(), &before);
        assert_eq!(t.step_count(), 1);
    }

    #[test]
    fn step_is_reproducible() {
        let (ds, config) = tiny();
        let idx: Vec<usize> = (3..11).collect();
        let mut a = Trainer::new(config.clone(), ds.len()).unwrap();
        let mut b = Trainer::new(config, ds.len()).unwrap();
        let oa = a.step(&ds, &idx, 0).unwrap();
        let ob = b.step(&ds, &idx, 0).unwrap();
        assert_eq!(oa, ob);
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), &Trainer::new(a.config().clone(), ds.len()).unwrap().params().clone());
    }

    #[test]
    fn rejects_wrong_batch_and_overrun() {
        let (ds, mut config) = tiny();
        config.epochs = 1;
        config.warmup_epochs = 0;
        let mut t = Trainer::new(config, ds.len()).unwrap();
        assert!(matches!(t.step(&ds, &[0, 1], 0), Err(Error::Usage(_))));
        for _ in 0..t.steps_per_epoch() {
            t.step(&ds, &(0..8).collect::<Vec<_>>(), 0).unwrap();
        }
        assert!(matches!(t.step(&ds, &(0..8).collect::<Vec<_>>(), 0), Err(Error::Usage(_))));
    }

    #[test]
    fn fit_emits_one_record_per_epoch() {
        let (ds, config) = tiny();
        let mut seen = Vec::new();
        let ck = fit(&ds, &config, FitOptions::default(), |m| {
            seen.push(m.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(seen.iter().map(|m| m.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(ck.metrics_tail, seen);
        assert_eq!(ck.step, 3 * 4);
        assert!(seen.iter().all(|m| m.wall_ms.is_none()));
        assert!((seen[2].lr - config.final_lr).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_gives_initial_checkpoint() {
        let (ds, mut config) = tiny();
        config.epochs = 0;
        let ck = fit(&ds, &config, FitOptions::default(), |_| panic!("no epochs")).unwrap();
        assert_eq!((ck.step, ck.epoch), (0, 0));
        assert_eq!(ck.params, Trainer::new(config, ds.len()).unwrap().params().clone());
    }

    #[test]
    fn dataset_smaller_than_batch() {
        let (ds, mut config) = tiny();
        config.batch_size = 64;
        assert!(matches!(Trainer::new(config, ds.len()), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let (ds, config) = tiny();
        let mut t = Trainer::new(config, ds.len()).unwrap();
        t.params.encoder.layers[0].weight.data_mut()[0] = f64::NAN;
        match t.step(&ds, &(0..8).collect::<Vec<_>>(), 0) {
            Err(Error::NonFiniteLoss { step: 0, breakdown }) => assert!(!breakdown.is_finite()),
            other => panic!("{other:?}"),
        }
    }
}
