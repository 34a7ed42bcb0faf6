use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use music_core::coder::{partition, segment_softmax};
use music_core::data::{self, batch_views, stream, ClusterSpec, Dataset, StreamTag};
use music_core::diagnostics::{ideal_code, linear_probe, theory_report, ProbeConfig, TheoryReport};
use music_core::model::ModelParams;
use music_core::trainer::{check_loss_gradients, fit, Checkpoint, FitOptions, LossCheckConfig};
use music_core::{Error, ProbCode, SegmentConfig};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::run_config::{env_precision, RunConfigFile};
use crate::{AnalyzeArgs, GenDataArgs, GradcheckArgs, ProbeArgs, ShowConfigArgs, TrainArgs};

#[derive(Debug)]
pub enum Failure {
    Core(Error),
    /// A check ran and its result was out of tolerance.
    Verification(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) if e.is_configuration() => 1,
            Failure::Core(_) => 2,
            Failure::Verification(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => e.fmt(f),
            Failure::Verification(msg) => f.write_str(msg),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = Result<(), Failure>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_record<T: Serialize>(path: &Path, record: &T) -> Result<(), Error> {
    let mut line = serde_json::to_string(record).expect("record serializes");
    line.push('\n');
    std::fs::write(path, line).map_err(io_err(path))
}

pub fn gen_data(a: GenDataArgs) -> CmdResult {
    let spec = ClusterSpec {
        classes: a.classes,
        dim_signal: a.dim_signal,
        dim_nuisance: a.dim_nuisance,
        per_class: a.per_class,
        separation: a.separation,
        noise_std: a.noise,
        seed: a.seed,
    };
    let ds = data::gen_clusters(&spec)?;
    data::write_dataset(&ds, &a.out)?;
    println!(
        "wrote {} samples ({} classes x {}), dim {} = {} signal + {} nuisance, seed {} to {}",
        ds.len(),
        spec.classes,
        spec.per_class,
        spec.dim(),
        spec.dim_signal,
        spec.dim_nuisance,
        spec.seed,
        a.out.display()
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> CmdResult {
    let mut file = match &a.config {
        Some(path) => RunConfigFile::load(path)?,
        None => RunConfigFile::default(),
    };
    if let Some(epochs) = a.epochs {
        file.epochs = epochs;
    }
    if let Some(lambda) = a.lambda {
        file.lambda = lambda;
    }
    if let Some(seed) = a.seed {
        file.seed = seed;
    }
    let config = file.resolve(env_precision()?)?;
    let ds = data::read_dataset(&a.data)?;

    let metrics_file = File::create(&a.metrics).map_err(io_err(&a.metrics))?;
    let mut metrics = BufWriter::new(metrics_file);
    let options = FitOptions {
        wall_clock: a.wall_clock,
    };
    let ckpt = fit(&ds, &config, options, |m| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(metrics, "{line}")
            .and_then(|_| metrics.flush())
            .map_err(io_err(&a.metrics))
    })?;
    ckpt.save(&a.out)?;
    match ckpt.metrics_tail.last() {
        Some(m) => println!(
            "trained {} epochs ({} steps): loss_total {:.6}, loss_ent {:.6}, loss_ti {:.6}, collapse_fraction {:.4}",
            ckpt.epoch, ckpt.step, m.loss_total, m.loss_ent, m.loss_ti, m.collapse_fraction
        ),
        None => println!("wrote initial checkpoint (0 epochs)"),
    }
    Ok(())
}

fn load_matching(ckpt_path: &Path, data_path: &Path) -> Result<(Checkpoint, Dataset), Error> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let ds = data::read_dataset(data_path)?;
    if ds.dim() != ckpt.params.input_dim() {
        return Err(Error::Config(format!(
            "{} has {}-dimensional samples but the checkpoint encoder expects {}",
            data_path.display(),
            ds.dim(),
            ckpt.params.input_dim()
        )));
    }
    Ok((ckpt, ds))
}

#[derive(Serialize)]
struct ProbeReport {
    checkpoint_epoch: usize,
    checkpoint_step: usize,
    representation_dim: usize,
    split_seed: u64,
    probe_epochs: usize,
    probe_lr: f64,
    train_acc: f64,
    test_acc: f64,
    n_train: usize,
    n_test: usize,
    classes: usize,
}

pub fn probe(a: ProbeArgs) -> CmdResult {
    let (ckpt, ds) = load_matching(&a.ckpt, &a.data)?;
    let features = ckpt.params.represent(ds.samples())?;
    let config = ProbeConfig {
        split_seed: a.split_seed,
        epochs: a.epochs,
        lr: a.lr,
        ..ProbeConfig::default()
    };
    let r = linear_probe(&features, ds.labels(), &config)?;
    let report = ProbeReport {
        checkpoint_epoch: ckpt.epoch,
        checkpoint_step: ckpt.step,
        representation_dim: ckpt.params.representation_dim(),
        split_seed: config.split_seed,
        probe_epochs: config.epochs,
        probe_lr: config.lr,
        train_acc: r.train_acc,
        test_acc: r.test_acc,
        n_train: r.n_train,
        n_test: r.n_test,
        classes: r.classes,
    };
    write_record(&a.report, &report)?;
    println!(
        "probe: test_acc {:.4}, train_acc {:.4} ({} train / {} test, {} classes)",
        r.test_acc, r.train_acc, r.n_train, r.n_test, r.classes
    );
    Ok(())
}

#[derive(Serialize)]
struct AnalyzeReport {
    /// `checkpoint` or `ideal`.
    source: &'static str,
    seed: u64,
    #[serde(flatten)]
    report: TheoryReport,
}

fn model_code(params: &ModelParams, inputs: &music_core::diffcore::Array, segments: &SegmentConfig) -> Result<ProbCode, Error> {
    segment_softmax(&partition(&params.embed(inputs)?, segments)?)
}

pub fn analyze(a: AnalyzeArgs) -> CmdResult {
    let (source, report) = if a.ideal {
        let code = ideal_code(&SegmentConfig::new(a.segments, a.segment_dim)?)?;
        ("ideal", theory_report(&code, Some(&code))?)
    } else {
        let (ckpt_path, data_path) = (a.ckpt.as_deref().unwrap(), a.data.as_deref().unwrap());
        let (ckpt, ds) = load_matching(ckpt_path, data_path)?;
        if a.batch_size < 2 || a.batch_size > ds.len() {
            return Err(Error::Config(format!(
                "batch size {} must lie in [2, {}] for this dataset",
                a.batch_size,
                ds.len()
            ))
            .into());
        }
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut stream(a.seed, StreamTag::AnalysisBatch, &[]));
        let indices = &order[..a.batch_size];
        let segments = ckpt.config.segments;
        let clean = ds.samples().select_rows(indices);
        let (view, _) = batch_views(&ds, indices, &ckpt.config.augment, a.seed, 0);
        let code = model_code(&ckpt.params, &clean, &segments)?;
        let other = model_code(&ckpt.params, &view, &segments)?;
        ("checkpoint", theory_report(&code, Some(&other))?)
    };
    println!(
        "analyze ({source}): N {}, collapsed {}, max collapse_fraction {:.4}, marginal deviation {:.4}, max off-diagonal MI {:.3e}",
        report.batch_size,
        report.collapsed,
        report.collapse_fraction.iter().cloned().fold(0.0, f64::max),
        report.marginals.max_deviation,
        report.mutual_information.max_off_diagonal()
    );
    write_record(
        &a.report,
        &AnalyzeReport {
            source,
            seed: a.seed,
            report,
        },
    )?;
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let cfg = LossCheckConfig {
        seed: a.seed,
        batch_size: a.batch_size,
        num_segments: a.segments,
        segment_dim: a.segment_dim,
        input_dim: a.input_dim,
        hidden_dim: a.hidden,
        lambda: a.lambda,
        step: a.step,
        tolerance: a.tolerance,
        inject_fault: a.inject_fault,
    };
    let check = check_loss_gradients(&cfg)?;
    let r = &check.report;
    let worst = match (&r.worst, &check.worst_tensor) {
        (Some(w), Some(name)) => format!(
            "{name}[{}] (analytic {:e}, numeric {:e})",
            w.element, w.analytic, w.numeric
        ),
        _ => "none".to_string(),
    };
    println!(
        "gradcheck: {} elements, max relative error {:e}, tolerance {:e}, worst {worst}",
        r.elements_checked, r.max_rel_error, r.tolerance
    );
    if r.passed() {
        Ok(())
    } else if r.non_finite {
        Err(Failure::Verification(format!("non-finite values in gradient check; worst {worst}")))
    } else {
        Err(Failure::Verification(format!(
            "max relative error {:e} is not below {:e} at {worst}",
            r.max_rel_error, r.tolerance
        )))
    }
}

pub fn show_config(a: ShowConfigArgs) -> CmdResult {
    let file = match &a.config {
        Some(path) => RunConfigFile::load(path)?,
        None => RunConfigFile::default(),
    };
    let resolved = file.resolve(env_precision()?)?;
    print!("{}", RunConfigFile::from(&resolved).to_toml());
    Ok(())
}
