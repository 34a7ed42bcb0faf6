//! Seeded synthetic clusters, two-view augmentation, and the dataset file.
//!
//! Every random draw comes from a ChaCha stream keyed by a hash of
//! `(seed, purpose, ...indices)`, so any view of any sample in any epoch can
//! be regenerated on its own.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Array;
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;
const DATASET_MAGIC: &str = "music-dataset";

/// Stream purposes; keeps streams for different jobs disjoint.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum StreamTag {
    Generate = 1,
    View = 2,
    Shuffle = 3,
    ProbeSplit = 4,
    AnalysisBatch = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a key tuple.
pub fn stream_key(seed: u64, tag: StreamTag, parts: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ 0x6d75_7369_635f_7631);
    h = splitmix64(h ^ tag as u64);
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

pub fn stream(seed: u64, tag: StreamTag, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, tag, parts))
}

/// Stream for view `view` of sample `sample` in `epoch`.
pub fn view_stream(seed: u64, epoch: u64, sample: u64, view: u64) -> ChaCha8Rng {
    stream(seed, StreamTag::View, &[epoch, sample, view])
}

pub const DEFAULT_CLASSES: usize = 8;
pub const DEFAULT_DIM_SIGNAL: usize = 16;
pub const DEFAULT_DIM_NUISANCE: usize = 48;
pub const DEFAULT_PER_CLASS: usize = 512;
pub const DEFAULT_SEPARATION: f64 = 0.25;
pub const DEFAULT_NOISE_STD: f64 = 0.15;
pub const DEFAULT_DATA_SEED: u64 = 7;

/// Generator parameters, also stored in the dataset header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub classes: usize,
    pub dim_signal: usize,
    pub dim_nuisance: usize,
    pub per_class: usize,
    pub separation: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            classes: DEFAULT_CLASSES,
            dim_signal: DEFAULT_DIM_SIGNAL,
            dim_nuisance: DEFAULT_DIM_NUISANCE,
            per_class: DEFAULT_PER_CLASS,
            separation: DEFAULT_SEPARATION,
            noise_std: DEFAULT_NOISE_STD,
            seed: DEFAULT_DATA_SEED,
        }
    }
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.dim_signal == 0 {
            return Err(Error::Config("dim_signal must be at least 1".into()));
        }
        if self.per_class == 0 {
            return Err(Error::Config("per_class must be at least 1".into()));
        }
        for (name, v) in [("separation", self.separation), ("noise_std", self.noise_std)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim_signal + self.dim_nuisance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Array,
    labels: Vec<usize>,
    meta: ClusterSpec,
}

impl Dataset {
    pub fn new(samples: Array, labels: Vec<usize>, meta: ClusterSpec) -> Result<Self> {
        let (n, d) = samples.dims2()?;
        if labels.len() != n {
            return Err(Error::Config(format!("{n} samples but {} labels", labels.len())));
        }
        if d != meta.dim() {
            return Err(Error::Config(format!(
                "samples have {d} columns, header declares {}",
                meta.dim()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= meta.classes) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {} classes",
                meta.classes
            )));
        }
        Ok(Self {
            samples,
            labels,
            meta,
        })
    }

    pub fn samples(&self) -> &Array {
        &self.samples
    }

    /// Class labels. Training never reads these.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn meta(&self) -> &ClusterSpec {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.meta.dim()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.samples.row(i)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.meta.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Gaussian class means scaled by `separation` in the signal dims; samples
/// add `noise_std` Gaussian noise to their class mean; nuisance dims are
/// unit Gaussian noise independent of the class.
pub fn gen_clusters(spec: &ClusterSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = stream(spec.seed, StreamTag::Generate, &[]);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };

    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..spec.dim_signal).map(|_| normal() * spec.separation).collect())
        .collect();

    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.dim());
    let mut labels = Vec::with_capacity(n);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..spec.per_class {
            data.extend(mean.iter().map(|m| m + normal() * spec.noise_std));
            data.extend((0..spec.dim_nuisance).map(|_| normal()));
            labels.push(class);
        }
    }
    Dataset::new(Array::new(vec![n, spec.dim()], data)?, labels, spec.clone())
}

pub const DEFAULT_AUG_NOISE_STD: f64 = 0.3 * DEFAULT_NOISE_STD;
pub const DEFAULT_AUG_DROPOUT: f64 = 0.5;
pub const DEFAULT_AUG_SCALE: (f64, f64) = (0.8, 1.25);

/// Per-view stochastic transform: additive Gaussian noise, coordinate
/// dropout, then one multiplicative scale drawn from `[scale_lo, scale_hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub noise_std: f64,
    pub dropout_prob: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            noise_std: DEFAULT_AUG_NOISE_STD,
            dropout_prob: DEFAULT_AUG_DROPOUT,
            scale_lo: DEFAULT_AUG_SCALE.0,
            scale_hi: DEFAULT_AUG_SCALE.1,
        }
    }
}

impl AugmentSpec {
    pub fn identity() -> Self {
        Self {
            noise_std: 0.0,
            dropout_prob: 0.0,
            scale_lo: 1.0,
            scale_hi: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("augment noise_std must be >= 0, got {}", self.noise_std)));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::Config(format!(
                "augment dropout_prob must lie in [0, 1), got {}",
                self.dropout_prob
            )));
        }
        if !(self.scale_lo > 0.0 && self.scale_hi >= self.scale_lo && self.scale_hi.is_finite()) {
            return Err(Error::Config(format!(
                "augment scale range needs hi >= lo > 0, got [{}, {}]",
                self.scale_lo, self.scale_hi
            )));
        }
        Ok(())
    }

    /// One transformed copy of `sample`. Draw order is fixed (noise and
    /// dropout per coordinate, then the scale), independent of the values.
    pub fn apply<R: Rng>(&self, sample: &[f64], rng: &mut R) -> Vec<f64> {
        let mut out: Vec<f64> = sample
            .iter()
            .map(|&x| {
                let z: f64 = StandardNormal.sample(rng);
                let u: f64 = rng.random();
                if u < self.dropout_prob {
                    0.0
                } else {
                    x + self.noise_std * z
                }
            })
            .collect();
        let scale = if self.scale_hi > self.scale_lo {
            rng.random_range(self.scale_lo..=self.scale_hi)
        } else {
            let _: f64 = rng.random();
            self.scale_lo
        };
        for v in &mut out {
            *v *= scale;
        }
        out
    }
}

/// Two independently transformed views of sample `index` for `epoch`.
pub fn two_views(sample: &[f64], spec: &AugmentSpec, seed: u64, epoch: u64, index: u64) -> (Vec<f64>, Vec<f64>) {
    let v1 = spec.apply(sample, &mut view_stream(seed, epoch, index, 0));
    let v2 = spec.apply(sample, &mut view_stream(seed, epoch, index, 1));
    (v1, v2)
}

/// Views for a batch of dataset rows, as two `N x d` matrices.
pub fn batch_views(dataset: &Dataset, indices: &[usize], spec: &AugmentSpec, seed: u64, epoch: u64) -> (Array, Array) {
    let d = dataset.dim();
    let mut a = Vec::with_capacity(indices.len() * d);
    let mut b = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        let (v1, v2) = two_views(dataset.sample(i), spec, seed, epoch, i as u64);
        a.extend(v1);
        b.extend(v2);
    }
    let shape = vec![indices.len(), d];
    (
        Array::new(shape.clone(), a).unwrap(),
        Array::new(shape, b).unwrap(),
    )
}

/// Serializes a dataset: one header line of `key=value` fields, then one
/// `label v1 v2 ...` line per sample.
pub fn dataset_to_string(ds: &Dataset) -> String {
    let m = &ds.meta;
    let mut out = String::new();
    writeln!(
        out,
        "{DATASET_MAGIC} version={DATASET_FORMAT_VERSION} samples={} classes={} dim_signal={} dim_nuisance={} per_class={} separation={} noise_std={} seed={}",
        ds.len(),
        m.classes,
        m.dim_signal,
        m.dim_nuisance,
        m.per_class,
        m.separation,
        m.noise_std,
        m.seed
    )
    .unwrap();
    for i in 0..ds.len() {
        write!(out, "{}", ds.labels[i]).unwrap();
        for v in ds.sample(i) {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, dataset_to_string(ds)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path)
}

fn parse_dataset(text: &str, path: &Path) -> Result<Dataset> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some(DATASET_MAGIC) {
        return Err(bad(format!("missing '{DATASET_MAGIC}' header")));
    }
    let mut kv = std::collections::BTreeMap::new();
    for f in fields {
        let (k, v) = f
            .split_once('=')
            .ok_or_else(|| bad(format!("header field '{f}' is not key=value")))?;
        kv.insert(k, v);
    }
    fn get<T: std::str::FromStr>(kv: &std::collections::BTreeMap<&str, &str>, k: &str) -> std::result::Result<T, String> {
        kv.get(k)
            .ok_or_else(|| format!("header lacks '{k}'"))?
            .parse()
            .map_err(|_| format!("header field '{k}' is malformed"))
    }
    let version: u32 = get(&kv, "version").map_err(bad)?;
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let samples: usize = get(&kv, "samples").map_err(bad)?;
    let meta = ClusterSpec {
        classes: get(&kv, "classes").map_err(bad)?,
        dim_signal: get(&kv, "dim_signal").map_err(bad)?,
        dim_nuisance: get(&kv, "dim_nuisance").map_err(bad)?,
        per_class: get(&kv, "per_class").map_err(bad)?,
        separation: get(&kv, "separation").map_err(bad)?,
        noise_std: get(&kv, "noise_std").map_err(bad)?,
        seed: get(&kv, "seed").map_err(bad)?,
    };
    let dim = meta.dim();
    let mut data = Vec::with_capacity(samples * dim);
    let mut labels = Vec::with_capacity(samples);
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let label: usize = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(format!("line {}: bad label", ln + 2)))?;
        let before = data.len();
        for t in toks {
            data.push(
                t.parse::<f64>()
                    .map_err(|_| bad(format!("line {}: bad value '{t}'", ln + 2)))?,
            );
        }
        if data.len() - before != dim {
            return Err(bad(format!(
                "line {}: expected {dim} values, got {}",
                ln + 2,
                data.len() - before
            )));
        }
        labels.push(label);
    }
    if labels.len() != samples {
        return Err(bad(format!("header declares {samples} samples, found {}", labels.len())));
    }
    Dataset::new(Array::new(vec![samples, dim], data)?, labels, meta).map_err(|e| bad(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ClusterSpec {
        ClusterSpec {
            classes: 3,
            dim_signal: 2,
            dim_nuisance: 1,
            per_class: 4,
            separation: 1.0,
            noise_std: 0.1,
            seed: 11,
        }
    }

    #[test]
    fn default_set_is_balanced() {
        let ds = gen_clusters(&ClusterSpec::default()).unwrap();
        assert_eq!(ds.len(), 4096);
        assert_eq!(ds.dim(), 64);
        assert_eq!(ds.class_counts(), vec![512; 8]);
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(gen_clusters(&tiny()).unwrap(), gen_clusters(&tiny()).unwrap());
        let other = ClusterSpec { seed: 12, ..tiny() };
        assert_ne!(gen_clusters(&tiny()).unwrap(), gen_clusters(&other).unwrap());
    }

    #[test]
    fn invalid_specs() {
        assert!(gen_clusters(&ClusterSpec { classes: 1, ..tiny() }).is_err());
        assert!(gen_clusters(&ClusterSpec { dim_signal: 0, ..tiny() }).is_err());
        assert!(gen_clusters(&ClusterSpec { noise_std: -1.0, ..tiny() }).is_err());
    }

    #[test]
    fn identity_augmentation() {
        let x = [0.25, -1.5, 3.0];
        let (a, b) = two_views(&x, &AugmentSpec::identity(), 1, 0, 0);
        assert_eq!(a, x);
        assert_eq!(b, x);
    }

    #[test]
    fn views_replay() {
        let x = [0.25, -1.5, 3.0, 0.0];
        let spec = AugmentSpec::default();
        assert_eq!(two_views(&x, &spec, 5, 2, 9), two_views(&x, &spec, 5, 2, 9));
        assert_ne!(two_views(&x, &spec, 5, 2, 9), two_views(&x, &spec, 5, 3, 9));
    }

    #[test]
    fn noisy_views_differ() {
        let spec = AugmentSpec {
            noise_std: 0.1,
            dropout_prob: 0.0,
            scale_lo: 1.0,
            scale_hi: 1.0,
        };
        let x = [1.0, 2.0];
        let differing = (0..1000)
            .filter(|&i| {
                let (a, b) = two_views(&x, &spec, 3, 0, i);
                a != b
            })
            .count();
        assert_eq!(differing, 1000);
    }

    #[test]
    fn augment_spec_validation() {
        assert!(AugmentSpec::default().validate().is_ok());
        assert!(AugmentSpec { dropout_prob: 1.0, ..AugmentSpec::default() }.validate().is_err());
        assert!(AugmentSpec { scale_lo: 0.0, ..AugmentSpec::default() }.validate().is_err());
        assert!(AugmentSpec { scale_lo: 2.0, scale_hi: 1.0, ..AugmentSpec::default() }.validate().is_err());
    }

    #[test]
    fn file_round_trip_is_exact() {
        let ds = gen_clusters(&tiny()).unwrap();
        let text = dataset_to_string(&ds);
        let back = parse_dataset(&text, Path::new("mem")).unwrap();
        assert_eq!(back, ds);
        assert_eq!(dataset_to_string(&back), text);
    }

    #[test]
    fn malformed_files_rejected() {
        let ds = gen_clusters(&tiny()).unwrap();
        let text = dataset_to_string(&ds);
        let p = Path::new("mem");
        assert!(parse_dataset("", p).is_err());
        assert!(parse_dataset("hello\n", p).is_err());
        let truncated: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        assert!(matches!(parse_dataset(&truncated, p), Err(Error::Format { .. })));
        let v2 = text.replacen("version=1", "version=2", 1);
        assert!(matches!(parse_dataset(&v2, p), Err(Error::Version { found: 2, .. })));
        let bad_label = text.replacen("\n0 ", "\n9 ", 1);
        assert!(parse_dataset(&bad_label, p).is_err());
    }
}
