use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{stream, StreamTag};
use crate::diffcore::{matmul, softmax_last, Array};
use crate::error::{Error, Result};

/// Multinomial logistic regression on frozen features, fitted by full-batch
/// gradient descent on standardized inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub split_seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            split_seed: 0,
            epochs: 500,
            lr: 0.5,
            train_fraction: 0.8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_acc: f64,
    pub test_acc: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub classes: usize,
}

pub fn linear_probe(features: &Array, labels: &[usize], config: &ProbeConfig) -> Result<ProbeResult> {
    let (n, d) = features.dims2()?;
    if labels.len() != n {
        return Err(Error::Usage(format!("{n} feature rows but {} labels", labels.len())));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut present = vec![false; classes];
    for &l in labels {
        present[l] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::Usage("linear probe needs at least two classes".into()));
    }
    if !(config.train_fraction > 0.0 && config.train_fraction < 1.0) {
        return Err(Error::Usage(format!("train_fraction must lie in (0, 1), got {}", config.train_fraction)));
    }
    let n_train = (n as f64 * config.train_fraction).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Usage(format!("{n} samples cannot be split {}", config.train_fraction)));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(config.split_seed, StreamTag::ProbeSplit, &[]));
    let (train_idx, test_idx) = order.split_at(n_train);

    let mut x_train = features.select_rows(train_idx);
    let mut x_test = features.select_rows(test_idx);
    standardize(&mut x_train, &mut x_test, d);
    let y_train: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let y_test: Vec<usize> = test_idx.iter().map(|&i| labels[i]).collect();

    let x_train_t = x_train.transpose()?;
    let mut weight = Array::zeros(&[d, classes]);
    let mut bias = vec![0.0; classes];
    let scale = 1.0 / n_train as f64;
    for _ in 0..config.epochs {
        let mut probs = softmax_last(&logits(&x_train, &weight, &bias)?);
        for (row, &y) in probs.data_mut().chunks_mut(classes).zip(&y_train) {
            row[y] -= 1.0;
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
        let grad_w = matmul(&x_train_t, &probs)?;
        for (w, g) in weight.data_mut().iter_mut().zip(grad_w.data()) {
            *w -= config.lr * g;
        }
        for row in probs.data().chunks(classes) {
            for (b, g) in bias.iter_mut().zip(row) {
                *b -= config.lr * g;
            }
        }
    }

    let accuracy = |x: &Array, y: &[usize]| -> Result<f64> {
        let z = logits(x, &weight, &bias)?;
        let hits = z
            .data()
            .chunks(classes)
            .zip(y)
            .filter(|(row, &label)| argmax(row) == label)
            .count();
        Ok(hits as f64 / y.len() as f64)
    };
    Ok(ProbeResult {
        train_acc: accuracy(&x_train, &y_train)?,
        test_acc: accuracy(&x_test, &y_test)?,
        n_train,
        n_test: n - n_train,
        classes,
    })
}

fn logits(x: &Array, weight: &Array, bias: &[f64]) -> Result<Array> {
    let mut z = matmul(x, weight)?;
    let c = bias.len();
    for row in z.data_mut().chunks_mut(c) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(z)
}

/// First index of the maximum.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Z-scores both splits with training statistics; constant columns are
/// only centered.
fn standardize(train: &mut Array, test: &mut Array, d: usize) {
    let n = train.shape()[0] as f64;
    let mut mean = vec![0.0; d];
    for row in train.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for row in train.data().chunks(d) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let inv_std: Vec<f64> = var
        .iter()
        .map(|s| {
            let std = (s / n).sqrt();
            if std > 1e-12 { 1.0 / std } else { 1.0 }
        })
        .collect();
    for arr in [train, test] {
        for row in arr.data_mut().chunks_mut(d) {
            for ((v, m), k) in row.iter_mut().zip(&mean).zip(&inv_std) {
                *v = (*v - m) * k;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_class_is_rejected() {
        let x = Array::zeros(&[10, 2]);
        assert!(matches!(linear_probe(&x, &[1; 10], &ProbeConfig::default()), Err(Error::Usage(_))));
    }

    #[test]
    fn one_hot_label_features_are_perfect() {
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..3).map(|k| if k == l { 1.0 } else { 0.0 }).collect())
            .collect();
        let r = linear_probe(&Array::from_rows(&rows).unwrap(), &labels, &ProbeConfig::default()).unwrap();
        assert_eq!(r.test_acc, 1.0);
        assert_eq!(r.train_acc, 1.0);
        assert_eq!((r.n_train, r.n_test, r.classes), (48, 12, 3));
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[0.0, 1.0, 1.0]), 1);
        assert_eq!(argmax(&[2.0, 1.0]), 0);
    }
}
