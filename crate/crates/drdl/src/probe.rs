//! Linear probing: how much of a label can a softmax regression read out
//! of a fixed feature vector?
//!
//! The probe is the measurement instrument for disentanglement claims:
//! camera identity should be nearly unreadable from content features and
//! clearly readable from style features. Probes train on a seeded split
//! and report held-out accuracy, so the numbers mean generalization, not
//! memorization.
//!
//! Everything runs in f64 regardless of the model precision that produced
//! the features; probe quality must not depend on the precision under
//! study.

use crate::nn::{Adam, AdamConfig, Param};
use crate::tensor::Tensor;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of samples in the training split, strictly inside (0, 1).
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 800,
            lr: 0.05,
            weight_decay: 1e-4,
            train_fraction: 0.5,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("probe needs at least one epoch".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "probe learning rate must be positive and finite, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "probe weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "probe train fraction must lie strictly inside (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub num_classes: usize,
    /// Uniform-guess accuracy, 1 / num_classes.
    pub chance: f64,
    pub train_size: usize,
    pub test_size: usize,
}

/// Trains a softmax regression on a seeded split of (features, labels)
/// and reports train/held-out accuracy.
pub fn linear_probe(
    features: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    cfg.validate()?;
    if features.is_empty() {
        return Err(Error::Config("probe got no samples".into()));
    }
    if features.len() != labels.len() {
        return Err(Error::Config(format!(
            "probe got {} feature rows but {} labels",
            features.len(),
            labels.len()
        )));
    }
    if num_classes < 2 {
        return Err(Error::Config(
            "probe needs at least two classes to separate".into(),
        ));
    }
    let dim = features[0].len();
    if dim == 0 {
        return Err(Error::Config("probe features are zero-dimensional".into()));
    }
    for (i, f) in features.iter().enumerate() {
        if f.len() != dim {
            return Err(Error::Config(format!(
                "probe feature row {i} has {} dims, expected {dim}",
                f.len()
            )));
        }
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::ClassOutOfRange {
                index: l,
                width: num_classes,
                context: format!("probe label {i}"),
            });
        }
    }

    // Seeded shuffle, then cut: the split depends only on (seed, n).
    let n = features.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = ((n as f64 * cfg.train_fraction).round() as usize).clamp(1, n - 1);
    let (train_idx, test_idx) = order.split_at(n_train);

    // Standardize with training-split statistics only.
    let mut mean = vec![0.0f64; dim];
    for &i in train_idx {
        for (m, v) in mean.iter_mut().zip(&features[i]) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n_train as f64;
    }
    let mut std = vec![0.0f64; dim];
    for &i in train_idx {
        for (s, (v, m)) in std.iter_mut().zip(features[i].iter().zip(&mean)) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut std {
        *s = (*s / n_train as f64).sqrt();
        if *s == 0.0 {
            *s = 1.0;
        }
    }
    let standardized = |i: usize| -> Vec<f64> {
        features[i]
            .iter()
            .zip(mean.iter().zip(&std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    };

    let mut weight = Param::new("probe.weight", Tensor::<f64>::zeros(&[num_classes, dim]));
    let mut bias = Param::new("probe.bias", Tensor::<f64>::zeros(&[num_classes]));
    let mut opt = Adam::new(AdamConfig::new(cfg.lr).with_weight_decay(cfg.weight_decay))?;

    let logits_of = |weight: &Param<f64>, bias: &Param<f64>, x: &[f64]| -> Vec<f64> {
        let w = weight.value.data();
        let b = bias.value.data();
        (0..num_classes)
            .map(|k| {
                let row = &w[k * dim..(k + 1) * dim];
                b[k] + row.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>()
            })
            .collect()
    };

    for _ in 0..cfg.epochs {
        weight.zero_grad();
        bias.zero_grad();
        for &i in train_idx {
            let x = standardized(i);
            let logits = logits_of(&weight, &bias, &x);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for k in 0..num_classes {
                let p = exps[k] / z;
                let residual = (p - if k == labels[i] { 1.0 } else { 0.0 }) / n_train as f64;
                bias.grad.data_mut()[k] += residual;
                let gw = &mut weight.grad.data_mut()[k * dim..(k + 1) * dim];
                for (g, xi) in gw.iter_mut().zip(&x) {
                    *g += residual * xi;
                }
            }
        }
        opt.step(&mut [&mut weight, &mut bias])?;
    }

    let accuracy = |idx: &[usize]| -> f64 {
        let hits = idx
            .iter()
            .filter(|&&i| {
                let logits = logits_of(&weight, &bias, &standardized(i));
                let pred = logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(k, _)| k)
                    .expect("at least two classes");
                pred == labels[i]
            })
            .count();
        hits as f64 / idx.len() as f64
    };

    Ok(ProbeOutcome {
        train_accuracy: accuracy(train_idx),
        test_accuracy: accuracy(test_idx),
        num_classes,
        chance: 1.0 / num_classes as f64,
        train_size: train_idx.len(),
        test_size: test_idx.len(),
    })
}
