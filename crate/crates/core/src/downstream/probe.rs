use rand::seq::SliceRandom;

use crate::data::ClipPair;
use crate::encoder::Encoder;
use crate::numerics::ParamStore;
use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub classes: usize,
    pub train_fraction: f64,
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { classes: 8, train_fraction: 0.8, iterations: 500, lr: 0.05, l2: 1e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Multinomial logistic regression on standardized features, fit by
/// full-batch Adam; accuracy is reported on a held-out split.
pub fn linear_probe(features: &[Vec<f64>], labels: &[usize], cfg: &ProbeConfig) -> Result<ProbeReport> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::InvalidArgument(format!("{} feature rows for {} labels", features.len(), labels.len())));
    }
    let k = cfg.classes;
    if labels.iter().any(|&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label outside 0..{k}")));
    }
    let mut present = vec![false; k];
    labels.iter().for_each(|&l| present[l] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::InvalidArgument("probe needs at least 2 classes".into()));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("probe feature rows differ in width".into()));
    }
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(&mut stream_rng(cfg.seed, Stream::Probe, 0));
    let n_train = ((features.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, features.len() - 1);
    let (train, test) = order.split_at(n_train);

    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train.iter().map(|&i| features[i][j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| (train.iter().map(|&i| (features[i][j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-8))
        .collect();
    let x = |i: usize| -> Vec<f64> { (0..d).map(|j| (features[i][j] - mean[j]) / std[j]).collect() };
    let xtr: Vec<Vec<f64>> = train.iter().map(|&i| x(i)).collect();

    // Weights [k, d + 1], last column is the bias.
    let w_len = k * (d + 1);
    let mut w = vec![0.0; w_len];
    let (mut m, mut v) = (vec![0.0; w_len], vec![0.0; w_len]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut grad = vec![0.0; w_len];
    for it in 1..=cfg.iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (row, &i) in xtr.iter().zip(train) {
            let p = softmax_scores(&w, row, k, d);
            for c in 0..k {
                let delta = (p[c] - (labels[i] == c) as u8 as f64) / n;
                let g = &mut grad[c * (d + 1)..(c + 1) * (d + 1)];
                for j in 0..d {
                    g[j] += delta * row[j];
                }
                g[d] += delta;
            }
        }
        for c in 0..k {
            for j in 0..d {
                grad[c * (d + 1) + j] += cfg.l2 * w[c * (d + 1) + j];
            }
        }
        let (c1, c2) = (1.0 - b1.powi(it as i32), 1.0 - b2.powi(it as i32));
        for q in 0..w_len {
            m[q] = b1 * m[q] + (1.0 - b1) * grad[q];
            v[q] = b2 * v[q] + (1.0 - b2) * grad[q] * grad[q];
            w[q] -= cfg.lr * (m[q] / c1) / ((v[q] / c2).sqrt() + eps);
        }
    }
    let accuracy = |idx: &[usize]| -> f64 {
        if idx.is_empty() {
            return 0.0;
        }
        let hits = idx.iter().filter(|&&i| argmax(&softmax_scores(&w, &x(i), k, d)) == labels[i]).count();
        hits as f64 / idx.len() as f64
    };
    Ok(ProbeReport { train_accuracy: accuracy(train), test_accuracy: accuracy(test), n_train: train.len(), n_test: test.len() })
}

fn softmax_scores(w: &[f64], x: &[f64], k: usize, d: usize) -> Vec<f64> {
    let z: Vec<f64> = (0..k)
        .map(|c| {
            let row = &w[c * (d + 1)..(c + 1) * (d + 1)];
            row[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + row[d]
        })
        .collect();
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(p: &[f64]) -> usize {
    p.iter().enumerate().fold(0, |best, (i, &v)| if v > p[best] { i } else { best })
}

/// `[cls(current) ∥ cls(future)]` for every pair, from the frozen encoder.
pub fn pair_features(encoder: &Encoder, params: &ParamStore<f32>, pairs: &[ClipPair]) -> Result<Vec<Vec<f64>>> {
    pairs
        .iter()
        .map(|p| {
            let c = encoder.encode_full(params, &p.current)?;
            let f = encoder.encode_full(params, &p.future)?;
            Ok(c.cls.data().iter().chain(f.cls.data()).map(|&v| v as f64).collect())
        })
        .collect()
}

/// Linear probe of the 8-way displacement direction on frozen pair
/// features. Pairs without a usable label are skipped.
pub fn motion_probe(encoder: &Encoder, params: &ParamStore<f32>, pairs: &[ClipPair], cfg: &ProbeConfig) -> Result<ProbeReport> {
    let labelled: Vec<(&ClipPair, usize)> = pairs.iter().filter_map(|p| p.direction_bin(cfg.classes).map(|b| (p, b))).collect();
    if labelled.is_empty() {
        return Err(Error::Data("no pairs carry motion labels".into()));
    }
    let kept: Vec<ClipPair> = labelled.iter().map(|(p, _)| (*p).clone()).collect();
    let labels: Vec<usize> = labelled.iter().map(|(_, b)| *b).collect();
    let features = pair_features(encoder, params, &kept)?;
    linear_probe(&features, &labels, cfg)
}
