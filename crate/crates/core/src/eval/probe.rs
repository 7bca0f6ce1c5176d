//! Linear probe on frozen global image embeddings: multinomial logistic
//! regression fitted on a stratified label subset.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::image_embeddings;
use super::metrics::{accuracy, argmax, macro_auc, per_class_auc};
use super::zero_shot::class_labels;
use crate::data::{MotifKind, SyntheticSample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::seeds::{self, Stream};

/// Label fractions reported by the probe.
pub const PROBE_FRACTIONS: [f64; 3] = [0.01, 0.1, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.5,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub fraction: f64,
    pub n_train: usize,
    pub auc: f64,
    pub accuracy: f64,
    pub per_class_auc: Vec<Option<f64>>,
}

/// `round(fraction * n)` indices, split across classes in proportion to
/// their frequency with at least one per present class.
pub fn stratified_subset(labels: &[usize], fraction: f64, num_classes: usize, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("probe fraction must be in (0, 1], got {fraction}")));
    }
    let want = (fraction * labels.len() as f64).round() as usize;
    if want < num_classes {
        return Err(Error::invalid(format!(
            "a {fraction} subset of {} labels has {want} samples, fewer than the {num_classes} classes",
            labels.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class
            .get_mut(l)
            .ok_or_else(|| Error::invalid(format!("label {l} >= {num_classes} classes")))?
            .push(i);
    }
    let mut rng = seeds::rng(seed, Stream::Probe, 0);
    for c in &mut by_class {
        c.shuffle(&mut rng);
    }
    // proportional quotas, largest remainder, then at least one per class
    let n = labels.len() as f64;
    let exact: Vec<f64> = by_class.iter().map(|c| c.len() as f64 * want as f64 / n).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = want - quota.iter().sum::<usize>();
    for &c in order.iter().cycle().take(num_classes * 2) {
        if left == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            left -= 1;
        }
    }
    for c in 0..num_classes {
        if quota[c] == 0 && !by_class[c].is_empty() {
            if let Some(d) = (0..num_classes).filter(|&d| quota[d] > 1).max_by_key(|&d| quota[d]) {
                quota[d] -= 1;
                quota[c] = 1;
            }
        }
    }
    let mut out: Vec<usize> = by_class.iter().zip(&quota).flat_map(|(c, &q)| c[..q].iter().copied()).collect();
    out.sort_unstable();
    Ok(out)
}

/// Weights `[C][D + 1]` (bias last), fitted by full-batch gradient descent
/// from zero on the mean cross-entropy plus `l2 * |W|^2 / 2`.
pub fn fit_softmax_regression(x: &[Vec<f64>], y: &[usize], num_classes: usize, cfg: &ProbeConfig) -> Result<Vec<Vec<f64>>> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::shape("probe training set", x.len(), y.len()));
    }
    let d = x[0].len();
    let n = x.len() as f64;
    let mut w = vec![vec![0.0; d + 1]; num_classes];
    let mut grad = vec![vec![0.0; d + 1]; num_classes];
    for _ in 0..cfg.epochs {
        grad.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
        for (xi, &yi) in x.iter().zip(y) {
            let p = softmax(&logits(&w, xi));
            for c in 0..num_classes {
                let r = p[c] - (c == yi) as u8 as f64;
                for j in 0..d {
                    grad[c][j] += r * xi[j];
                }
                grad[c][d] += r;
            }
        }
        for c in 0..num_classes {
            for j in 0..=d {
                let reg = if j < d { cfg.l2 * w[c][j] } else { 0.0 };
                w[c][j] -= cfg.lr * (grad[c][j] / n + reg);
            }
        }
    }
    Ok(w)
}

fn logits(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    w.iter().map(|wc| wc[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + wc[d]).collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Centers features on the training mean and rescales them to unit mean norm.
fn standardize(train: &[Vec<f64>], test: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = train[0].len();
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let center = |r: &Vec<f64>| r.iter().zip(&mean).map(|(a, m)| a - m).collect::<Vec<f64>>();
    let tr: Vec<Vec<f64>> = train.iter().map(center).collect();
    let scale = tr.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / n;
    let scale = if scale > 1e-12 { scale } else { 1.0 };
    let apply = |rows: Vec<Vec<f64>>| -> Vec<Vec<f64>> { rows.into_iter().map(|r| r.into_iter().map(|v| v / scale).collect()).collect() };
    (apply(tr), apply(test.iter().map(center).collect()))
}

/// Fits on a `fraction` subset of the pool and scores the test set.
#[allow(clippy::too_many_arguments)]
pub fn linear_probe_features(
    pool_x: &[Vec<f64>],
    pool_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    num_classes: usize,
    fraction: f64,
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    super::non_empty(test_x, "probe test set")?;
    let idx = stratified_subset(pool_y, fraction, num_classes, seed)?;
    let train_x: Vec<Vec<f64>> = idx.iter().map(|&i| pool_x[i].clone()).collect();
    let train_y: Vec<usize> = idx.iter().map(|&i| pool_y[i]).collect();
    let (train_x, test_x) = standardize(&train_x, test_x);
    let w = fit_softmax_regression(&train_x, &train_y, num_classes, cfg)?;
    let scores: Vec<Vec<f64>> = test_x.iter().map(|x| softmax(&logits(&w, x))).collect();
    let preds: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
    let per_class = per_class_auc(&scores, test_y, num_classes)?;
    Ok(ProbeResult {
        fraction,
        n_train: idx.len(),
        auc: macro_auc(&per_class)?,
        accuracy: accuracy(&preds, test_y)?,
        per_class_auc: per_class,
    })
}

/// Probe on the model's frozen global image embeddings.
pub fn linear_probe(
    model: &Model,
    pool: &[SyntheticSample],
    test: &[SyntheticSample],
    fraction: f64,
    seed: u64,
) -> Result<ProbeResult> {
    super::non_empty(pool, "probe pool")?;
    let pool_y = class_labels(pool)?;
    let test_y = class_labels(test)?;
    let pool_x = image_embeddings(model, &pool.iter().collect::<Vec<_>>())?;
    let test_x = image_embeddings(model, &test.iter().collect::<Vec<_>>())?;
    linear_probe_features(&pool_x, &pool_y, &test_x, &test_y, MotifKind::ALL.len(), fraction, seed, &ProbeConfig::default())
}
