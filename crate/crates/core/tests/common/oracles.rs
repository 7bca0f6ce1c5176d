//! Scalar reference implementations of the loss definitions.

use candle_core::{Device, Tensor};
use qsvlm::losses::TemperatureParams;

use super::{dot, logsumexp, normal_vec, unit_rows};

pub fn t2(rows: &[Vec<f64>]) -> Tensor {
    let c = rows[0].len();
    Tensor::from_vec(rows.concat(), (rows.len(), c), &Device::Cpu).unwrap()
}

pub fn t3(blocks: &[Vec<Vec<f64>>]) -> Tensor {
    let (r, c) = (blocks[0].len(), blocks[0][0].len());
    let flat: Vec<f64> = blocks.iter().flatten().flatten().copied().collect();
    Tensor::from_vec(flat, (blocks.len(), r, c), &Device::Cpu).unwrap()
}

pub fn random_rows(n: usize, d: usize, r: &mut rand_chacha::ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| normal_vec(d, r)).collect()
}

/// Mean cross-entropy of each row of `logits` against its diagonal entry,
/// optionally averaged with the column direction.
pub fn info_nce_oracle(logits: &[Vec<f64>], symmetric: bool) -> f64 {
    let n = logits.len();
    let row: f64 = (0..n).map(|i| logsumexp(&logits[i]) - logits[i][i]).sum::<f64>() / n as f64;
    if !symmetric {
        return row;
    }
    let col: f64 = (0..n)
        .map(|j| {
            let c: Vec<f64> = (0..n).map(|i| logits[i][j]).collect();
            logsumexp(&c) - logits[j][j]
        })
        .sum::<f64>()
        / n as f64;
    0.5 * (row + col)
}

pub fn global_oracle(v: &[Vec<f64>], t: &[Vec<f64>], tau: f64, symmetric: bool) -> f64 {
    let logits: Vec<Vec<f64>> = v.iter().map(|a| t.iter().map(|b| dot(a, b) / tau).collect()).collect();
    info_nce_oracle(&logits, symmetric)
}

/// Attention weights and normalized context, straight from the definition.
pub fn context_oracle(patches: &[Vec<f64>], sentence: &[f64], tau_att: f64) -> (Vec<f64>, Vec<f64>) {
    let pn = unit_rows(patches);
    let sn = &unit_rows(&[sentence.to_vec()])[0];
    let logits: Vec<f64> = pn.iter().map(|p| dot(p, sn) / tau_att).collect();
    let lse = logsumexp(&logits);
    let w: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    let d = patches[0].len();
    let c: Vec<f64> = (0..d).map(|k| patches.iter().zip(&w).map(|(p, wj)| wj * p[k]).sum()).collect();
    (unit_rows(&[c])[0].clone(), w)
}

pub fn z_oracle(patches: &[Vec<f64>], sentences: &[Vec<f64>], temps: &TemperatureParams) -> f64 {
    let cos: Vec<f64> = sentences
        .iter()
        .map(|s| {
            let (c, _) = context_oracle(patches, s, temps.tau_att);
            dot(&c, &unit_rows(&[s.clone()])[0])
        })
        .collect();
    temps.tau2 * cos.iter().map(|x| (x / temps.tau2).exp()).sum::<f64>().ln()
}

/// Batch local loss from the nine (or B^2) per-pair Z values.
pub fn local_loss_oracle(
    patches: &[Vec<Vec<f64>>],
    sentences: &[Vec<Vec<f64>>],
    mask: &[Vec<bool>],
    temps: &TemperatureParams,
    symmetric: bool,
) -> f64 {
    let b = patches.len();
    let logits: Vec<Vec<f64>> = (0..b)
        .map(|i| {
            (0..b)
                .map(|k| {
                    let valid: Vec<Vec<f64>> =
                        sentences[k].iter().zip(&mask[k]).filter(|(_, m)| **m).map(|(s, _)| s.clone()).collect();
                    z_oracle(&patches[i], &valid, temps) / temps.tau2
                })
                .collect()
        })
        .collect();
    info_nce_oracle(&logits, symmetric)
}

